"""Training loop, validation and checkpoints for the toy model."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lff import tensor as T
from lff.adapter import build_audio_context
from lff.config import ExperimentConfig, ModelConfig
from lff.data import SyntheticScene, encode, generate_scene, read_tensor, write_tensor
from lff.dit import assemble_conditioning, init_params, velocity
from lff.errors import ConfigError, NumericError
from lff.flow import flow_forward, loss_branch, masked_loss, velocity_target
from lff.tensor import AdamState, GradTape, Rng, Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "branch", "q", "t")

# child stream keys under the experiment seed
_KEY_INIT, _KEY_TRAIN, _KEY_DATA, _KEY_VAL = 11, 12, 13, 14


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainState:
    params: dict
    opt: AdamState
    step: int
    rng: Rng
    loss_mean: float = 0.0  # running mean over all steps so far
    history: list = field(default_factory=list)  # one dict per step


@dataclass
class _Prepared:
    """A scene with its latents and audio context precomputed."""

    scene: SyntheticScene
    latents: np.ndarray
    context: object


def dtype_of(name: str):
    return np.float32 if name == "float32" else np.float64


def make_scenes(cfg: ExperimentConfig, count: int, key: int) -> list[SyntheticScene]:
    """``count`` deterministic scenes for the stream ``key`` of ``cfg.seed``."""
    base = Rng(cfg.seed).spawn(key)
    m = cfg.model
    return [generate_scene(base.spawn(i), cfg.data.frames, m.height, m.width, m.audio_dim, m.channels)
            for i in range(count)]


def training_scenes(cfg: ExperimentConfig) -> list[SyntheticScene]:
    return make_scenes(cfg, cfg.data.scenes, _KEY_DATA)


def validation_scenes(cfg: ExperimentConfig) -> list[SyntheticScene]:
    return make_scenes(cfg, cfg.data.val_scenes, _KEY_VAL)


def _prepare(scenes, mcfg: ModelConfig, dtype) -> list[_Prepared]:
    out = []
    for sc in scenes:
        if sc.video.shape[1:] != (mcfg.channels, mcfg.height, mcfg.width):
            raise ConfigError(f"scene frame shape {sc.video.shape[1:]} does not match the model config")
        if sc.audio.shape[1] != mcfg.audio_dim:
            raise ConfigError(f"scene audio_dim {sc.audio.shape[1]} != model.audio_dim {mcfg.audio_dim}")
        out.append(_Prepared(sc, encode(sc.video).astype(dtype), build_audio_context(sc.audio, mcfg.context_k)))
    return out


def _crop(prep: _Prepared, start: int, frames: int, mcfg: ModelConfig):
    x0 = prep.latents[start:start + frames]
    pack = assemble_conditioning(prep.scene.reference_frame, prep.context.window(start, start + frames),
                                 frames, mcfg)
    return x0, pack


class Validator:
    """Fixed held-out (crop, t, noise) draws; reports plain velocity MSE."""

    def __init__(self, scenes, cfg: ExperimentConfig, mcfg: ModelConfig, dtype):
        rng = Rng(cfg.seed).spawn(_KEY_VAL + 100)
        preps = _prepare(scenes, mcfg, dtype)
        f = cfg.train.window
        self.items = []
        for i in range(cfg.train.val_samples):
            prep = preps[i % len(preps)]
            start = int(rng.integers(0, prep.latents.shape[0] - f + 1))
            x0, pack = _crop(prep, start, f, mcfg)
            t = (i + 0.5) / cfg.train.val_samples
            noise = rng.normal(x0.shape, dtype)
            self.items.append((flow_forward(x0, noise, t).astype(dtype), pack, t, velocity_target(x0, noise)))
        self.mcfg = mcfg

    def __call__(self, params) -> float:
        errs = [np.mean((velocity(params, self.mcfg, xt, pack, t).data - v) ** 2) for xt, pack, t, v in self.items]
        return float(np.mean(errs))


def _cast(params: dict, dtype) -> dict:
    return {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v), dtype=dtype) for k, v in params.items()}


def init_state(cfg: ExperimentConfig, variant: str | None = None, params: dict | None = None) -> TrainState:
    dtype = dtype_of(cfg.train.precision)
    mcfg = cfg.model_config(variant)
    with T.default_dtype(dtype):
        p = init_params(mcfg, Rng(cfg.seed).spawn(_KEY_INIT).seed) if params is None else _cast(params, dtype)
    return TrainState(p, T.adam_init(p), 0, Rng(cfg.seed).spawn(_KEY_TRAIN))


_ADAPTER_SHARED = ("adapter.raw.", "adapter.null_audio")


def is_adapter_network(name: str) -> bool:
    """Adapter blocks, output MLP and modulation vectors; not the raw projection or null vector."""
    return name.startswith("adapter.") and not name.startswith(_ADAPTER_SHARED)


def learning_rates(params: dict, cfg: ExperimentConfig):
    """Per-parameter learning rates: the adapter network runs at ``adapter_lr_scale`` times the base rate."""
    lr, scale = cfg.train.lr, cfg.train.adapter_lr_scale
    if scale == 1.0:
        return lr
    return {k: lr * scale if is_adapter_network(k) else lr for k in params}


def train_step(state: TrainState, preps: list, cfg: ExperimentConfig, mcfg: ModelConfig, dtype) -> dict:
    """Sample a crop, t, noise, q and a conditioning drop; one Adam update."""
    rng = state.rng
    f = cfg.train.window
    prep = preps[int(rng.integers(0, len(preps)))]
    start = int(rng.integers(0, prep.latents.shape[0] - f + 1))
    t = float(rng.uniform())
    q = float(rng.uniform())
    u = float(rng.uniform())
    noise = rng.normal((f, mcfg.channels, mcfg.height, mcfg.width), dtype)
    x0, pack = _crop(prep, start, f, mcfg)
    mode = "null" if u < cfg.train.p_drop else ("none" if u < 2 * cfg.train.p_drop else "full")
    xt = flow_forward(x0, noise, t).astype(dtype)
    target = velocity_target(x0, noise)
    params = T.track(state.params)
    with GradTape() as tape:
        pred = velocity(params, mcfg, xt, pack, t, mode)
        loss = masked_loss(pred, target, prep.scene.face_mask, prep.scene.lip_mask, q)
    value = float(loss.item())
    if not np.isfinite(value) or value > cfg.train.divergence:
        raise TrainingDiverged(
            f"training diverged at step {state.step + 1}: loss {value!r} (threshold {cfg.train.divergence}); "
            f"branch {loss_branch(q)}, t={t:.4f}, lr={cfg.train.lr}"
        )
    grads = T.grad_dict(tape, loss, params)
    state.params, state.opt = T.adam_step(state.params, grads, state.opt, learning_rates(state.params, cfg))
    state.step += 1
    state.loss_mean += (value - state.loss_mean) / state.step
    row = {"step": state.step, "loss": value, "branch": loss_branch(q), "q": q, "t": t}
    state.history.append(row)
    return row


@dataclass
class TrainResult:
    state: TrainState
    validation: list  # (step, val_mse)
    seconds: float


def train_loop(cfg: ExperimentConfig, scenes=None, val_scenes=None, variant: str | None = None,
               state: TrainState | None = None, progress=None) -> TrainResult:
    """Run ``cfg.train.steps`` steps; returns the final state and the validation curve."""
    cfg.check()
    if scenes is not None and len(scenes) == 0:
        raise ConfigError("training needs at least one scene")
    dtype = dtype_of(cfg.train.precision)
    mcfg = cfg.model_config(variant)
    t0 = time.perf_counter()
    with T.default_dtype(dtype):
        preps = _prepare(scenes if scenes is not None else training_scenes(cfg), mcfg, dtype)
        for p in preps:
            if p.latents.shape[0] < cfg.train.window:
                raise ConfigError(f"scene has {p.latents.shape[0]} frames, fewer than train.window {cfg.train.window}")
        validator = Validator(val_scenes if val_scenes is not None else validation_scenes(cfg), cfg, mcfg, dtype)
        state = state or init_state(cfg, variant)
        curve = [(state.step, validator(state.params))]
        for _ in range(cfg.train.steps):
            row = train_step(state, preps, cfg, mcfg, dtype)
            if state.step % cfg.train.val_every == 0 or state.step == cfg.train.steps:
                curve.append((state.step, validator(state.params)))
                log.info("step %d loss %.4f val %.4f", state.step, row["loss"], curve[-1][1])
            if progress is not None:
                progress(row)
    if curve[-1][0] != state.step:
        curve.append((state.step, curve[-1][1]))
    return TrainResult(state, curve, time.perf_counter() - t0)


def write_metrics(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({"step": row["step"], "loss": repr(row["loss"]), "branch": row["branch"],
                        "q": repr(row["q"]), "t": repr(row["t"])})


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(directory, params: dict, step: int, extra: dict | None = None) -> Path:
    """One TNSR file per parameter plus ``manifest.json`` (names, shapes, step)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name])
        fname = f"{name}.tnsr"
        write_tensor(directory / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "file": fname})
    doc = {"step": step, "params": entries, **(extra or {})}
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    doc = json.loads(manifest.read_text())
    params = {}
    for e in doc["params"]:
        arr = read_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ConfigError(f"checkpoint {directory}: {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        params[e["name"]] = Tensor(arr, dtype=arr.dtype)
    return params, doc
