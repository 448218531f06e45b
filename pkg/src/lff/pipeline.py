"""Long rollouts, drift reports and the ablation grid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lff import tensor as T
from lff.adapter import build_audio_context
from lff.config import ExperimentConfig
from lff.data import SyntheticScene, generate_scene
from lff.dit import Model, assemble_conditioning
from lff.errors import ConfigError
from lff.guidance import GuidanceConfig
from lff.metrics import DriftReport, drift_report
from lff.tensor import Rng, Tensor
from lff.train import dtype_of, load_checkpoint
from lff.windowing import ModelDenoiser, baseline_sample, dwsw_sample, make_plan, stub_weighting_ablation

_KEY_EVAL = 21


def eval_scene(cfg: ExperimentConfig, seed: int, frames: int | None = None) -> SyntheticScene:
    """Held-out scene for rollout ``seed``; shared by every variant and guidance mode."""
    m = cfg.model
    rng = Rng(cfg.seed).spawn(_KEY_EVAL).spawn(seed)
    return generate_scene(rng, frames or cfg.window.total, m.height, m.width, m.audio_dim, m.channels)


def load_model(directory, cfg: ExperimentConfig, variant: str | None = None) -> Model:
    params, doc = load_checkpoint(directory)
    mcfg = cfg.model_config(variant or doc.get("variant") or cfg.variant)
    return Model(params, mcfg)


def _cast_model(model: Model, dtype) -> Model:
    return Model({k: Tensor(v.data, dtype=dtype) for k, v in model.params.items()}, model.cfg)


@dataclass
class Rollout:
    latents: np.ndarray
    scene: SyntheticScene
    report: DriftReport


def rollout(model: Model, cfg: ExperimentConfig, seed: int, guidance: str | None = None,
            scheme: str | None = None, strategy: str | None = None, steps: int | None = None) -> Rollout:
    """Generate ``window.total`` latent frames for evaluation scene ``seed`` and measure drift."""
    w = cfg.window
    guidance = guidance or cfg.guidance.mode
    scheme = scheme or w.scheme
    strategy = strategy or w.strategy
    steps = steps or cfg.sampler.steps
    dtype = dtype_of(cfg.sampler.precision)
    with T.default_dtype(dtype):
        m = _cast_model(model, dtype)
        scene = eval_scene(cfg, seed)
        L = scene.video.shape[0]
        ctx = build_audio_context(scene.audio, min(m.cfg.context_k, L - 1))
        if ctx.k != m.cfg.context_k:
            raise ConfigError(f"window.total={L} is too short for model.context_k={m.cfg.context_k}")
        pack = assemble_conditioning(scene.reference_frame, ctx, L, m.cfg)
        plan = make_plan(L, w.length, w.overlap)
        gcfg = GuidanceConfig(guidance, cfg.guidance.alpha, cfg.guidance.beta, cfg.guidance.cfg_scale)
        den = ModelDenoiser(m, pack, gcfg)
        noise_rng = Rng(cfg.seed).spawn(_KEY_EVAL + 1).spawn(seed)
        z_T = noise_rng.normal((L, m.cfg.channels, m.cfg.height, m.cfg.width), dtype)
        if strategy == "dwsw":
            z0 = dwsw_sample(den, z_T, plan, steps, scheme, w.skip_fusion_at_T, w.shared_buffer)
        else:
            z0 = baseline_sample(strategy, den, z_T, plan, steps)
    clip_len = min(cfg.clip_len, L)
    if L // clip_len >= 2:
        report = drift_report(z0, scene.amplitude, scene.lip_mask, clip_len)
    else:
        report = drift_report(z0, scene.amplitude, scene.lip_mask, max(L // 2, 1))
    return Rollout(z0, scene, report)


# -- ablation grid -------------------------------------------------------

GRID_FIELDS = ("variant", "guidance", "scheme", "strategy", "seeds", "final_mean_shift", "final_std_shift",
               "final_ciede", "sync_r")


def checkpoint_dirs(cfg: ExperimentConfig, root=None) -> dict:
    """Checkpoint directory per configured variant; missing ones raise naming the variant."""
    out = {}
    for v in cfg.ablation.variants:
        path = cfg.ablation.checkpoints.get(v)
        if path is None and root is not None:
            path = Path(root) / v
        if path is None or not (Path(path) / "manifest.json").exists():
            raise FileNotFoundError(f"no checkpoint for variant {v!r} (looked in {path})")
        out[v] = Path(path)
    return out


def ablation_grid(cfg: ExperimentConfig, checkpoints: dict, progress=None) -> list[dict]:
    """One row per (variant, guidance, scheme, strategy) cell, averaged over ``ablation.seeds``."""
    a = cfg.ablation
    rows = []
    for variant in a.variants:
        if variant not in checkpoints:
            raise FileNotFoundError(f"no checkpoint for variant {variant!r}")
        model = load_model(checkpoints[variant], cfg, variant)
        for guidance in a.guidance:
            for scheme in a.schemes:
                for strategy in a.strategies:
                    finals = []
                    for seed in a.seeds:
                        r = rollout(model, cfg, seed, guidance, scheme, strategy)
                        f = r.report.final
                        finals.append((f.mean_shift, f.std_shift, f.ciede,
                                       float(np.mean([c.sync_r for c in r.report.records]))))
                        if progress is not None:
                            progress(variant, guidance, scheme, strategy, seed)
                    mean = np.mean(finals, axis=0)
                    rows.append({"variant": variant, "guidance": guidance, "scheme": scheme, "strategy": strategy,
                                 "seeds": len(a.seeds), "final_mean_shift": float(mean[0]),
                                 "final_std_shift": float(mean[1]), "final_ciede": float(mean[2]),
                                 "sync_r": float(mean[3])})
    return rows


def rows_to_csv(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def weighting_rows(cfg: ExperimentConfig) -> list[dict]:
    """Seam discontinuity of the three fusion weightings on the stub task."""
    w = cfg.window
    L = max(w.total, 2 * w.length)
    res = stub_weighting_ablation(L, w.length, w.overlap, cfg.sampler.steps, ("logarithmic", "fixed", "uniform"),
                                  cfg.seed)
    return [{"scheme": k, "seam_discontinuity": v} for k, v in res.items()]
