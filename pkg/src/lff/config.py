"""Experiment configuration: dataclasses, JSON loading, overrides, validation."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from lff.errors import ConfigError


@dataclass
class ModelConfig:
    channels: int = 3
    height: int = 16
    width: int = 16
    patch: int = 2
    dim: int = 64
    blocks: int = 4
    heads: int = 4
    ffn_mult: int = 2
    text_tokens: int = 4
    freq_dim: int = 32
    audio_dim: int = 4
    context_k: int = 2
    adapter_blocks: int = 2
    audio_radius: int | None = 1
    eps: float = 1e-6
    activation: str = "gelu"
    # ablation switches
    adapter: str = "on"  # "on" or "off" (raw audio projected straight into the DiT)
    modulation: str = "timestep"  # "timestep", "off" or "random"
    adapter_cattn: bool = True

    @property
    def audio_width(self) -> int:
        return (2 * self.context_k + 1) * self.audio_dim

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def patch_width(self) -> int:
        return (2 * self.channels + 1) * self.patch * self.patch

    def validate(self) -> list[str]:
        errs = []
        for name in ("channels", "height", "width", "patch", "dim", "blocks", "heads", "ffn_mult",
                     "text_tokens", "freq_dim", "audio_dim", "adapter_blocks"):
            if getattr(self, name) < 1:
                errs.append(f"model.{name}: must be >= 1, got {getattr(self, name)}")
        if self.context_k < 0:
            errs.append(f"model.context_k: must be >= 0, got {self.context_k}")
        if self.patch >= 1 and (self.height % self.patch or self.width % self.patch):
            errs.append(f"model.patch: {self.patch} must divide height {self.height} and width {self.width}")
        if self.heads >= 1 and self.dim % self.heads:
            errs.append(f"model.heads: {self.heads} must divide dim {self.dim}")
        if self.audio_radius is not None and self.audio_radius < 0:
            errs.append(f"model.audio_radius: must be >= 0 or null, got {self.audio_radius}")
        if self.eps <= 0:
            errs.append(f"model.eps: must be > 0, got {self.eps}")
        if self.adapter not in ("on", "off"):
            errs.append(f"model.adapter: expected 'on' or 'off', got {self.adapter!r}")
        if self.modulation not in ("timestep", "off", "random"):
            errs.append(f"model.modulation: expected timestep/off/random, got {self.modulation!r}")
        if self.activation not in ("gelu", "identity"):
            errs.append(f"model.activation: expected gelu/identity, got {self.activation!r}")
        return errs


@dataclass
class DataConfig:
    scenes: int = 4  # training scenes
    frames: int = 64  # frames per training scene
    val_scenes: int = 1

    def validate(self) -> list[str]:
        errs = []
        if self.scenes < 1:
            errs.append(f"data.scenes: must be >= 1, got {self.scenes}")
        if self.frames < 2:
            errs.append(f"data.frames: must be >= 2, got {self.frames}")
        if self.val_scenes < 1:
            errs.append(f"data.val_scenes: must be >= 1, got {self.val_scenes}")
        return errs


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    adapter_lr_scale: float = 0.1  # multiplies lr for the adapter network
    p_drop: float = 0.1
    window: int = 16  # latent frames per training crop
    precision: str = "float32"
    val_every: int = 500
    val_samples: int = 8
    divergence: float = 1e6

    def validate(self) -> list[str]:
        errs = []
        if self.steps < 0:
            errs.append(f"train.steps: must be >= 0, got {self.steps}")
        if self.lr < 0:
            errs.append(f"train.lr: must be >= 0, got {self.lr}")
        if self.adapter_lr_scale < 0:
            errs.append(f"train.adapter_lr_scale: must be >= 0, got {self.adapter_lr_scale}")
        if not 0 <= self.p_drop <= 0.5:
            errs.append(f"train.p_drop: must lie in [0, 0.5], got {self.p_drop}")
        if self.window < 1:
            errs.append(f"train.window: must be >= 1, got {self.window}")
        if self.precision not in ("float32", "float64"):
            errs.append(f"train.precision: expected float32 or float64, got {self.precision!r}")
        if self.val_every < 1:
            errs.append(f"train.val_every: must be >= 1, got {self.val_every}")
        if self.val_samples < 1:
            errs.append(f"train.val_samples: must be >= 1, got {self.val_samples}")
        return errs


@dataclass
class GuidanceSection:
    mode: str = "native"
    alpha: float = 4.5
    beta: float = 3.0
    cfg_scale: float = 4.5


@dataclass
class WindowConfig:
    total: int = 256  # L, latent frames per rollout
    length: int = 16  # l
    overlap: int = 4  # m
    scheme: str = "logarithmic"
    strategy: str = "dwsw"  # dwsw, plain_window or motion_frame
    skip_fusion_at_T: bool = True
    shared_buffer: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.total < 1:
            errs.append(f"window.total: must be >= 1, got {self.total}")
        if self.overlap < 2:
            errs.append(f"window.overlap: must be >= 2, got {self.overlap}")
        if self.overlap >= self.length:
            errs.append(f"window.overlap: {self.overlap} must be smaller than window.length {self.length}")
        if self.scheme not in ("logarithmic", "fixed", "uniform", "hard"):
            errs.append(f"window.scheme: expected logarithmic/fixed/uniform/hard, got {self.scheme!r}")
        if self.strategy not in ("dwsw", "plain_window", "motion_frame"):
            errs.append(f"window.strategy: expected dwsw/plain_window/motion_frame, got {self.strategy!r}")
        return errs


@dataclass
class SamplerConfig:
    steps: int = 50
    precision: str = "float32"

    def validate(self) -> list[str]:
        errs = []
        if self.steps < 1:
            errs.append(f"sampler.steps: must be >= 1, got {self.steps}")
        if self.precision not in ("float32", "float64"):
            errs.append(f"sampler.precision: expected float32 or float64, got {self.precision!r}")
        return errs


@dataclass
class MetricsConfig:
    clip_len: int | None = None  # defaults to window.length
    buckets: list = field(default_factory=list)  # optional [start, end) frame ranges

    def validate(self) -> list[str]:
        errs = []
        if self.clip_len is not None and self.clip_len < 1:
            errs.append(f"metrics.clip_len: must be >= 1 or null, got {self.clip_len}")
        for b in self.buckets:
            if not (isinstance(b, (list, tuple)) and len(b) == 2 and 0 <= b[0] < b[1]):
                errs.append(f"metrics.buckets: each bucket must be [start, end) with start < end, got {b!r}")
        return errs


VARIANTS = ("full", "adapter_off", "modulation_off", "modulation_random", "cattn_off")


@dataclass
class AblationConfig:
    variants: list = field(default_factory=lambda: ["full", "adapter_off"])
    guidance: list = field(default_factory=lambda: ["native", "cfg", "off"])
    schemes: list = field(default_factory=lambda: ["logarithmic"])
    strategies: list = field(default_factory=lambda: ["dwsw"])
    seeds: list = field(default_factory=lambda: [0])
    checkpoints: dict = field(default_factory=dict)  # variant -> checkpoint directory

    def validate(self) -> list[str]:
        errs = []
        for v in self.variants:
            if v not in VARIANTS:
                errs.append(f"ablation.variants: unknown variant {v!r}; expected one of {VARIANTS}")
        for g in self.guidance:
            if g not in ("native", "cfg", "off"):
                errs.append(f"ablation.guidance: unknown mode {g!r}")
        for s in self.schemes:
            if s not in ("logarithmic", "fixed", "uniform", "hard"):
                errs.append(f"ablation.schemes: unknown scheme {s!r}")
        for s in self.strategies:
            if s not in ("dwsw", "plain_window", "motion_frame"):
                errs.append(f"ablation.strategies: unknown strategy {s!r}")
        if not self.seeds:
            errs.append("ablation.seeds: need at least one seed")
        return errs


def variant_model(base: ModelConfig, variant: str) -> ModelConfig:
    """Model config for an ablation variant."""
    changes = {
        "full": {},
        "adapter_off": {"adapter": "off"},
        "modulation_off": {"modulation": "off"},
        "modulation_random": {"modulation": "random"},
        "cattn_off": {"adapter_cattn": False},
    }
    if variant not in changes:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return dataclasses.replace(base, **changes[variant])


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "guidance": GuidanceSection,
    "window": WindowConfig,
    "sampler": SamplerConfig,
    "metrics": MetricsConfig,
    "ablation": AblationConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    window: WindowConfig = field(default_factory=WindowConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def clip_len(self) -> int:
        return self.metrics.clip_len or self.window.length

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return variant_model(self.model, variant or self.variant)

    def validate(self) -> list[str]:
        from lff.guidance import GuidanceConfig

        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant: unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in _SECTIONS:
            sec = getattr(self, name)
            if name == "guidance":
                errs += GuidanceConfig(**asdict(sec)).validate()
            else:
                errs += sec.validate()
        if self.train.window > self.data.frames:
            errs.append(f"train.window: {self.train.window} exceeds data.frames {self.data.frames}")
        if self.model.context_k >= self.train.window:
            errs.append(f"model.context_k: {self.model.context_k} must be < train.window {self.train.window}")
        return errs

    def check(self) -> "ExperimentConfig":
        errs = self.validate()
        if errs:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = raw.pop(name, {}) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected an object, got {type(section).__name__}")
            known = {f.name for f in fields(typ)}
            unknown = sorted(set(section) - known)
            if unknown:
                raise ConfigError(f"{name}: unknown keys {unknown}")
            kwargs[name] = typ(**section)
        for key in list(raw):
            if key not in ("seed", "variant"):
                raise ConfigError(f"unknown top-level key {key!r}")
        return cls(**raw, **kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _coerce(text: str, current):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, (list, dict)) or current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    try:
        return type(current)(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(current).__name__}") from exc


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``section.key=value`` (or ``seed=value``) in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise ConfigError(f"override {key!r}: no config section {part!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    spec = {f.name: f for f in fields(target)}.get(leaf)
    if spec is None:
        raise ConfigError(f"override {key!r}: unknown field {leaf!r}")
    if text.strip().lower() == "null" and "None" in str(spec.type):
        setattr(target, leaf, None)
        return cfg
    try:
        setattr(target, leaf, _coerce(text, getattr(target, leaf)))
    except ConfigError as exc:
        raise ConfigError(f"override {key!r}: {exc}") from exc
    return cfg


def resolve(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Defaults ← JSON file ← overrides ← ``LFF_SEED``."""
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    for o in overrides:
        apply_override(cfg, o)
    env = os.environ if env is None else env
    if env.get("LFF_SEED"):
        try:
            cfg.seed = int(env["LFF_SEED"])
        except ValueError as exc:
            raise ConfigError(f"LFF_SEED must be an integer, got {env['LFF_SEED']!r}") from exc
    return cfg
