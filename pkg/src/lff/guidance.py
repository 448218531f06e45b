"""Audio native guidance and the classifier-free guidance baseline.

Three denoiser branches enter the native rule::

    d = (1 + alpha + beta) * d_full - alpha * d_no_audio - beta * d_no_refined

``d_no_audio`` runs the adapter on the learned null-audio vector, and
``d_no_refined`` drops the audio cross-attention term from every block
while keeping the image term. Coefficients always sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lff.errors import ConfigError, DimensionError

MODES = ("native", "cfg", "off")


@dataclass
class GuidanceConfig:
    mode: str = "native"
    alpha: float = 4.5
    beta: float = 3.0
    cfg_scale: float = 4.5

    def validate(self) -> list[str]:
        errs = []
        if self.mode not in MODES:
            errs.append(f"guidance.mode: expected one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            errs.append(f"guidance.alpha: must be >= 0, got {self.alpha}")
        if self.beta < 0:
            errs.append(f"guidance.beta: must be >= 0, got {self.beta}")
        if self.cfg_scale < 0:
            errs.append(f"guidance.cfg_scale: must be >= 0, got {self.cfg_scale}")
        return errs

    @property
    def branches(self) -> tuple[str, ...]:
        """Audio modes the denoiser must evaluate for this setting."""
        if self.mode == "native":
            return ("full", "null", "none")
        if self.mode == "cfg":
            return ("full", "null")
        return ("full",)


@dataclass
class BranchSet:
    d_full: np.ndarray
    d_no_audio: np.ndarray
    d_no_refined: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.d_full), np.shape(self.d_no_audio), np.shape(self.d_no_refined)}
        if len(shapes) != 1:
            raise DimensionError(
                f"branch shapes differ: full {np.shape(self.d_full)}, no_audio {np.shape(self.d_no_audio)}, "
                f"no_refined {np.shape(self.d_no_refined)}"
            )


def guidance_combine(branches: BranchSet, cfg: GuidanceConfig):
    if cfg.mode != "native":
        raise ConfigError(f"guidance_combine needs mode 'native', got {cfg.mode!r}")
    a, b = cfg.alpha, cfg.beta
    return (1.0 + a + b) * branches.d_full - a * branches.d_no_audio - b * branches.d_no_refined


def cfg_combine(d_cond, d_uncond, scale: float):
    if np.shape(d_cond) != np.shape(d_uncond):
        raise DimensionError(f"cfg: conditional shape {np.shape(d_cond)} != unconditional {np.shape(d_uncond)}")
    return d_uncond + scale * (d_cond - d_uncond)


def evaluate_branches(model, z_t, pack, t: float) -> BranchSet:
    v = model.branches(z_t, pack, t, ("full", "null", "none"))
    return BranchSet(v["full"], v["null"], v["none"])


def guided_velocity(model, z_t, pack, t: float, cfg: GuidanceConfig) -> np.ndarray:
    """One guided velocity estimate, evaluating only the branches the mode needs."""
    v = model.branches(z_t, pack, t, cfg.branches)
    if cfg.mode == "native":
        return guidance_combine(BranchSet(v["full"], v["null"], v["none"]), cfg)
    if cfg.mode == "cfg":
        return cfg_combine(v["full"], v["null"], cfg.cfg_scale)
    return v["full"]
