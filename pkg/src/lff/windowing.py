"""Long-sequence sampling: Euler steps driven through overlapping windows.

Each denoising step walks the window schedule left to right. Every window
is advanced one Euler step, then its first ``m`` frames are blended with
the previous window's output for the same frames using a weight curve
(logarithmic by default). Blending is skipped for the first window of a
step and for every window at the first step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lff.errors import ConfigError, DimensionError, DomainError
from lff.guidance import GuidanceConfig, guided_velocity

SCHEMES = ("logarithmic", "fixed", "uniform", "hard")


@dataclass(frozen=True)
class WeightCurve:
    w: np.ndarray
    scheme: str


@dataclass(frozen=True)
class WindowPlan:
    L: int
    l: int
    m: int
    schedule: tuple


def log_weights(m: int) -> np.ndarray:
    """Min-max normalised ``log1p(u * (e - 1))`` on ``m`` evenly spaced ``u`` in [0, 1]."""
    if m < 2:
        raise ConfigError(f"overlap m must be >= 2 for the weight curve, got {m}")
    w = np.linspace(0.0, 1.0, m)
    w = np.log1p(w * (np.exp(1) - 1))
    return (w - w.min()) / (w.max() - w.min())


def weight_curve(m: int, scheme: str = "logarithmic") -> WeightCurve:
    if scheme == "logarithmic":
        w = log_weights(m)
    elif m < 2:
        raise ConfigError(f"overlap m must be >= 2, got {m}")
    elif scheme == "fixed":
        w = np.full(m, 0.5)
    elif scheme == "uniform":
        w = np.linspace(0.0, 1.0, m)
    elif scheme == "hard":
        w = np.ones(m)
    else:
        raise ConfigError(f"unknown weight scheme {scheme!r}; expected one of {SCHEMES}")
    return WeightCurve(w, scheme)


def make_plan(L: int, l: int, m: int) -> WindowPlan:
    """Window (start, end) pairs: stride ``l - m``, last window clipped to end at ``L``."""
    if L < 1:
        raise ConfigError(f"window plan: L must be >= 1, got {L}")
    if l < 1:
        raise ConfigError(f"window plan: window length l must be >= 1, got {l}")
    if m < 2:
        raise ConfigError(f"window plan: overlap m must be >= 2, got {m}")
    if m >= l:
        raise ConfigError(f"window plan: overlap m={m} must be smaller than window length l={l}")
    if l >= L:
        return WindowPlan(L, l, m, ((0, L),))
    sched = []
    s, e = 0, l
    while e <= L:
        sched.append((s, e))
        if e < L:
            s = s + (l - m)
            e = min(s + l, L)
        else:
            break
    return WindowPlan(L, l, m, tuple(sched))


def timestep_grid(steps: int) -> np.ndarray:
    """``steps + 1`` uniform times from 1 down to 0."""
    if steps < 1:
        raise ConfigError(f"sampler.steps must be >= 1, got {steps}")
    return np.linspace(1.0, 0.0, steps + 1)


def euler_step(z_t, v_hat, t: float, t_next: float):
    if not t_next < t:
        raise DomainError(f"euler_step needs t_next < t, got t={t}, t_next={t_next}")
    return z_t - (t - t_next) * v_hat


@dataclass
class StepLog:
    """What the sampler did, in order; filled when passed to a sampler."""

    calls: list = field(default_factory=list)  # (step index, s, e)
    fusions: list = field(default_factory=list)  # (step index, s, e)


def _blend(new, prev, w):
    wb = w.reshape((-1,) + (1,) * (new.ndim - 1))
    return wb * new + (1.0 - wb) * prev


def dwsw_sample(denoiser, z_T, plan: WindowPlan, steps: int, scheme: str = "logarithmic",
                skip_fusion_at_T: bool = True, shared_buffer: bool = False,
                log: StepLog | None = None) -> np.ndarray:
    """Denoise ``z_T`` (L×…) to ``t = 0`` with weighted sliding windows.

    ``denoiser(z_window, s, e, t, t_next)`` returns the window advanced to
    ``t_next``. By default every window of a step reads the latents from the
    start of that step; with ``shared_buffer`` it reads the buffer being
    written, so overlap frames arrive already advanced by the previous window.
    """
    z_T = np.asarray(z_T)
    if z_T.shape[0] != plan.L:
        raise ConfigError(f"latent length {z_T.shape[0]} does not match plan length L={plan.L}")
    grid = timestep_grid(steps)
    curve = weight_curve(plan.m, scheme).w if len(plan.schedule) > 1 else None
    z = z_T.copy()
    for k in range(steps):
        t, t_next = float(grid[k]), float(grid[k + 1])
        src = z
        out = z.copy()
        prev_win, prev_e = None, None
        for s, e in plan.schedule:
            read = out if shared_buffer else src
            win = np.array(denoiser(read[s:e], s, e, t, t_next), copy=True)
            if win.shape != read[s:e].shape:
                raise DimensionError(f"denoiser returned shape {win.shape} for window ({s}, {e})")
            if log is not None:
                log.calls.append((k, s, e))
            if s != 0 and not (skip_fusion_at_T and k == 0):
                m = plan.m
                old = prev_win[prev_e - m - prev_s:prev_e - prev_s]
                win[:m] = _blend(win[:m], old, curve)
                if log is not None:
                    log.fusions.append((k, s, e))
            out[s:e] = win
            prev_win, prev_s, prev_e = win, s, e
        z = out
    return z


def plain_window_sample(denoiser, z_T, plan: WindowPlan, steps: int, **kw) -> np.ndarray:
    """Sliding windows where the newer window simply overwrites the overlap."""
    return dwsw_sample(denoiser, z_T, plan, steps, scheme="hard", **kw)


def motion_frame_sample(denoiser, z_T, plan: WindowPlan, steps: int,
                        log: StepLog | None = None) -> np.ndarray:
    """Clip-by-clip generation; each clip sees the previous clip's last ``m`` frames.

    ``denoiser(z_window, s, e, t, t_next, motion=frames)`` receives the
    motion frames (None for the first clip). Overlap frames keep the values
    already generated.
    """
    z_T = np.asarray(z_T)
    if z_T.shape[0] != plan.L:
        raise ConfigError(f"latent length {z_T.shape[0]} does not match plan length L={plan.L}")
    grid = timestep_grid(steps)
    out = z_T.copy()
    motion = None
    for i, (s, e) in enumerate(plan.schedule):
        win = z_T[s:e].copy()
        for k in range(steps):
            win = np.asarray(denoiser(win, s, e, float(grid[k]), float(grid[k + 1]), motion=motion))
            if log is not None:
                log.calls.append((k, s, e))
        keep = 0 if i == 0 else min(plan.m, e - s)
        out[s + keep:e] = win[keep:]
        motion = out[max(e - plan.m, 0):e].copy()
    return out


def baseline_sample(strategy: str, denoiser, z_T, plan: WindowPlan, steps: int, **kw) -> np.ndarray:
    if strategy == "motion_frame":
        return motion_frame_sample(denoiser, z_T, plan, steps, **kw)
    if strategy == "plain_window":
        return plain_window_sample(denoiser, z_T, plan, steps, **kw)
    raise ConfigError(f"unknown baseline strategy {strategy!r}; expected motion_frame or plain_window")


class ModelDenoiser:
    """Guided Euler step of a trained model over one window of a conditioning pack."""

    def __init__(self, model, pack, guidance: GuidanceConfig | None = None):
        self.model = model
        self.pack = pack
        self.guidance = guidance or GuidanceConfig(mode="off")

    def __call__(self, z_win, s, e, t, t_next, motion=None):
        pack = self.pack.window(s, e)
        if motion is not None:
            pack = pack.with_motion_frames(motion)
        v = guided_velocity(self.model, z_win, pack, t, self.guidance)
        return euler_step(z_win, v, t, t_next)


# -- stub task ----------------------------------------------------------


def stub_targets(plan: WindowPlan, frame_shape=(1,), offset: float = 1.0) -> list:
    """Per-window clean targets: a shared slow ramp plus ``offset`` times the window index.

    Neighbouring windows disagree about the overlap by ``offset``, which is
    what the fusion weights have to smooth over.
    """
    ramp = np.linspace(0.0, 1.0, plan.L)
    out = []
    for i, (s, e) in enumerate(plan.schedule):
        vals = ramp[s:e] + offset * i
        out.append(np.broadcast_to(vals.reshape((-1,) + (1,) * len(frame_shape)), (e - s,) + tuple(frame_shape)).copy())
    return out


class StubDenoiser:
    """Exact rectified-flow step toward a fixed per-window target."""

    def __init__(self, plan: WindowPlan, targets: list):
        self.index = {se: i for i, se in enumerate(plan.schedule)}
        self.targets = targets

    def __call__(self, z_win, s, e, t, t_next, motion=None):
        x0 = self.targets[self.index[(s, e)]]
        v = (z_win - x0) / t
        return euler_step(z_win, v, t, t_next)


def seam_discontinuity(z, plan: WindowPlan) -> float:
    """Largest mean absolute frame-to-frame change over the fusion seams.

    A seam spans the frame before an overlap through the frame after it.
    """
    z = np.asarray(z)
    worst = 0.0
    for s, e in plan.schedule[1:]:
        lo, hi = max(s - 1, 0), min(s + plan.m, plan.L - 1)
        for i in range(lo, hi):
            worst = max(worst, float(np.mean(np.abs(z[i + 1] - z[i]))))
    return worst


def stub_weighting_ablation(L: int = 64, l: int = 16, m: int = 4, steps: int = 10,
                            schemes=("logarithmic", "fixed", "uniform"), seed: int = 0) -> dict:
    """Seam discontinuity of each weight scheme on the stub task."""
    plan = make_plan(L, l, m)
    den = StubDenoiser(plan, stub_targets(plan))
    z_T = np.random.default_rng(seed).standard_normal((L, 1))
    return {sc: seam_discontinuity(dwsw_sample(den, z_T, plan, steps, sc), plan) for sc in schemes}
