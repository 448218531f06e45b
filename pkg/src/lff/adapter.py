"""Audio context windows, timestep embeddings and the timestep-aware audio adapter.

The adapter turns per-frame audio context vectors into refined audio tokens
that depend on the diffusion timestep (through affine modulations driven by
the projected timestep embedding ``e0``) and on the current noisy latents
(through cross-attention onto the latent tokens).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lff import tensor as T
from lff.config import ModelConfig
from lff.errors import ConfigError, DimensionError
from lff.layers import (attention, dense, init_attention, init_layer_norm, init_linear, init_mlp,
                        locality_mask, modulate, norm, prefixed, scope, sinusoidal)
from lff.tensor import Rng, Tensor


@dataclass
class ContextualAudio:
    values: np.ndarray  # F × (2k+1)·d
    k: int
    d: int

    def __post_init__(self):
        if self.values.shape[1] != (2 * self.k + 1) * self.d:
            raise DimensionError(
                f"context width {self.values.shape[1]} != (2k+1)·d = {(2 * self.k + 1) * self.d}"
            )

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    def window(self, start: int, end: int) -> "ContextualAudio":
        return ContextualAudio(self.values[start:end], self.k, self.d)


@dataclass
class TimestepEmbeds:
    e: Tensor  # 1 × D
    e0: Tensor  # 6 × D


def build_audio_context(a, k: int) -> ContextualAudio:
    """Row ``i`` concatenates ``a[i-k] … a[i+k]``; edges repeat the first/last row."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise DimensionError(f"audio features must be F×d with F >= 1, got shape {a.shape}")
    f = a.shape[0]
    if k < 0:
        raise ConfigError(f"context radius k must be >= 0, got {k}")
    if k >= f:
        raise ConfigError(f"context radius k={k} needs more than {f} frames")
    idx = np.clip(np.arange(f)[:, None] + np.arange(-k, k + 1)[None, :], 0, f - 1)
    return ContextualAudio(a[idx].reshape(f, -1), k, a.shape[1])


def init_time_params(cfg: ModelConfig, rng: Rng) -> dict:
    p = prefixed("mlp", init_mlp(rng, cfg.freq_dim, cfg.dim, cfg.dim))
    p.update(prefixed("proj", init_linear(rng, cfg.dim, 6 * cfg.dim, scale=0.5)))
    return prefixed("time", p)


def timestep_embed(t: float, params: dict, cfg: ModelConfig) -> TimestepEmbeds:
    """Sinusoidal features of ``t`` → two-layer MLP → ``e``; GELU + linear → ``e0``."""
    feats = Tensor(sinusoidal(1000.0 * float(t), cfg.freq_dim))
    p = scope(params, "time")
    e = T.mlp(feats, scope(p, "mlp"), cfg.activation)
    act = T.gelu(e) if cfg.activation == "gelu" else e
    e0 = dense(act, scope(p, "proj")).reshape(6, cfg.dim)
    return TimestepEmbeds(e=e, e0=e0)


def repeat_shift(e: Tensor, r: Tensor) -> Tensor:
    """Stack ``e`` twice along rows and add the learnable shift ``r`` (2×D)."""
    if e.ndim != 2 or e.shape[0] != 1 or r.shape != (2, e.shape[1]):
        raise DimensionError(f"repeat_shift: expected e 1×D and r 2×D, got {e.shape} and {r.shape}")
    return T.concat([e, e], axis=0) + r


def init_adapter_params(cfg: ModelConfig, rng: Rng) -> dict:
    d = cfg.dim
    p = {}
    for b in range(cfg.adapter_blocks):
        din = cfg.audio_width if b == 0 else d
        blk = {}
        blk.update(prefixed("mlp_in", init_mlp(rng, din, d, d)))
        blk.update(prefixed("ln_lambda", init_layer_norm(d)))
        blk.update(prefixed("ln_gamma", init_layer_norm(d)))
        blk.update(prefixed("cattn", init_attention(rng, d, d, d)))
        blk.update(prefixed("ln_prime", init_layer_norm(d)))
        blk.update(prefixed("mlp_eta", init_mlp(rng, d, cfg.ffn_mult * d, d)))
        p.update(prefixed(f"block{b}", blk))
    p.update(prefixed("mlp_out", init_mlp(rng, d, d, d)))
    p["r"] = Tensor(np.zeros((2, d)))
    p["null_audio"] = Tensor(rng.normal((cfg.audio_width,)))
    p["rand_e"] = Tensor(rng.normal((1, d)) * 0.5)
    p["rand_e0"] = Tensor(rng.normal((6, d)) * 0.5)
    p.update(prefixed("raw", init_linear(rng, cfg.audio_width, d)))
    return prefixed("adapter", p)


def _modulation(te: TimestepEmbeds, params: dict, cfg: ModelConfig):
    """(e, e0) as seen by the adapter under the configured modulation variant."""
    if cfg.modulation == "timestep":
        return te.e, te.e0
    if cfg.modulation == "random":
        return params["rand_e"], params["rand_e0"]
    return None, None


def adapter_forward(emb_aud: Tensor, te: TimestepEmbeds, z_tokens: Tensor, params: dict,
                    cfg: ModelConfig, token_frames: np.ndarray | None = None) -> Tensor:
    """Refined audio tokens (F×D) from audio context (F×W), timestep and latent tokens.

    Each block computes, with ``e0[i]`` broadcast over tokens::

        lam   = LN(MLP(h))
        gam   = e0[2] * (lam * (1 + e0[1]) + e0[0]) + lam
        prime = CAttn(LN(gam), z) + LN(gam)
        eta   = MLP(LN(prime) * (1 + e0[4]) + e0[3])
        h     = prime + e0[5] * eta

    and the output is ``MLP(h * (1 + ē[1]) + ē[0])`` with ``ē = repeat_shift(e, r)``.
    ``params`` is the ``adapter.*`` scope. ``token_frames`` gives the frame of
    each latent token; with ``cfg.audio_radius`` set, audio token ``i`` only
    attends to latent tokens within that many frames.
    """
    if z_tokens.shape[-1] != cfg.dim:
        raise DimensionError(f"adapter: latent tokens have width {z_tokens.shape[-1]}, expected {cfg.dim}")
    if emb_aud.shape[-1] != cfg.audio_width:
        raise DimensionError(f"adapter: audio context has width {emb_aud.shape[-1]}, expected {cfg.audio_width}")
    e, e0 = _modulation(te, params, cfg)
    mask = None
    if token_frames is not None:
        mask = locality_mask(np.arange(emb_aud.shape[0]), token_frames, cfg.audio_radius)
        if mask is not None and not mask.any(axis=1).all():
            mask = None
    h = emb_aud
    for b in range(cfg.adapter_blocks):
        p = scope(params, f"block{b}")
        lam = norm(T.mlp(h, scope(p, "mlp_in"), cfg.activation), scope(p, "ln_lambda"), cfg.eps)
        gam = lam if e0 is None else e0[2] * modulate(lam, e0[1], e0[0]) + lam
        ngam = norm(gam, scope(p, "ln_gamma"), cfg.eps)
        if cfg.adapter_cattn:
            prime = attention(ngam, z_tokens, scope(p, "cattn"), 1, mask) + ngam
        else:
            prime = ngam
        if e0 is None:
            h = prime  # zero gate removes the eta branch
        else:
            nprime = norm(prime, scope(p, "ln_prime"), cfg.eps)
            eta = T.mlp(modulate(nprime, e0[4], e0[3]), scope(p, "mlp_eta"), cfg.activation)
            h = prime + e0[5] * eta
    if e is None:
        return T.mlp(h, scope(params, "mlp_out"), cfg.activation)
    ebar = repeat_shift(e, params["r"])
    return T.mlp(modulate(h, ebar[1], ebar[0]), scope(params, "mlp_out"), cfg.activation)


def null_context(params: dict, frames: int) -> Tensor:
    """The learned null-audio vector broadcast to ``frames`` rows."""
    null = params["null_audio"]
    return T.Tensor(np.zeros((frames, 1), dtype=null.dtype)) + null


def raw_audio_tokens(emb_aud: Tensor, params: dict) -> Tensor:
    """Adapter-off ablation: audio context projected linearly to the model width."""
    return dense(emb_aud, scope(params, "raw"))
