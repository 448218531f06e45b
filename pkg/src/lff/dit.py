"""Toy video diffusion transformer with reference, image and audio conditioning.

Input channels per frame are ``[noisy latent, reference latent, temporal mask]``.
The reference latent holds the reference frame at frame 0 and zeros
elsewhere; the mask is 1 on frame 0 and 0 on later frames. The reference
frame is also encoded into image tokens that every block cross-attends to,
alongside the refined audio tokens::

    z̄ = CAttn(z, ā) + CAttn(z, img)

Each block is: adaLN space-time self-attention → audio/image injection → text
cross-attention → adaLN feed-forward, with scale/shift/gate rows taken from
the projected timestep embedding plus a per-block learned offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lff import tensor as T
from lff.adapter import (ContextualAudio, TimestepEmbeds, adapter_forward, init_adapter_params,
                         init_time_params, null_context, raw_audio_tokens, timestep_embed)
from lff.config import ModelConfig
from lff.data import encode
from lff.errors import ConfigError, DimensionError, NumericError
from lff.layers import (attention, dense, init_attention, init_layer_norm, init_linear, init_mlp,
                        locality_mask, modulate, norm, prefixed, scope, sinusoidal)
from lff.tensor import Rng, Tensor

AUDIO_MODES = ("full", "null", "none")


@dataclass
class ConditioningPack:
    reference_latent: np.ndarray  # F×C×H×W
    temporal_mask: np.ndarray  # F×1×H×W
    reference_frame: np.ndarray  # C×H×W latent, feeds the image encoder
    audio: ContextualAudio

    @property
    def frames(self) -> int:
        return self.reference_latent.shape[0]

    def window(self, start: int, end: int) -> "ConditioningPack":
        """Conditioning for frames ``[start, end)``; the reference sits at the window's first frame."""
        n = end - start
        ref = np.zeros((n,) + self.reference_latent.shape[1:], dtype=self.reference_latent.dtype)
        ref[0] = self.reference_frame
        mask = np.zeros((n,) + self.temporal_mask.shape[1:], dtype=self.temporal_mask.dtype)
        mask[0] = 1.0
        return ConditioningPack(ref, mask, self.reference_frame, self.audio.window(start, end))

    def with_motion_frames(self, frames: np.ndarray) -> "ConditioningPack":
        """Copy whose reference pathway carries ``frames`` at the leading positions."""
        ref = np.zeros_like(self.reference_latent)
        mask = np.zeros_like(self.temporal_mask)
        n = frames.shape[0]
        ref[:n] = frames
        mask[:n] = 1.0
        return ConditioningPack(ref, mask, self.reference_frame, self.audio)


def assemble_conditioning(reference_frame: np.ndarray, audio: ContextualAudio, frames: int,
                          cfg: ModelConfig) -> ConditioningPack:
    """Reference latent and mask for ``frames`` frames; ``reference_frame`` is in pixels."""
    ref = encode(reference_frame)
    if ref.shape != (cfg.channels, cfg.height, cfg.width):
        raise ConfigError(
            f"reference frame shape {ref.shape} does not match model "
            f"({cfg.channels}, {cfg.height}, {cfg.width})"
        )
    if audio.frames != frames:
        raise ConfigError(f"audio has {audio.frames} frames, expected {frames}")
    if audio.values.shape[1] != cfg.audio_width:
        raise ConfigError(f"audio context width {audio.values.shape[1]} != model {cfg.audio_width}")
    dtype = T.get_default_dtype()
    ref_lat = np.zeros((frames, cfg.channels, cfg.height, cfg.width), dtype=dtype)
    ref_lat[0] = ref
    mask = np.zeros((frames, 1, cfg.height, cfg.width), dtype=dtype)
    mask[0] = 1.0
    return ConditioningPack(ref_lat, mask, ref.astype(dtype), audio)


# -- parameters ----------------------------------------------------------


def init_dit_params(cfg: ModelConfig, rng: Rng) -> dict:
    d = cfg.dim
    nh, nw = cfg.grid
    p = {}
    p.update(prefixed("patch", init_linear(rng, cfg.patch_width, d)))
    p["pos_spatial"] = Tensor(rng.normal((nh * nw, d)) * 0.1)
    p.update(prefixed("img", init_mlp(rng, cfg.channels * cfg.patch**2, d, d)))
    p["img_pos"] = Tensor(rng.normal((nh * nw, d)) * 0.1)
    p["text"] = Tensor(rng.normal((cfg.text_tokens, d)) * 0.5)
    for b in range(cfg.blocks):
        blk = {"mod": Tensor(np.zeros((6, d)))}
        blk.update(prefixed("spatial_attn", init_attention(rng, d, d, d)))
        blk.update(prefixed("temporal_attn", init_attention(rng, d, d, d)))
        blk.update(prefixed("ln_cross", init_layer_norm(d)))
        blk.update(prefixed("audio_attn", init_attention(rng, d, d, d, out_scale=0.5)))
        blk.update(prefixed("img_attn", init_attention(rng, d, d, d, out_scale=0.5)))
        blk.update(prefixed("ln_text", init_layer_norm(d)))
        blk.update(prefixed("text_attn", init_attention(rng, d, d, d, out_scale=0.5)))
        blk.update(prefixed("ffn", init_mlp(rng, d, cfg.ffn_mult * d, d)))
        p.update(prefixed(f"block{b}", blk))
    p["head_mod"] = Tensor(np.zeros((2, d)))
    p.update(prefixed("head", init_linear(rng, d, cfg.channels * cfg.patch**2, scale=0.1)))
    return prefixed("dit", p)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """All trainable parameters of the model, deterministically from ``seed``."""
    rng = Rng(seed)
    params = {}
    params.update(init_time_params(cfg, rng.spawn(1)))
    params.update(init_adapter_params(cfg, rng.spawn(2)))
    params.update(init_dit_params(cfg, rng.spawn(3)))
    return params


# -- token plumbing ------------------------------------------------------


def patchify(x: Tensor, patch: int) -> Tensor:
    """F×C×H×W → (F·H/p·W/p)×(C·p·p), frame-major then row-major patches."""
    f, c, h, w = x.shape
    nh, nw = h // patch, w // patch
    x = x.reshape(f, c, nh, patch, nw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(f * nh * nw, c * patch * patch)


def unpatchify(tokens: Tensor, frames: int, channels: int, height: int, width: int, patch: int) -> Tensor:
    nh, nw = height // patch, width // patch
    x = tokens.reshape(frames, nh, nw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(frames, channels, height, width)


def token_frames(frames: int, cfg: ModelConfig) -> np.ndarray:
    nh, nw = cfg.grid
    return np.repeat(np.arange(frames), nh * nw)


def embed_tokens(z_t, pack: ConditioningPack, params: dict, cfg: ModelConfig) -> Tensor:
    """Patch tokens of ``[z_t, reference, mask]`` plus frame and spatial positions."""
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    f = z.shape[0]
    if z.shape[1:] != (cfg.channels, cfg.height, cfg.width) or pack.frames != f:
        raise DimensionError(
            f"latent shape {z.shape} / pack frames {pack.frames} inconsistent with model config"
        )
    x = T.concat([z, Tensor(pack.reference_latent), Tensor(pack.temporal_mask)], axis=1)
    tokens = dense(patchify(x, cfg.patch), scope(params, "dit.patch"))
    nh, nw = cfg.grid
    pos_frame = np.repeat(sinusoidal(np.arange(f), cfg.dim, max_period=100.0), nh * nw, axis=0)
    spatial = params["dit.pos_spatial"]
    return tokens + Tensor(pos_frame) + T.concat([spatial] * f, axis=0)


def image_tokens(pack: ConditioningPack, params: dict, cfg: ModelConfig) -> Tensor:
    ref = Tensor(pack.reference_frame[None])
    patches = patchify(ref, cfg.patch)
    return T.mlp(patches, scope(params, "dit.img"), cfg.activation) + params["dit.img_pos"]


def refine_audio(pack: ConditioningPack, te: TimestepEmbeds, z_tokens: Tensor, params: dict,
                 cfg: ModelConfig, audio_mode: str = "full") -> Tensor | None:
    """Refined audio tokens for the requested branch, or None when the term is dropped.

    ``full`` uses the real audio context, ``null`` swaps in the learned null
    vector before the adapter, ``none`` removes the audio injection entirely.
    """
    if audio_mode not in AUDIO_MODES:
        raise ValueError(f"audio_mode must be one of {AUDIO_MODES}, got {audio_mode!r}")
    if audio_mode == "none":
        return None
    ap = scope(params, "adapter")
    f = pack.frames
    emb = Tensor(pack.audio.values) if audio_mode == "full" else null_context(ap, f)
    if cfg.adapter == "off":
        return raw_audio_tokens(emb, ap)
    return adapter_forward(emb, te, z_tokens, ap, cfg, token_frames(f, cfg))


# -- forward -------------------------------------------------------------


def injection(x_norm: Tensor, refined: Tensor | None, img: Tensor, p: dict, cfg: ModelConfig,
              mask=None) -> Tensor:
    """``CAttn(z, ā) + CAttn(z, img)``; the audio term is skipped when ``refined`` is None."""
    out = attention(x_norm, img, scope(p, "img_attn"), cfg.heads)
    if refined is not None:
        out = attention(x_norm, refined, scope(p, "audio_attn"), cfg.heads, mask) + out
    return out


def self_attention(h: Tensor, p: dict, cfg: ModelConfig, frames: int) -> Tensor:
    """Factorised space-time attention: within each frame, then across frames per location."""
    n = h.shape[0] // frames
    d = h.shape[1]
    grid = h.reshape(frames, n, d)
    spatial = attention(grid, grid, scope(p, "spatial_attn"), cfg.heads)
    by_loc = grid.transpose(1, 0, 2)
    temporal = attention(by_loc, by_loc, scope(p, "temporal_attn"), cfg.heads).transpose(1, 0, 2)
    return (spatial + temporal).reshape(frames * n, d)


def dit_blocks(tokens: Tensor, te: TimestepEmbeds, refined: Tensor | None, img: Tensor,
               params: dict, cfg: ModelConfig, frames: int) -> Tensor:
    x = tokens
    text = params["dit.text"]
    audio_mask = None
    if refined is not None:
        audio_mask = locality_mask(token_frames(frames, cfg), np.arange(refined.shape[0]), cfg.audio_radius)
    for b in range(cfg.blocks):
        p = scope(params, f"dit.block{b}")
        mod = te.e0 + p["mod"]
        h = modulate(T.layer_norm(x, eps=cfg.eps), mod[1], mod[0])
        x = x + mod[2] * self_attention(h, p, cfg, frames)
        x = x + injection(norm(x, scope(p, "ln_cross"), cfg.eps), refined, img, p, cfg, audio_mask)
        x = x + attention(norm(x, scope(p, "ln_text"), cfg.eps), text, scope(p, "text_attn"), cfg.heads)
        h = modulate(T.layer_norm(x, eps=cfg.eps), mod[4], mod[3])
        x = x + mod[5] * T.mlp(h, scope(p, "ffn"), cfg.activation)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after DiT block {b}")
    return x


def dit_head(x: Tensor, te: TimestepEmbeds, params: dict, cfg: ModelConfig, frames: int) -> Tensor:
    hm = params["dit.head_mod"] + te.e
    h = modulate(T.layer_norm(x, eps=cfg.eps), hm[1], hm[0])
    out = dense(h, scope(params, "dit.head"))
    return unpatchify(out, frames, cfg.channels, cfg.height, cfg.width, cfg.patch)


def dit_forward(z_t, pack: ConditioningPack, te: TimestepEmbeds, refined: Tensor | None,
                params: dict, cfg: ModelConfig) -> Tensor:
    """Velocity field (F×C×H×W) given precomputed refined audio tokens."""
    f = pack.frames
    tokens = embed_tokens(z_t, pack, params, cfg)
    x = dit_blocks(tokens, te, refined, image_tokens(pack, params, cfg), params, cfg, f)
    return dit_head(x, te, params, cfg, f)


def velocity(params: dict, cfg: ModelConfig, z_t, pack: ConditioningPack, t: float,
             audio_mode: str = "full") -> Tensor:
    """Full model: timestep embedding, adapter on the latent tokens, DiT, head."""
    te = timestep_embed(t, params, cfg)
    f = pack.frames
    tokens = embed_tokens(z_t, pack, params, cfg)
    refined = refine_audio(pack, te, tokens, params, cfg, audio_mode)
    x = dit_blocks(tokens, te, refined, image_tokens(pack, params, cfg), params, cfg, f)
    return dit_head(x, te, params, cfg, f)


class Model:
    """Parameters plus config; the denoiser used by guidance and sampling."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "Model":
        return cls(init_params(cfg, seed), cfg)

    def velocity(self, z_t, pack: ConditioningPack, t: float, audio_mode: str = "full") -> np.ndarray:
        return velocity(self.params, self.cfg, z_t, pack, t, audio_mode).data

    def branches(self, z_t, pack: ConditioningPack, t: float, modes=AUDIO_MODES) -> dict:
        return branch_velocities(self.params, self.cfg, z_t, pack, t, modes)


def branch_velocities(params: dict, cfg: ModelConfig, z_t, pack: ConditioningPack, t: float,
                      modes=AUDIO_MODES) -> dict:
    """Velocities for several audio modes, sharing the timestep, token and image embeddings."""
    te = timestep_embed(t, params, cfg)
    f = pack.frames
    tokens = embed_tokens(z_t, pack, params, cfg)
    img = image_tokens(pack, params, cfg)
    out = {}
    for mode in modes:
        refined = refine_audio(pack, te, tokens, params, cfg, mode)
        x = dit_blocks(tokens, te, refined, img, params, cfg, f)
        out[mode] = dit_head(x, te, params, cfg, f).data
    return out
