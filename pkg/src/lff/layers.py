"""Parameter initialisation and small building blocks over the tensor ops.

Parameters are flat ``dict[str, Tensor]`` keyed by dotted names such as
``"dit.block0.self_attn.q.w"``. :func:`scope` takes a view of one prefix.
"""

from __future__ import annotations

import math

import numpy as np

from lff import tensor as T
from lff.tensor import Rng, Tensor


def scope(params: dict, prefix: str) -> dict:
    """Entries under ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=T.get_default_dtype()))


def init_linear(rng: Rng, din: int, dout: int, scale: float = 1.0) -> dict:
    w = rng.normal((din, dout)) * (scale / math.sqrt(din))
    return {"w": _t(w), "b": _t(np.zeros(dout))}


def init_mlp(rng: Rng, din: int, dhidden: int, dout: int, out_scale: float = 1.0) -> dict:
    l1, l2 = init_linear(rng, din, dhidden), init_linear(rng, dhidden, dout, out_scale)
    return {"w1": l1["w"], "b1": l1["b"], "w2": l2["w"], "b2": l2["b"]}


def init_layer_norm(d: int) -> dict:
    return {"gain": _t(np.ones(d)), "bias": _t(np.zeros(d))}


def init_attention(rng: Rng, d_query: int, d_context: int, d: int, out_scale: float = 1.0) -> dict:
    out = {}
    for name, din in (("q", d_query), ("k", d_context), ("v", d_context)):
        out.update(prefixed(name, init_linear(rng, din, d)))
    out.update(prefixed("o", init_linear(rng, d, d, out_scale)))
    return out


def dense(x: Tensor, p: dict) -> Tensor:
    return T.linear(x, p["w"], p["b"])


def norm(x: Tensor, p: dict | None, eps: float) -> Tensor:
    if p is None:
        return T.layer_norm(x, eps=eps)
    return T.layer_norm(x, p["gain"], p["bias"], eps)


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * (1 + scale) + shift`` with the vectors broadcast over tokens."""
    return x * (scale + 1.0) + shift


def attention(xq: Tensor, ctx: Tensor, p: dict, heads: int = 1, mask=None) -> Tensor:
    """Multi-head attention: queries from ``xq`` (…×Nq×D), keys/values from ``ctx``.

    Leading axes are batch axes shared by ``xq`` and ``ctx``.
    """
    q = dense(xq, scope(p, "q"))
    k = dense(ctx, scope(p, "k"))
    v = dense(ctx, scope(p, "v"))
    if heads == 1:
        out = T.softmax_attention(q, k, v, mask)
    else:
        lead = q.shape[:-2]
        nq, nk, d = q.shape[-2], k.shape[-2], q.shape[-1]
        n = len(lead)
        perm = tuple(range(n)) + (n + 1, n, n + 2)
        q = q.reshape(lead + (nq, heads, d // heads)).transpose(perm)
        k = k.reshape(k.shape[:-2] + (nk, heads, d // heads)).transpose(perm)
        v = v.reshape(v.shape[:-2] + (nk, heads, d // heads)).transpose(perm)
        out = T.softmax_attention(q, k, v, mask).transpose(perm).reshape(lead + (nq, d))
    return dense(out, scope(p, "o"))


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features; ``positions`` may be scalar or 1-d."""
    pos = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = pos[:, None] * freqs[None, :]
    out = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((pos.shape[0], 1))], axis=1)
    return out.astype(T.get_default_dtype())


def locality_mask(query_frames: np.ndarray, key_frames: np.ndarray, radius: int | None):
    """Boolean mask allowing keys within ``radius`` frames of each query."""
    if radius is None:
        return None
    return np.abs(np.asarray(query_frames)[:, None] - np.asarray(key_frames)[None, :]) <= radius
