"""Rectified-flow interpolation, velocity targets and the masked training loss."""

from __future__ import annotations

import numpy as np

from lff import tensor as T
from lff.errors import DimensionError, DomainError
from lff.tensor import Tensor

BRANCHES = ("combined", "face", "lip")


def flow_forward(x0: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    """Straight-line interpolation ``(1 - t) x0 + t noise``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    x0, noise = np.asarray(x0), np.asarray(noise)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    return (1.0 - t) * x0 + t * noise


def velocity_target(x0: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """d x_t / dt = noise - x0."""
    x0, noise = np.asarray(x0), np.asarray(noise)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    return noise - x0


def loss_branch(q: float) -> str:
    """Which region the loss supervises for a draw ``q`` ~ U[0, 1]."""
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    if q >= 0.5:
        return "lip"
    if q >= 0.4:
        return "face"
    return "combined"


def branch_weight(branch: str, face_mask: np.ndarray, lip_mask: np.ndarray) -> np.ndarray:
    if branch == "face":
        return face_mask
    if branch == "lip":
        return lip_mask
    return 1.0 + face_mask + lip_mask


def _check_binary(name, m):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return m


def masked_loss(v_pred: Tensor, v_target: np.ndarray, face_mask: np.ndarray, lip_mask: np.ndarray,
                q: float) -> Tensor:
    """Mean over all elements of ``((v_target - v_pred) * W)**2``.

    ``W`` is the face mask for ``0.4 <= q < 0.5``, the lip mask for
    ``q >= 0.5`` and ``1 + face + lip`` otherwise. Masks are H×W and
    broadcast over frames and channels.
    """
    face_mask = _check_binary("face mask", face_mask)
    lip_mask = _check_binary("lip mask", lip_mask)
    v_pred = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    if v_pred.shape != np.shape(v_target):
        raise DimensionError(f"prediction shape {v_pred.shape} != target shape {np.shape(v_target)}")
    weight = branch_weight(loss_branch(q), face_mask, lip_mask)
    diff = Tensor(v_target, dtype=v_pred.dtype) - v_pred
    return T.mean(T.square(diff * Tensor(weight, dtype=v_pred.dtype)))
