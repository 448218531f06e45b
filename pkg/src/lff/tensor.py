"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array. Operations executed while a
:class:`GradTape` is active are recorded together with a closure that maps the
output cotangent to input cotangents; :meth:`GradTape.gradient` replays the
record in reverse. Outside a tape every op runs as plain numpy with no
bookkeeping, which is what inference uses.

The op set is deliberately small: elementwise arithmetic with numpy
broadcasting, ``matmul``, shape plumbing (reshape, transpose, slicing,
concatenation), reductions, GELU, layer normalization and scaled dot-product
attention. Everything else in the package is composed from these.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from lff.errors import DimensionError, NumericError

_state = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default float type."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of floats, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _infer_dtype(data))
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def _infer_dtype(data):
    return _default_dtype


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class GradTape:
    """Ordered record of differentiable ops executed inside a ``with`` block.

    Only ops with at least one tracked input (``requires_grad=True``) are
    recorded. A tape is single-writer; nest tapes only on one thread.

    >>> x = Tensor([2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = x * x
    >>> tape.gradient(y, [x])[0]
    array([4.])
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def _record(self, op, out, inputs, backward):
        self.records.append(_Record(op, out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Cotangents of ``target`` with respect to each source.

        ``seed`` defaults to ones (i.e. the gradient of ``target.sum()``).
        Sources that ``target`` does not depend on get a zero array.
        """
        keep = {id(s) for s in sources}
        if seed is None:
            seed = np.ones(target.shape, dtype=target.dtype)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        for rec in reversed(self.records):
            key = id(rec.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                grads[k] = grads[k] + gi if k in grads else gi
        return [grads.get(id(s), np.zeros(s.shape, dtype=s.dtype)) for s in sources]


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- shape plumbing ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- nonlinearities ------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias.

    ``eps`` is added to the variance inside the square root.
    """
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layer_norm: last dimension must be positive, got shape {x.shape}")
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: parameter shape {p.shape} does not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    if eps == 0:
        xhat = np.where(var > 0, xhat, 0.0)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        gx = g * gain.data if gain is not None else g
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _record("layer_norm", out, inputs, backward)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q kᵀ / sqrt(D)) v`` over the last two axes.

    ``mask`` is an optional boolean array broadcastable to ``(..., Nq, Nk)``;
    False entries are excluded from the softmax. Every query row must keep at
    least one key.
    """
    if k.shape[-2] == 0:
        raise DimensionError("softmax_attention: no keys to attend to")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"softmax_attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DimensionError("softmax_attention: a query row has every key masked out")
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def backward(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = np.matmul(ds, k.data)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return (
            _unbroadcast(dq, q.shape),
            _unbroadcast(dk, k.shape),
            _unbroadcast(dv, v.shape),
        )

    return _record("attention", out, (q, k, v), backward)


def attention_weights(q: np.ndarray, k: np.ndarray, mask=None) -> np.ndarray:
    """The softmax matrix used by :func:`softmax_attention` (no gradient)."""
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=-1, keepdims=True)


def mlp(x: Tensor, params: dict, activation: str = "gelu") -> Tensor:
    """Two linear layers with a smooth activation in between.

    ``params`` holds ``w1, b1, w2, b2``. ``activation="identity"`` drops the
    nonlinearity, which tests use to check the wiring.
    """
    w1, b1, w2, b2 = params["w1"], params["b1"], params["w2"], params["b2"]
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(
            f"mlp: input width {x.shape[-1]} vs layer shapes {w1.shape} and {w2.shape}"
        )
    h = linear(x, w1, b1)
    if activation == "gelu":
        h = gelu(h)
    elif activation != "identity":
        raise ValueError(f"unknown activation {activation!r}")
    return linear(h, w2, b2)


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()},
        v={k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()},
        step=0,
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``lr`` is a float or a mapping from parameter name to learning rate.
    Inputs are left untouched. Parameters missing from ``grads`` are treated
    as having a zero gradient.
    """
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam: non-finite gradient for parameter {name!r}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate == 0:
            new_params[name] = p
        else:
            update = rate * (m / c1) / (np.sqrt(v / c2) + eps)
            new_params[name] = Tensor._wrap((p.data - update).astype(p.dtype, copy=False))
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step)


# -- randomness ----------------------------------------------------------


class Rng:
    """Seeded random stream (PCG64). Same seed and call order, same output."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, dtype=None) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape)).astype(dtype or _default_dtype, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        return Rng(int(np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0]))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def gauss(rng: Rng, shape) -> Tensor:
    return Tensor._wrap(rng.normal(shape))


def uniform(rng: Rng) -> float:
    """A scalar drawn from [0, 1)."""
    return float(rng.uniform())


def parameters(named: dict) -> list[Tensor]:
    return list(named.values())


def track(params: dict) -> dict:
    """Copies of ``params`` flagged for gradient tracking."""
    out = {}
    for name, p in params.items():
        t = Tensor._wrap(p.data)
        t.requires_grad = True
        t.name = name
        out[name] = t
    return out


def grad_dict(tape: GradTape, loss: Tensor, params: dict) -> dict:
    names = list(params)
    grads = tape.gradient(loss, [params[n] for n in names])
    return dict(zip(names, grads))


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
