"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operations DGNet needs are provided. Every op records a node on the
thread-local :class:`Tape` when any input requires a gradient; :func:`backward`
replays the recorded nodes that are reachable from the loss in reverse
execution order.

Convolution follows the cross-correlation convention (no kernel flip). Binary
elementwise ops require identical shapes; the only broadcast is the per-channel
affine inside :func:`batchnorm2d`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DimensionError, UsageError

__all__ = [
    "Tensor", "Parameter", "Tape", "BatchNormState",
    "tensor", "zeros", "detach", "no_grad", "precision", "get_default_dtype", "current_tape",
    "conv2d", "batchnorm2d", "mish", "sigmoid", "concat_channels", "slice_channels",
    "add", "sub", "mul", "div", "scale", "add_scalar", "clamp", "absolute", "mean", "total",
    "backward",
]


def get_default_dtype() -> type:
    return _local.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors (float64 for gradient checks)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    old = _local.dtype
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = old


class Tape:
    """Ordered record of executed differentiable operations.

    Nodes are not held by the tape itself (that would leak every graph ever
    built); instead each node is stamped with a monotonically increasing
    sequence number, which fixes the replay order.
    """

    def __init__(self) -> None:
        self.enabled = True
        self._seq = itertools.count()

    def next_seq(self) -> int:
        return next(self._seq)


class _Local(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.tape = Tape()


_local = _Local()


def current_tape() -> Tape:
    return _local.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = _local.tape
    old = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = old


@dataclass(eq=False)
class _Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _local.dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_attached(self) -> bool:
        """True when the tensor participates in a recorded graph."""
        return self.requires_grad or self._node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named leaf tensor owned by a module.

    ``trainable=False`` parameters still receive gradients but the optimizer
    never touches them (the fixed Laplacian kernel is one).
    """

    def __init__(self, data, trainable: bool = True, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=_local.dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_local.dtype), requires_grad=requires_grad)


def detach(x: Tensor) -> Tensor:
    """Copy of ``x`` that is not attached to any graph."""
    return Tensor(x.data.copy(), dtype=x.dtype)


def _result(data: np.ndarray, op: str, parents: tuple, fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _local.tape
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, fn, tape.next_seq())
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation of an NCHW tensor."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or cout % groups:
        raise ConfigurationError(f"groups={groups} must divide input channels {c} and output channels {cout}")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, got {c}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    impl = _conv_flat if stride == 1 else _conv_im2col
    out, grad_fn = impl(x, weight, padding, groups, stride, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def full_grad(gout):
        gx, gw = grad_fn(gout)
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", parents, full_grad)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def _conv_flat(x, weight, padding, g, stride, ho, wo):
    # Stride-1 path. On the zero-padded input flattened per channel, kernel tap
    # (i, j) is a constant offset i*Wp + j, so all taps come out of one GEMM and
    # are summed through shifted views; the output lives on an (ho, Wp) grid
    # whose last Wp - wo columns are discarded.
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    cog, taps = cout // g, kh * kw
    hp, wp = h + 2 * padding, w + 2 * padding
    span = (ho - 1) * wp + wo
    xp = _pad(x.data, padding).reshape(n, g, cg, hp * wp)
    wt = weight.data.reshape(g, cog, cg, taps)
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]

    stacked = np.matmul(wt.transpose(0, 3, 1, 2).reshape(g, taps * cog, cg), xp)
    stacked = stacked.reshape(n, g, taps, cog, hp * wp)
    grid = np.zeros((n, g, cog, ho * wp), dtype=x.dtype)
    for t, off in enumerate(offsets):
        grid[..., :span] += stacked[:, :, t, :, off:off + span]
    del stacked
    out = np.ascontiguousarray(grid.reshape(n, cout, ho, wp)[..., :wo])

    def grad_fn(gout):
        ggrid = np.zeros((n, g, cog, ho, wp), dtype=gout.dtype)
        ggrid[..., :wo] = gout.reshape(n, g, cog, ho, wo)
        ggrid = ggrid.reshape(n, g, cog, ho * wp)[..., :span]
        gw = None
        if weight.requires_grad:
            gw = np.empty((g, cog, cg, taps), dtype=weight.dtype)
            for t, off in enumerate(offsets):
                gw[..., t] = np.matmul(ggrid, xp[..., off:off + span].swapaxes(-1, -2)).sum(axis=0)
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            back = np.matmul(wt.transpose(0, 3, 2, 1).reshape(g, taps * cg, cog), ggrid)
            back = back.reshape(n, g, taps, cg, span)
            gxp = np.zeros((n, g, cg, hp * wp), dtype=x.dtype)
            for t, off in enumerate(offsets):
                gxp[..., off:off + span] += back[:, :, t]
            del back
            gx = gxp.reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w]
        return gx, gw

    return out, grad_fn


def _conv_im2col(x, weight, padding, g, stride, ho, wo):
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    xp = _pad(x.data, padding)
    k = cg * kh * kw
    wmat = weight.data.reshape(g, cout // g, k)
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, g, k, ho * wo)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

    def grad_fn(gout):
        gr = gout.reshape(n, g, cout // g, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gr).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return out, grad_fn


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    A layer evaluated before any training step normalizes with the defaults
    (mean 0, variance 1).
    """

    channels: int
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    batches_tracked: int = 0

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=_local.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=_local.dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
                eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with the biased batch variance and folds the
    unbiased one into the running estimate.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    dt = x.dtype
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        rm, rv = state.running_mean, state.running_var
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = ((1 - momentum) * rm + momentum * mu).astype(rm.dtype)
        state.running_var = ((1 - momentum) * rv + momentum * unbiased).astype(rv.dtype)
        state.batches_tracked += 1
    else:
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
        centered = x.data - mu[None, :, None, None]
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad_fn(gout):
        gg = np.sum(gout * xhat, axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = gout.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gout * gamma.data[None, :, None, None]
            if training:
                m = x.data.size // c
                s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = np.sum(gxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
                gx = (gxhat - (s1 + xhat * s2) / m) * invstd[None, :, None, None]
            else:
                gx = gxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return _result(out, "batchnorm2d", (x, gamma, beta), grad_fn)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)).

    With u = e^x, tanh(softplus(x)) = n / (n + 2) where n = u (u + 2); this
    has no cancellation for negative x, and clipping x at 20 before the
    exponential only affects values already equal to 1 at working precision.
    """
    xd = x.data
    u = np.exp(np.minimum(xd, 20.0, dtype=xd.dtype))
    n = u * (u + 2)
    t = n / (n + 2)
    u /= 1 + u  # now sigmoid(x)
    out = xd * t

    def grad_fn(gout):
        return (gout * (t + xd * (1 - t * t) * u),)

    return _result(out, "mish", (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def grad_fn(gout):
        return (gout * s * (1 - s),)

    return _result(s, "sigmoid", (x,), grad_fn)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in argument order."""
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def grad_fn(gout):
        return tuple(gout[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _result(out, "concat", tuple(inputs), grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"invalid channel slice [{start}:{stop}] of {x.shape[1]} channels")
    out = x.data[:, start:stop].copy()

    def grad_fn(gout):
        g = np.zeros_like(x.data)
        g[:, start:stop] = gout
        return (g,)

    return _result(out, "slice", (x,), grad_fn)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _result(a.data * f, "scale", (a,), lambda g: (g * f,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _result(a.data + a.dtype.type(value), "add_scalar", (a,), lambda g: (g,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the bound is active."""
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0."""
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return _result(out, "mean", (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _result(out, "sum", (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not attached to a tape (no input requires grad)")

    # collect reachable tensors; interior ones are ordered by their tape sequence
    seen: dict[int, Tensor] = {}
    interior: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t._node is not None:
            interior.append(t)
            stack.extend(p for p in t._node.parents if p.requires_grad)
    interior.sort(key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in interior:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for key, g in grads.items():
        leaf = seen[key]
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
