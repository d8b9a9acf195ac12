"""Dense-tensor reverse-mode automatic differentiation.

A dynamic tape: every op whose inputs are gradient-tracked records a
backward closure on the output tensor.  ``Tensor.backward()`` walks the
tape once in reverse topological order, so for a fixed graph the
accumulation order -- and therefore every gradient bit -- is
deterministic.

Values are plain numpy arrays (float64 by default, float32 allowed for
training speed).  Tensors are treated as immutable after creation; only
the optimizer replaces parameter payloads, and it does so by swapping in
a fresh array rather than writing in place.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# Additive pre-softmax penalty for masked-out attention slots.  Large enough
# that exp() underflows to exactly 0.0 in both float32 and float64, which is
# what makes mask locality bit-exact.
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericsError(FloatingPointError):
    """A non-finite value crossed an op boundary while debug checks are on."""


_grad_enabled = True
_debug_checks = False
_node_ids = itertools.count(1)


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf detection at op boundaries (off by default)."""
    global _debug_checks
    _debug_checks = bool(on)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def frozen(tensors: Iterable["Tensor"]):
    """Temporarily stop tracking the given tensors.

    Ops executed inside the block treat them as constants, so after a later
    backward() their gradients are exactly zero (never touched).  This is how
    the trainer routes each loss to its designated parameter group.
    """
    tensors = list(tensors)
    prev = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, p in zip(tensors, prev):
            t.requires_grad = p


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return np.asarray(arr, dtype=DEFAULT_DTYPE)


class Tensor:
    """A dense n-dimensional value, optionally participating in the tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.node_id = next(_node_ids) if self.requires_grad else None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- tape ------------------------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, no tape participation."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar.

        Accumulates into ``.grad`` of every tracked tensor reachable on the
        tape.  Tensors not reachable keep ``grad is None`` (read as zero).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def argmax(self, axis=-1) -> np.ndarray:
        return np.argmax(self.data, axis=axis)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericsError("non-finite value produced at an op boundary")
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        # Freeze the op-time tracking decision: a parent that was frozen when
        # this op ran must stay invisible to the backward pass even if it has
        # been unfrozen since (loss routing depends on this).
        flags = tuple(p.requires_grad for p in parents)
        if all(flags):
            out._backward = backward
        else:
            def guarded(g, _parents=tuple(parents), _flags=flags, _backward=backward):
                current = [p.requires_grad for p in _parents]
                for p, f in zip(_parents, _flags):
                    p.requires_grad = f
                try:
                    _backward(g)
                finally:
                    for p, c in zip(_parents, current):
                        p.requires_grad = c

            out._backward = guarded
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


# -- shape manipulation -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out_data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    out_data = a.data[idx]

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(out_data, tensors, backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties share the gradient equally (deterministic)."""
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        full = out_data if keepdims else np.expand_dims(out_data, axis)
        mask = (a.data == full).astype(a.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, mask * gg)

    return _make(out_data, (a,), backward)


# -- elementwise nonlinearities ------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


# -- fused neural ops -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probability-simplex projection along ``axis`` with max-subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization of the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), backward)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Per-example softmax cross-entropy.

    ``logits`` has shape [..., C]; ``labels`` are integer class ids of shape
    [...].  Returns losses of shape [...].
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(x, labels[..., None], axis=-1)
    out_data = (lse - picked)[..., 0]

    def backward(g):
        p = np.exp(x - lse)
        np.put_along_axis(
            p, labels[..., None], np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1
        )
        _accum(logits, p * g[..., None])

    return _make(out_data, (logits,), backward)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Binary-style convenience wrapper: two logits, one {0,1} label, scalar loss."""
    if logits.shape != (2,):
        raise ShapeError(f"cross_entropy expects exactly two logits, got shape {logits.shape}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return cross_entropy_with_logits(reshape(logits, (1, 2)), np.array([label]))[0]


def sample_gumbel(rng: np.random.Generator, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """I.i.d. Gumbel(0,1) noise: -log(-log U), U clipped away from {0,1}."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    return -np.log(-np.log(np.clip(u, tiny, 1.0 - 1e-16))).astype(dtype)


def gumbel_softmax(logits: Tensor, temperature: float, noise: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> Tensor:
    """softmax((logits + g)/tau) with the noise treated as a constant.

    Exactly one noise source: pass ``rng`` to sample Gumbel(0,1) noise, or
    pass ``noise`` directly (the zero-noise test hook uses an array of
    zeros, which reduces the op to softmax(logits/tau)).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs either an rng or explicit noise")
        noise = sample_gumbel(rng, logits.shape, logits.dtype)
    shifted = add(logits, constant(np.asarray(noise, dtype=logits.dtype)))
    return softmax(mul(shifted, 1.0 / float(temperature)), axis=-1)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: table [V, d] indexed by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _make(out_data, (table,), backward)


def sliding_windows(x: Tensor, width: int) -> Tensor:
    """All length-``width`` row windows, flattened: [..., T, d] -> [..., T-w+1, w*d].

    One tape node backs a whole convolution's im2col, which keeps the graph
    small for the TextCNN.
    """
    t, d = x.shape[-2], x.shape[-1]
    if width > t:
        raise ShapeError(f"window width {width} exceeds sequence length {t}")
    p = t - width + 1
    out_data = np.stack([x.data[..., i : i + width, :] for i in range(p)], axis=-3)
    out_data = out_data.reshape(x.shape[:-2] + (p, width * d))

    def backward(g):
        gw = g.reshape(x.shape[:-2] + (p, width, d))
        gx = np.zeros_like(x.data)
        for i in range(p):
            gx[..., i : i + width, :] += gw[..., i, :, :]
        _accum(x, gx)

    return _make(out_data, (x,), backward)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Backward pass returning one gradient per requested tensor.

    Parameters not reachable from the loss get exact zeros.  Assumes the
    listed tensors carry no stale gradients (call sites zero them first).
    """
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
