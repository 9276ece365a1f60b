"""Small define-by-run reverse-mode differentiation engine over float64 arrays.

Every op builds a new :class:`Node` holding its value and a vector-Jacobian
closure. :func:`backward` walks the graph once in reverse topological order.
Only the operations the forecasting network needs are provided.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TapeError(Exception):
    """Base class for engine errors."""


class ShapeError(TapeError, ValueError):
    pass


class DomainError(TapeError, ValueError):
    pass


class NonFiniteError(TapeError, FloatingPointError):
    pass


_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    """Build values only; no parents or closures are recorded."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/inf and raise :class:`NonFiniteError`."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = prev


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("data", "_grad", "parents", "vjp", "requires_grad", "op")

    def __init__(self, data, parents: tuple = (), vjp: Optional[VJP] = None,
                 requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Node(shape={self.shape}, op={self.op or 'leaf'})"

    def backward(self, retain_intermediate: bool = False):
        backward(self, retain_intermediate)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(data: np.ndarray, parents: tuple, vjp: VJP, op: str) -> Node:
    if _DEBUG and not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteError(f"{op}: non-finite output at index {tuple(int(i) for i in bad)}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(data, parents, vjp, True, op)
    return Node(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- element-wise arithmetic -------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Node:
    a = as_node(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.data < 0):
        bad = np.argwhere(a.data < 0)[0]
        raise DomainError(f"sqrt: negative input at index {tuple(int(i) for i in bad)}")
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (a,), vjp, "sqrt")


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.data <= 0):
        bad = np.argwhere(a.data <= 0)[0]
        raise DomainError(f"log: non-positive input at index {tuple(int(i) for i in bad)}")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Node:
    a = as_node(a)
    out = np.logaddexp(0.0, a.data)
    # sigmoid without overflow
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def clamp_min(a, lo: float = 0.0) -> Node:
    """max(a, lo); gradient passes where a >= lo."""
    a = as_node(a)
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def zero_mask(a, mask) -> Node:
    """Zero the entries where ``mask`` is true; no gradient flows through them."""
    a = as_node(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "zero_mask")


# -- reductions and structure --------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Node:
    a = as_node(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Node:
    parts = [as_node(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        key = [slice(None)] * g.ndim
        out = []
        for i in range(len(parts)):
            key[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(key)])
        return tuple(out)

    return _make(out, tuple(parts), vjp, "concat")


def take(a, indices, axis: int) -> Node:
    """Select ``indices`` (int array, repeats allowed) along ``axis``."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    ax = axis % a.ndim
    if idx.size and np.all(np.diff(idx) == 1):
        # contiguous run: plain slicing
        key = _shifted(a.ndim, ax, int(idx[0]), int(idx[-1]) + 1)
        out = a.data[key]

        def vjp_slice(g):
            ga = np.zeros_like(a.data)
            ga[key] = g
            return (ga,)

        return _make(out, (a,), vjp_slice, "take")
    out = np.take(a.data, idx, axis=ax)

    def vjp(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _make(out, (a,), vjp, "take")


def delay(a, lag: int, axis: int) -> Node:
    """out[t] = a[t - lag] for t >= lag, zero before (causal shift)."""
    a = as_node(a)
    if lag == 0:
        return a
    ax = axis % a.ndim
    T = a.shape[ax]
    out = np.zeros_like(a.data)
    if lag < T:
        dst = [slice(None)] * a.ndim
        src = [slice(None)] * a.ndim
        dst[ax], src[ax] = slice(lag, None), slice(0, T - lag)
        out[tuple(dst)] = a.data[tuple(src)]

    def vjp(g):
        ga = np.zeros_like(g)
        if lag < T:
            ga[tuple(src)] = g[tuple(dst)]
        return (ga,)

    return _make(out, (a,), vjp, "delay")


def matmul(a, b) -> Node:
    """``np.matmul`` semantics, including broadcast batch dimensions."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        K = a.shape[-1]
        a2 = a.data.reshape(-1, K)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), vjp2, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def softmax_rows(a) -> Node:
    """Softmax over the last axis with max subtraction."""
    a = as_node(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax_rows")


# -- windowed statistics -----------------------------------------------------

def window_counts(T: int, window: int, dilation: int) -> np.ndarray:
    """Number of in-range taps at each position 0..T-1."""
    t = np.arange(T)
    return np.minimum(window, t // dilation + 1).astype(np.float64)


def _shape_counts(counts: np.ndarray, ndim: int, ax: int) -> np.ndarray:
    shape = [1] * ndim
    shape[ax] = counts.size
    return counts.reshape(shape)


def _phase_cumsum(x: np.ndarray, dilation: int, ax: int, reverse: bool = False) -> np.ndarray:
    # running sum within each residue class (mod dilation) of the time axis
    if reverse:
        x = np.flip(x, axis=ax)
    T = x.shape[ax]
    if dilation == 1:
        out = np.cumsum(x, axis=ax)
    else:
        pad = (-T) % dilation
        if pad:
            pad_shape = list(x.shape)
            pad_shape[ax] = pad
            x = np.concatenate([x, np.zeros(pad_shape)], axis=ax)
        shape = x.shape[:ax] + (-1, dilation) + x.shape[ax + 1:]
        out = np.cumsum(x.reshape(shape), axis=ax).reshape(x.shape)
        if pad:
            key = [slice(None)] * x.ndim
            key[ax] = slice(0, T)
            out = out[tuple(key)]
    if reverse:
        # reversing a length-T axis changes phases unless handled symmetrically
        out = np.flip(out, axis=ax)
    return out


def _is_expanding(T: int, window: int, dilation: int) -> bool:
    # every position's window already reaches back to the first tap of its phase
    return (T - 1) // dilation + 1 <= window


def _shifted(ndim: int, ax: int, lo, hi):
    key = [slice(None)] * ndim
    key[ax] = slice(lo, hi)
    return tuple(key)


def _window_sum(x: np.ndarray, window: int, dilation: int, ax: int) -> np.ndarray:
    # taps are added oldest first, so each position sums in ascending time order
    T = x.shape[ax]
    if _is_expanding(T, window, dilation) and (dilation == 1 or T % dilation == 0):
        return _phase_cumsum(x, dilation, ax)
    acc = np.zeros_like(x)
    for j in range(window - 1, -1, -1):
        s = j * dilation
        if s < T:
            acc[_shifted(x.ndim, ax, s, None)] += x[_shifted(x.ndim, ax, 0, T - s)]
    return acc


def _window_scatter(g: np.ndarray, window: int, dilation: int, ax: int) -> np.ndarray:
    T = g.shape[ax]
    if _is_expanding(T, window, dilation) and (dilation == 1 or T % dilation == 0):
        return _phase_cumsum(g, dilation, ax, reverse=True)
    acc = np.zeros_like(g)
    for j in range(window):
        s = j * dilation
        if s < T:
            acc[_shifted(g.ndim, ax, 0, T - s)] += g[_shifted(g.ndim, ax, s, None)]
    return acc


def window_mean(a, window: int, dilation: int = 1, axis: int = -1) -> Node:
    """Causal (dilated) moving average along ``axis``.

    Position t averages a at t, t-d, ..., t-(window-1)d, keeping only the taps
    that fall inside the sequence.
    """
    a = as_node(a)
    if window < 1 or dilation < 1:
        raise ValueError(f"window and dilation must be >= 1, got {window}, {dilation}")
    ax = axis % a.ndim
    T = a.shape[ax]
    if T < 1:
        raise ShapeError("window_mean: empty time axis")
    counts = _shape_counts(window_counts(T, window, dilation), a.ndim, ax)
    out = _window_sum(a.data, window, dilation, ax) / counts

    def vjp(g):
        return (_window_scatter(g / counts, window, dilation, ax),)

    return _make(out, (a,), vjp, "window_mean")


def mix(weights, a, axis: int) -> Node:
    """out[..., n, ...] = sum_k weights[n, k] * a[..., k, ...] along ``axis``.

    The sum runs over k in ascending order so results are reproducible
    element by element.
    """
    w, a = as_node(weights), as_node(a)
    ax = axis % a.ndim
    K = a.shape[ax]
    if w.ndim != 2 or w.shape[1] != K:
        raise ShapeError(f"mix: weights {w.shape} do not match axis of length {K} in {a.shape}")
    N = w.shape[0]
    lead = int(np.prod(a.shape[:ax], dtype=np.int64))
    x = a.data.reshape(lead, K, -1)
    acc = np.zeros((lead, N, x.shape[-1]))
    for k in range(K):
        acc += w.data[:, k, None] * x[:, k, None, :]
    out_shape = a.shape[:ax] + (N,) + a.shape[ax + 1:]
    out = acc.reshape(out_shape)

    def vjp(g):
        g3 = g.reshape(lead, N, -1)
        ga = np.matmul(w.data.T, g3).reshape(a.shape)
        gw = np.einsum("lnm,lkm->nk", g3, x)
        return gw, ga

    return _make(out, (w, a), vjp, "mix")


# -- graph traversal -----------------------------------------------------------

def _topo_order(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, retain_intermediate: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from ``root``.

    Leaf gradients accumulate across calls. Gradients of intermediate nodes
    are recomputed from scratch each call and kept only when
    ``retain_intermediate`` is set; dropping them early lets numpy reuse the
    buffers.
    """
    if root.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    fresh = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = fresh.pop(id(node), None)
        if not node.parents:
            if g is not None:
                node._grad = np.array(g, dtype=np.float64) if node._grad is None else node._grad + g
            continue
        node._grad = g if retain_intermediate else None
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            # gradients are never mutated in place, so sharing arrays is safe
            fresh[key] = fresh[key] + gp if key in fresh else gp


# -- parameters and optimisation --------------------------------------------

@dataclass
class Parameter:
    name: str
    node: Node
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        self.node.requires_grad = True
        if self.m is None:
            self.m = np.zeros_like(self.node.data)
        if self.v is None:
            self.v = np.zeros_like(self.node.data)

    @classmethod
    def create(cls, name: str, data) -> "Parameter":
        return cls(name, Node(np.array(data, dtype=np.float64), requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.node.data

    @property
    def shape(self) -> tuple:
        return self.node.shape

    @property
    def size(self) -> int:
        return int(self.node.data.size)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.node._grad = None


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    for p in params:
        g = p.node.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.node.data -= lr * m_hat / (np.sqrt(v_hat) + eps_adam)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
