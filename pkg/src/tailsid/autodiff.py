"""Reverse-mode automatic differentiation over numpy arrays.

A small define-by-run engine in the micrograd style, generalized to
arrays: every operation returns a `Tensor` holding the forward value and
a closure that pushes adjoints to its inputs. The graph lives in the
tensors themselves and is freed with them.

Determinism: graph construction order fixes the topological order, so
gradient accumulation happens in the same floating-point order on every
run. Operations preserve the dtype of their inputs (python scalars do
not upcast float32 under numpy 2 promotion rules).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "_backward", "_children")

    def __init__(self, data, children=()):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self._backward = None
        self._children = children

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar; everything else is a module-level function.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def _accum(node: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add an adjoint contribution. `owned=True` promises that `g` is a fresh
    array the graph may keep and mutate; views or shared arrays must pass
    owned=False so the first accumulation copies them."""
    if node.grad is None:
        if owned:
            node.grad = g
        else:
            node.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar (or all-ones-seeded) root tensor."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _const(x, like: np.ndarray) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype != like.dtype and np.issubdtype(like.dtype, np.floating):
        arr = arr.astype(like.dtype)
    return arr


# ---------------------------------------------------------------------------
# Elementwise / broadcasting primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    at = isinstance(a, Tensor)
    bt = isinstance(b, Tensor)
    ad = a.data if at else _const(a, b.data)
    bd = b.data if bt else _const(b, a.data)
    out_data = ad + bd
    if not grad_enabled():
        return Tensor(out_data)
    children = tuple(x for x, is_t in ((a, at), (b, bt)) if is_t)
    out = Tensor(out_data, children)

    def bwd(g):
        # After this closure runs, `g` (the add node's grad buffer) is dead,
        # so its ownership can transfer to the first same-shape child; the
        # second same-shape child still needs a copy.
        gave_g = False
        if at:
            r = _unbroadcast(g, ad.shape)
            owned = r is not g or not gave_g
            gave_g = gave_g or r is g
            _accum(a, r, owned=owned)
        if bt:
            r = _unbroadcast(g, bd.shape)
            _accum(b, r, owned=r is not g or not gave_g)

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    at = isinstance(a, Tensor)
    bt = isinstance(b, Tensor)
    ad = a.data if at else _const(a, b.data)
    bd = b.data if bt else _const(b, a.data)
    out_data = ad * bd
    if not grad_enabled():
        return Tensor(out_data)
    children = tuple(x for x, is_t in ((a, at), (b, bt)) if is_t)
    out = Tensor(out_data, children)

    def bwd(g):
        if at:
            _accum(a, _unbroadcast(g * bd, ad.shape), owned=True)
        if bt:
            _accum(b, _unbroadcast(g * ad, bd.shape), owned=True)

    out._backward = bwd
    return out


def square(x: Tensor) -> Tensor:
    out_data = x.data * x.data
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g * (2.0 * x.data), owned=True)

    out._backward = bwd
    return out


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g * (0.5 / out_data), owned=True)

    out._backward = bwd
    return out


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g * out_data, owned=True)

    out._backward = bwd
    return out


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g / x.data, owned=True)

    out._backward = bwd
    return out


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g * (1.0 - out_data * out_data), owned=True)

    out._backward = bwd
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes where lo <= x <= hi (zero outside)."""
    out_data = np.clip(x.data, lo, hi)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        mask = (x.data >= lo) & (x.data <= hi)
        _accum(x, g * mask.astype(g.dtype), owned=True)

    out._backward = bwd
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth and Lipschitz on bounded domains)."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))
    out_data = 0.5 * xd * (1.0 + t)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        dx = 0.5 * (1.0 + t + xd * (1.0 - t * t) * (_GELU_C * (1.0 + 0.134145 * xd * xd)))
        _accum(x, g * dx, owned=True)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    out._backward = bwd
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    out._backward = bwd
    return out


def transpose(x: Tensor, axes) -> Tensor:
    out_data = x.data.transpose(axes)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, g.transpose(inv))

    out._backward = bwd
    return out


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter-back."""
    out_data = x.data[idx]
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x,))

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g

    out._backward = bwd
    return out


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """General (possibly batched) matrix product, numpy matmul semantics."""
    out_data = a.data @ b.data
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (a, b))

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape), owned=True)
        _accum(b, _unbroadcast(gb, b.data.shape), owned=True)

    out._backward = bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) over the last axis, flattened to a single GEMM."""
    xd = x.data
    d_in, d_out = w.data.shape
    x2 = xd.reshape(-1, d_in)
    y2 = x2 @ w.data
    if b is not None:
        y2 += b.data
    out_data = y2.reshape(xd.shape[:-1] + (d_out,))
    if not grad_enabled():
        return Tensor(out_data)
    children = (x, w) if b is None else (x, w, b)
    out = Tensor(out_data, children)

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        _accum(w, x2.T @ g2, owned=True)
        if b is not None:
            _accum(b, g2.sum(axis=0), owned=True)
        _accum(x, (g2 @ w.data.T).reshape(xd.shape), owned=True)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# Fused neural-network blocks
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float) -> Tensor:
    """Layer normalization over the last axis; denominator >= sqrt(eps) > 0."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out_data = gain.data * xhat + offset.data
    if not grad_enabled():
        return Tensor(out_data)
    out = Tensor(out_data, (x, gain, offset))
    reduce_axes = tuple(range(xd.ndim - 1))

    def bwd(g):
        _accum(gain, (g * xhat).sum(axis=reduce_axes), owned=True)
        _accum(offset, g.sum(axis=reduce_axes), owned=True)
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx - m1 - xhat * m2), owned=True)

    out._backward = bwd
    return out


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where mask is False get weight
    exactly 0.0 (and therefore exactly zero gradient). Every row must keep
    at least one unmasked position."""
    xd = x.data
    if mask is not None:
        z = np.where(mask, xd, xd.dtype.type(-np.inf))
    else:
        z = xd
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e / e.sum(axis=-1, keepdims=True)
    if not grad_enabled():
        return Tensor(s)
    out = Tensor(s, (x,))

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, s * (g - dot), owned=True)

    out._backward = bwd
    return out
