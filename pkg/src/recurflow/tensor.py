"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the flow network needs are provided.  Every op builds a
node holding its parents and a closure mapping the output gradient to the
parent gradients.  ``backward`` walks the graph once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True
_NODE_IDS = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_NODE_IDS)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a hierarchical name.

    Weight sharing is identity: the same Parameter object is reused wherever
    the weights are shared, so its gradient sums the contributions of every
    site that reads it.
    """

    __slots__ = ("name",)

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad ancestor of a scalar ``loss``.

    Leaf gradients accumulate across calls; interior gradients are recomputed
    from scratch each call so a retained graph can be differentiated again.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def reset_graph(tensors: Iterable[Tensor]) -> None:
    """Drop graph references held by ``tensors`` so intermediates can be freed."""
    for t in tensors:
        t._parents = ()
        t._backward = None


# --------------------------------------------------------------------------
# elementwise arithmetic with numpy broadcasting
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        a = as_tensor(a)
        return _node(a.values * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _node(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.values)

    def bw(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _node(out, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xv = x.values
    inside = (xv >= lo) & (xv <= hi)
    return _node(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is taken as ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xv = x.values
    pos = xv > 0
    return _node(np.where(pos, xv, slope * xv), (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    # split by sign so exp never overflows
    ez = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), bw)


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(x.values[index], (x,), bw)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ContractError("concat needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref):
            raise DimensionError(f"concat: rank {t.ndim} differs from {len(ref)}")
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and m != n:
                raise DimensionError(f"concat: axis {ax} has extent {n}, expected {m}")
    sizes = [t.shape[axis] for t in inputs]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.values for t in inputs], axis=axis),
        inputs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# --------------------------------------------------------------------------
# convolution (im2col + matmul)
# --------------------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of an NCHW batch with a [Cout, Cin, k, k] kernel."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (B,C,H,W), got rank {x.ndim}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D (Cout,Cin,k,k), got rank {weight.ndim}")
    b, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise DimensionError(f"conv2d: channel axis 1 of input has {c}, weight expects {cin}")
    if k != k2:
        raise DimensionError(f"conv2d: kernel axes 2/3 differ ({k} vs {k2})")
    if k % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape}, expected ({cout},)")
    ho = _out_extent(h, k, stride, padding, dilation)
    wo = _out_extent(w, k, stride, padding, dilation)
    if ho < 1:
        raise DimensionError(f"conv2d: height axis 2 ({h}) too small for kernel {k}")
    if wo < 1:
        raise DimensionError(f"conv2d: width axis 3 ({w}) too small for kernel {k}")

    xv = x.values
    # work in (C, B, H, W) so every window copy is a plain strided slice
    xt = xv.transpose(1, 0, 2, 3)
    if k == 1 and stride == 1 and padding == 0:
        cols = xt.reshape(c, -1)
        xp_shape = None
    else:
        xp_shape = (c, b, h + 2 * padding, w + 2 * padding)
        if padding:
            xp = np.zeros(xp_shape)
            xp[:, :, padding : padding + h, padding : padding + w] = xt
        else:
            xp = xt
        cols = np.empty((c, k, k, b, ho, wo))
        for i in range(k):
            y0 = i * dilation
            ys = slice(y0, y0 + stride * (ho - 1) + 1, stride)
            for j in range(k):
                x0 = j * dilation
                cols[:, i, j] = xp[:, :, ys, x0 : x0 + stride * (wo - 1) + 1 : stride]
        cols = cols.reshape(c * k * k, -1)
    wmat = weight.values.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.values[:, None]
    out = out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gm
            if xp_shape is None:
                gx = gcols.reshape(c, b, h, w).transpose(1, 0, 2, 3)
            else:
                gcols = gcols.reshape(c, k, k, b, ho, wo)
                gxp = np.zeros(xp_shape)
                for i in range(k):
                    y0 = i * dilation
                    ys = slice(y0, y0 + stride * (ho - 1) + 1, stride)
                    for j in range(k):
                        x0 = j * dilation
                        gxp[:, :, ys, x0 : x0 + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def _up_last(a: np.ndarray) -> np.ndarray:
    """Bilinear x2 along the last axis, half-pixel centres, edge clamped."""
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],))
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return out


def _up_last_adjoint(g: np.ndarray) -> np.ndarray:
    ge = g[..., 0::2]
    go = g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of the two trailing axes (align_corners=False)."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x: expected 4-D input, got rank {x.ndim}")
    out = _up_last(_up_last(x.values).swapaxes(-1, -2)).swapaxes(-1, -2)

    def bw(g):
        return (_up_last_adjoint(_up_last_adjoint(g).swapaxes(-1, -2)).swapaxes(-1, -2),)

    return _node(out, (x,), bw)


def avg_pool2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x: spatial axes ({h}, {w}) must be even")
    out = x.values.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _node(out, (x,), bw)
