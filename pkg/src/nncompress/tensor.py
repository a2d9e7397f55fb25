"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, every
operation links the result to its inputs with vector-Jacobian closures, and
``backward``/``grad`` walk the graph in reverse topological order.  The
vjp closures are themselves written in terms of engine operations, so
gradients can be differentiated again (needed for Hessian-vector products).

Non-differentiable point-wise maps (rounding, sign, thresholding) go through
``ste_apply``, which keeps the exact forward value but passes the incoming
gradient through unchanged.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class _GradMode:
    enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = prev


@contextmanager
def _grad_mode(enabled):
    prev = _GradMode.enabled
    _GradMode.enabled = enabled
    try:
        yield
    finally:
        _GradMode.enabled = prev


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._parents: tuple = ()  # ((Tensor, vjp), ...)
        self._op: str = "leaf"

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Accumulated gradient; zeros if backward never reached this tensor."""
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __float__(self) -> float:
        return self.item()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x, like: Tensor) -> Tensor:
    """Promote a python scalar to a constant tensor of ``like``'s shape."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return Tensor(arr)


def _node(data: np.ndarray, parents, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out._op = op
    if _GradMode.enabled:
        kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        out._parents = kept
        out.requires_grad = bool(kept)
    else:
        out._parents = ()
        out.requires_grad = False
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ops ------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, as_tensor(b))
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, [(a, lambda g: g), (b, lambda g: neg(g))], "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, [(a, lambda g: neg(g))], "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, [(a, lambda g: mul(g, b)), (b, lambda g: mul(g, a))], "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, as_tensor(b))
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "div")
    out = _node(a.data / b.data, [], "div")

    def vjp_a(g):
        return div(g, b)

    def vjp_b(g):
        return neg(div(mul(g, out), b))

    return _attach(out, [(a, vjp_a), (b, vjp_b)])


def _attach(out: Tensor, parents) -> Tensor:
    # used by ops whose vjps reference the output tensor
    if _GradMode.enabled:
        kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        out._parents = kept
        out.requires_grad = bool(kept)
    return out


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), [], "exp")
    return _attach(out, [(a, lambda g: mul(g, out))])


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), [(a, lambda g: div(g, a))], "log")


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.sqrt(a.data), [], "sqrt")
    return _attach(out, [(a, lambda g: div(mul(g, 0.5), out))])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable two-sided form
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _node(y, [], "sigmoid")
    return _attach(out, [(a, lambda g: mul(g, mul(out, sub(1.0, out))))])


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.where(a.data >= 0, 1.0, -1.0)
    return _node(np.abs(a.data), [(a, lambda g: mul(g, Tensor(sign)))], "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _node(np.maximum(a.data, 0.0), [(a, lambda g: mul(g, Tensor(mask)))], "relu")


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to the first operand."""
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "maximum")
    take_a = (a.data >= b.data).astype(np.float64)
    return _node(
        np.maximum(a.data, b.data),
        [(a, lambda g: mul(g, Tensor(take_a))), (b, lambda g: mul(g, Tensor(1.0 - take_a)))],
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient goes to the first operand."""
    a = as_tensor(a)
    b = _lift(b, a)
    _same_shape(a, b, "minimum")
    take_a = (a.data <= b.data).astype(np.float64)
    return _node(
        np.minimum(a.data, b.data),
        [(a, lambda g: mul(g, Tensor(take_a))), (b, lambda g: mul(g, Tensor(1.0 - take_a)))],
        "minimum",
    )


def clamp(a, lo, hi) -> Tensor:
    """clamp(x; lo, hi) = min(max(x, lo), hi); lo/hi may be tensors or scalars."""
    return minimum(maximum(a, lo), hi)


def ste_apply(x, forward_fn: Callable[[np.ndarray], np.ndarray], name: str = "ste") -> Tensor:
    """Apply a non-smooth elementwise map with a straight-through backward.

    The forward value is ``forward_fn(x)``; the backward passes the upstream
    gradient through unchanged (identity Jacobian).
    """
    x = as_tensor(x)
    data = np.asarray(forward_fn(x.data), dtype=np.float64)
    if data.shape != x.shape:
        raise ShapeError(f"ste_apply: forward_fn changed shape {x.shape} -> {data.shape}")
    return _node(data, [(x, lambda g: g)], name)


def round_ste(x) -> Tensor:
    """Bankers rounding (half to even) with a straight-through gradient."""
    return ste_apply(x, np.round, name="round_ste")


# -- structural / reduction ops ------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    old = a.shape
    return _node(a.data.reshape(shape), [(a, lambda g: reshape(g, old))], "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), [(a, lambda g: transpose(g, inv))], "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    old = a.shape
    ndiff = len(shape) - len(old)
    summed_axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(old) if s == 1 and shape[i + ndiff] != 1
    )

    def vjp(g):
        r = tsum(g, axis=summed_axes, keepdims=False) if summed_axes else g
        return reshape(r, old)

    return _node(data, [(a, vjp)], "broadcast_to")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    old = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))

    def vjp(g):
        return broadcast_to(reshape(g, kept), old)

    return _node(data, [(a, vjp)], "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        [(a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))],
        "matmul",
    )


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes of a 4-d tensor by ``pad`` on each side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    if a.ndim != 4:
        raise ShapeError(f"pad2d: expected 4-d input, got {a.shape}")
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    data = np.pad(a.data, width)
    return _node(data, [(a, lambda g: _crop2d(g, pad))], "pad2d")


def _crop2d(a, pad: int) -> Tensor:
    a = as_tensor(a)
    data = a.data[:, :, pad:-pad, pad:-pad].copy()
    return _node(data, [(a, lambda g: pad2d(g, pad))], "crop2d")


def _window_count(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


def im2col(a, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Unfold sliding windows: [N,C,H,W] -> [N, C*kh*kw, oh*ow]."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h < kh or w < kw:
        raise ShapeError(f"im2col: window {kh}x{kw} does not fit input {h}x{w}")
    oh, ow = _window_count(h, kh, sh), _window_count(w, kw, sw)
    view = np.lib.stride_tricks.sliding_window_view(a.data, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw, :, :]  # [N,C,oh,ow,kh,kw]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow).copy()
    shape_in = a.shape

    def vjp(g):
        return _col2im(g, shape_in, kh, kw, sh, sw)

    return _node(cols, [(a, vjp)], "im2col")


def _col2im(cols, shape_in, kh, kw, sh, sw) -> Tensor:
    cols = as_tensor(cols)
    n, c, h, w = shape_in
    oh, ow = _window_count(h, kh, sh), _window_count(w, kw, sw)
    src = cols.data.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += src[:, :, i, j, :, :]

    def vjp(g):
        return im2col(g, kh, kw, sh, sw)

    return _node(out, [(cols, vjp)], "col2im")


def maxpool2d(a, k: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over non-overlapping (by default) kxk windows."""
    a = as_tensor(a)
    s = k if stride is None else stride
    n, c, h, w = a.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: window {k} does not fit input {h}x{w}")
    oh, ow = _window_count(h, k, s), _window_count(w, k, s)
    view = np.lib.stride_tricks.sliding_window_view(a.data, (k, k), axis=(2, 3))
    view = view[:, :, ::s, ::s, :, :].reshape(n, c, oh, ow, k * k)
    idx = np.argmax(view, axis=-1)
    out = np.take_along_axis(view, idx[..., None], axis=-1)[..., 0]
    shape_in = a.shape

    def vjp(g):
        return _maxpool_scatter(g, idx, shape_in, k, s)

    return _node(out.copy(), [(a, vjp)], "maxpool2d")


def _maxpool_scatter(g, idx, shape_in, k, s) -> Tensor:
    g = as_tensor(g)
    n, c, h, w = shape_in
    oh, ow = idx.shape[2], idx.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    ki, kj = np.unravel_index(idx, (k, k))
    ni, ci, oi, oj = np.indices((n, c, oh, ow))
    np.add.at(out, (ni, ci, oi * s + ki, oj * s + kj), g.data)

    def vjp(gg):
        return _maxpool_gather(gg, idx, shape_in, k, s)

    return _node(out, [(g, vjp)], "maxpool_scatter")


def _maxpool_gather(gg, idx, shape_in, k, s) -> Tensor:
    gg = as_tensor(gg)
    n, c, h, w = shape_in
    oh, ow = idx.shape[2], idx.shape[3]
    ki, kj = np.unravel_index(idx, (k, k))
    ni, ci, oi, oj = np.indices((n, c, oh, ow))
    out = gg.data[ni, ci, oi * s + ki, oj * s + kj]

    def vjp(g3):
        return _maxpool_scatter(g3, idx, shape_in, k, s)

    return _node(out, [(gg, vjp)], "maxpool_gather")


# -- layer-level composites ----------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d correlation, NCHW input against OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels {c} != weight in_channels {ci}")
    xp = pad2d(x, padding)
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    oh, ow = _window_count(hp, kh, stride), _window_count(wp, kw, stride)
    cols = im2col(xp, kh, kw, stride, stride)  # [N, C*kh*kw, L]
    cols = reshape(transpose(cols, (1, 0, 2)), (c * kh * kw, n * oh * ow))
    out = matmul(reshape(w, (o, c * kh * kw)), cols)  # [O, N*L]
    out = transpose(reshape(out, (o, n, oh, ow)), (1, 0, 2, 3))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = add(out, broadcast_to(reshape(b, (1, o, 1, 1)), out.shape))
    return out


def linear(x, w, b=None) -> Tensor:
    """Fully-connected layer: x [N,F] with weight [O,F] and optional bias [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = add(out, broadcast_to(reshape(b, (1, w.shape[0])), out.shape))
    return out


# -- backward engine ------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, seed: Tensor, create_graph: bool) -> dict:
    """Reverse sweep from root; returns {id(tensor): grad Tensor}."""
    topo = _toposort(root)
    grads: dict = {id(root): seed}
    with _grad_mode(create_graph):
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return grads


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate across calls; use ``zero_grad`` between steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = Tensor(np.ones_like(loss.data))
    grads = _run_backward(loss, seed, create_graph=False)
    for node in _toposort(loss):
        if node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                if node._grad is None:
                    node._grad = np.zeros_like(node.data)
                node._grad += g.data


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list:
    """Return d(loss)/d(w) for each w in ``wrt`` as tensors, without touching
    ``.grad`` buffers.  With ``create_graph`` the returned tensors stay on the
    tape, so expressions of them can be differentiated again.
    """
    if loss.data.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    seed = Tensor(np.ones_like(loss.data))
    grads = _run_backward(loss, seed, create_graph=create_graph)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out
