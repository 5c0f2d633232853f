"""Small reverse-mode tensor core over float64 numpy arrays.

Every op returns a new :class:`Tensor` carrying a closure that maps the
output gradient to parent gradients; :func:`backward` walks the tape in
reverse topological order. The op set is exactly what the network needs,
nothing generic beyond broadcasting elementwise arithmetic.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeMismatch


def _as_float(data) -> np.ndarray:
    """float32 stays float32 (training precision); everything else is
    promoted to float64 (test/default precision)."""
    a = np.asarray(data)
    if a.dtype == np.float32 or a.dtype == np.float64:
        return a
    return a.astype(np.float64)


_grad_enabled = True


class no_grad:
    """Inside this context ops record no tape, so inference does not
    retain every intermediate activation."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _set_bwd(t: "Tensor", fn) -> None:
    if _grad_enabled:
        t._bwd = fn


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, _parents=(), _bwd=None):
        self.data = _as_float(data)
        self.grad = None
        self._parents = _parents if _grad_enabled else ()
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Param(Tensor):
    """Trainable leaf with Adam moment state."""

    __slots__ = ("m", "v")

    def __init__(self, data):
        super().__init__(data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def constant(data) -> Tensor:
    return Tensor(data)


def backward(root: Tensor) -> None:
    """Accumulate gradients of ``root`` (summed to a scalar seed of 1)
    into every reachable tensor's ``.grad``."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise / linear algebra ---

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))
    _set_bwd(out, lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))
    _set_bwd(out, lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))
    _set_bwd(out, lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    ))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, (a, b))
    _set_bwd(out, lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    ))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, (a,))
    _set_bwd(out, lambda g: (g * c,))
    return out


def shift(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or array)."""
    out = Tensor(a.data + c, (a,))
    _set_bwd(out, lambda g: (_unbroadcast(g, a.data.shape),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))
    _set_bwd(out, lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 taken as 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))
    _set_bwd(out, lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(s, (x,))
    _set_bwd(out, lambda g: (g * s * (1.0 - s),))
    return out


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    out = Tensor(r, (x,))
    _set_bwd(out, lambda g: (g * 0.5 / r,))
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), (x,))
    _set_bwd(out, lambda g: (g / x.data,))
    return out


# --- reductions / shape ---

def mean(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), (x,))

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.data.shape) / count,)

    _set_bwd(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), (x,))
    _set_bwd(out, lambda g: (np.broadcast_to(g, x.data.shape).copy(),))
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))
    _set_bwd(out, lambda g: (g.reshape(x.data.shape),))
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    _set_bwd(out, bwd)
    return out


# --- convolutions ---

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    """TF-style 'same': output ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pad_input(x: np.ndarray, k: int, stride: int, padding: str):
    if padding == "same":
        pt, pb = _same_pad(x.shape[2], k, stride)
        pl, pr = _same_pad(x.shape[3], k, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x
    return xp, (pt, pb, pl, pr)


def _conv1x1(x: Tensor, w: Tensor, stride: int, single: bool) -> Tensor:
    """1x1 convolutions are channel matmuls; route them through BLAS on
    either kernel backend."""
    xd = x.data[None] if single else x.data
    xs = xd[:, :, ::stride, ::stride]
    b, ci, ho, wo = xs.shape
    w2 = w.data.reshape(w.data.shape[0], ci)
    y = np.einsum("oi,bihw->bohw", w2, xs, optimize=True)
    out = Tensor(y[0] if single else y, (x, w))

    def bwd(g):
        g4 = g[None] if single else g
        dxs = np.einsum("oi,bohw->bihw", w2, g4, optimize=True)
        if stride == 1:
            dx = dxs
        else:
            dx = np.zeros_like(xd)
            dx[:, :, ::stride, ::stride] = dxs
        dw = np.einsum("bohw,bihw->oi", g4, xs, optimize=True).reshape(w.data.shape)
        return (dx[0] if single else dx), dw

    _set_bwd(out, bwd)
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of (B, Ci, H, W) with kernels (Co, Ci, k, k).

    A 3-d input is treated as a single example and returned 3-d.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects (B, C, H, W) input and 4-d kernels")
    if xd.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"conv2d channels: input {x.data.shape} kernels {w.data.shape}")
    k = w.data.shape[2]
    if k != w.data.shape[3]:
        raise ShapeMismatch("kernels must be square")
    if padding == "same" and k % 2 == 0:
        raise ShapeMismatch("same-padding needs an odd kernel size")
    if k == 1:
        return _conv1x1(x, w, stride, single)
    xp, (pt, _, pl, _) = _pad_input(xd, k, stride, padding)
    y = kernels.conv2d_fwd(xp, w.data, stride)
    out = Tensor(y[0] if single else y, (x, w))

    def bwd(g):
        g = np.ascontiguousarray(g[None] if single else g)
        dxp = kernels.conv2d_bwd_input(g, w.data, stride, xp.shape[2], xp.shape[3])
        dx = dxp[:, :, pt : pt + xd.shape[2], pl : pl + xd.shape[3]]
        dw = kernels.conv2d_bwd_kernel(xp, g, stride, k)
        return np.ascontiguousarray(dx[0] if single else dx), dw

    _set_bwd(out, bwd)
    return out


def depthwise_conv(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel cross-correlation: (B, C, H, W) with kernels (C, k, k)."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.data.ndim != 3:
        raise ShapeMismatch("depthwise_conv expects (B, C, H, W) input and 3-d kernels")
    if xd.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"depthwise channels: input {x.data.shape} kernels {w.data.shape}")
    k = w.data.shape[1]
    if k != w.data.shape[2]:
        raise ShapeMismatch("kernels must be square")
    if padding == "same" and k % 2 == 0:
        raise ShapeMismatch("same-padding needs an odd kernel size")
    xp, (pt, _, pl, _) = _pad_input(xd, k, stride, padding)
    y = kernels.depthwise_fwd(xp, w.data, stride)
    out = Tensor(y[0] if single else y, (x, w))

    def bwd(g):
        g = np.ascontiguousarray(g[None] if single else g)
        dxp = kernels.depthwise_bwd_input(g, w.data, stride, xp.shape[2], xp.shape[3])
        dx = dxp[:, :, pt : pt + xd.shape[2], pl : pl + xd.shape[3]]
        dw = kernels.depthwise_bwd_kernel(xp, g, stride, k)
        return np.ascontiguousarray(dx[0] if single else dx), dw

    _set_bwd(out, bwd)
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B, n) -> x @ w.T + b with w (m, n), b (m,). 1-d input works."""
    single = x.data.ndim == 1
    xd = x.data[None] if single else x.data
    if xd.ndim != 2 or w.data.ndim != 2 or xd.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"dense: input {x.data.shape} weights {w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch(f"dense: bias {b.data.shape} vs weights {w.data.shape}")
    y = xd @ w.data.T + b.data
    out = Tensor(y[0] if single else y, (x, w, b))

    def bwd(g):
        g2 = g[None] if single else g
        dx = g2 @ w.data
        return (dx[0] if single else dx), g2.T @ xd, g2.sum(axis=0)

    _set_bwd(out, bwd)
    return out


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple, eps: float):
    """Fused train-mode batch standardization.

    Returns (out, batch_mean, batch_var) with the moments raveled per
    channel; the backward pass uses the closed-form standardization
    gradient instead of composing a dozen elementwise ops over the
    expanded activation tensors.
    """
    bshape = tuple(1 if i in axes else s for i, s in enumerate(x.data.shape))
    mu = x.data.mean(axis=axes, keepdims=True)
    xhat = x.data - mu
    var = np.mean(xhat * xhat, axis=axes, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat /= sigma  # owned buffer; becomes the standardized activation
    g4 = gamma.data.reshape(bshape)
    out = Tensor(xhat * g4 + beta.data.reshape(bshape), (x, gamma, beta))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma.data.shape)
        dbeta = g.sum(axis=axes).reshape(beta.data.shape)
        dx = g * g4  # fresh buffer; reduced in place below
        m1 = dx.mean(axis=axes, keepdims=True)
        m2 = (dx * xhat).mean(axis=axes, keepdims=True)
        dx -= m1
        dx -= m2 * xhat
        dx /= sigma
        return dx, dgamma, dbeta

    _set_bwd(out, bwd)
    return out, mu.reshape(-1), var.reshape(-1)


# --- classification head ---

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (plain numpy)."""
    z = _as_float(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_op(logits: Tensor) -> Tensor:
    p = softmax(logits.data)
    out = Tensor(p, (logits,))
    _set_bwd(out, lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))
    return out


PROB_FLOOR = 1e-12


def cross_entropy_op(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean over the batch of -sum(y * log(clamp(p))); rows of ``onehot``
    select the true class."""
    y = np.asarray(onehot, dtype=probs.data.dtype)
    if y.shape != probs.data.shape:
        raise ShapeMismatch(f"cross entropy: probs {probs.data.shape} labels {y.shape}")
    p = np.clip(probs.data, PROB_FLOOR, 1.0)
    batch = p.shape[0] if p.ndim == 2 else 1
    loss = -(y * np.log(p)).sum() / batch
    out = Tensor(loss, (probs,))

    def bwd(g):
        # clamp zeroes the gradient where it is active (p below the floor)
        dp = np.where(probs.data >= PROB_FLOOR, -y / p, 0.0) * (g / batch)
        return (dp,)

    _set_bwd(out, bwd)
    return out
