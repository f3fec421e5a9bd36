"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed and row-major; image tensors use NCHW layout.
Values default to float32. Ops preserve the dtype of their inputs, so a graph
built from float64 leaves runs in float64 (used by gradient-check oracles).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError, ValidationError

ArrayLike = Union[np.ndarray, float, int, Sequence]
Padding = Union[int, Tuple[int, int, int, int]]


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    # float64 arrays stay float64 (oracles); everything else defaults to float32
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    # numpy arithmetic on 0-d arrays yields scalars; keep their precision too
    if isinstance(data, (np.float32, np.float64)):
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """A node in the computation graph.

    ``op`` names the producing operation ("leaf" for inputs and parameters,
    "straight_through" for quantizer outputs whose Jacobian is the identity).
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        op: str = "leaf",
        backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        dtype=None,
    ):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.op = op
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Each node is visited exactly once in reverse topological order; gradients
    from multiple consumers are summed.
    """
    if grad is None:
        if root.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return

    order: list = []
    seen = set()
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.data + b.data, parents=(a, b), op="add", backward_fn=bw)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), op="neg", backward_fn=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return Tensor(ad * bd, parents=(a, b), op="mul", backward_fn=bw)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor(ad * ad, parents=(a,), op="square", backward_fn=lambda g: (2 * ad * g,))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor(np.abs(a.data), parents=(a,), op="abs", backward_fn=lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), op="relu", backward_fn=lambda g: (g * mask,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(np.sum(a.data, axis=axis), parents=(a,), op="sum", backward_fn=bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), np.asarray(1.0 / count, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,), op="reshape", backward_fn=lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor(
        np.transpose(a.data, axes), parents=(a,), op="transpose", backward_fn=lambda g: (np.transpose(g, inv),)
    )


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return Tensor(a.data[index], parents=(a,), op="getitem", backward_fn=bw)


def straight_through(shadow: Tensor, value: np.ndarray) -> Tensor:
    """Return ``value`` in the forward pass; pass gradients to ``shadow`` unchanged."""
    if value.shape != shadow.shape:
        raise ShapeError(f"straight-through value shape {value.shape} != shadow shape {shadow.shape}")
    return Tensor(
        np.asarray(value, dtype=shadow.dtype), parents=(shadow,), op="straight_through", backward_fn=lambda g: (g,)
    )


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense product of a (..., k, m) and b (m, n)."""
    a = _lift(a, np.float32)
    b = _lift(b, a.dtype)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor(ad @ bd, parents=(a, b), op="matmul", backward_fn=bw)


def _norm_padding(padding: Padding) -> Tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        return (int(padding),) * 4
    top, bottom, left, right = padding
    return int(top), int(bottom), int(left), int(right)


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: Padding = 0) -> np.ndarray:
    """Unroll patches: (b, c, H, W) -> (b, Ho, Wo, c, kh, kw)."""
    pt, pb, pl, pr = _norm_padding(padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: Padding = 0, groups: int = 1) -> Tensor:
    """Grouped cross-correlation, NCHW input, weights (c_out, c_in/groups, kh, kw)."""
    w = _lift(w, x.dtype)
    b, c_in, H, W = x.shape
    c_out, cg, kh, kw = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
    if cg != c_in // groups:
        raise ShapeError(f"weight expects {cg} channels per group, input has {c_in // groups}")
    pt, pb, pl, pr = _norm_padding(padding)
    Ho = conv_output_size(H, kh, stride, pt, pb)
    Wo = conv_output_size(W, kw, stride, pl, pr)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    og = c_out // groups
    cols = im2col(x.data, kh, kw, stride, (pt, pb, pl, pr))  # b, Ho, Wo, c_in, kh, kw
    flat_cols = []
    out = np.empty((b, c_out, Ho, Wo), dtype=x.dtype)
    for gi in range(groups):
        cg_cols = np.ascontiguousarray(cols[:, :, :, gi * cg:(gi + 1) * cg]).reshape(b * Ho * Wo, cg * kh * kw)
        wg = w.data[gi * og:(gi + 1) * og].reshape(og, -1)
        out[:, gi * og:(gi + 1) * og] = (cg_cols @ wg.T).reshape(b, Ho, Wo, og).transpose(0, 3, 1, 2)
        flat_cols.append(cg_cols)

    def bw(g):
        gx = np.zeros((b, c_in, H + pt + pb, W + pl + pr), dtype=g.dtype)
        gw = np.empty_like(w.data)
        for gi in range(groups):
            gg = g[:, gi * og:(gi + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
            wg = w.data[gi * og:(gi + 1) * og].reshape(og, -1)
            gw[gi * og:(gi + 1) * og] = (gg.T @ flat_cols[gi]).reshape(og, cg, kh, kw)
            dcols = (gg @ wg).reshape(b, Ho, Wo, cg, kh, kw)
            target = gx[:, gi * cg:(gi + 1) * cg]
            for i in range(kh):
                for j in range(kw):
                    target[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
        gx = gx[:, :, pt:pt + H, pl:pl + W]
        return gx, gw

    return Tensor(out, parents=(x, w), op="conv2d", backward_fn=bw)


def conv_transpose2d(y: Tensor, w: Tensor, stride: int) -> Tensor:
    """Transposed convolution with non-overlapping p x p kernels (stride == kernel size).

    Weights are (r, c_out, p, p); output is (b, c_out, H'*p, W'*p). This is the
    adjoint of ``conv2d(x, w, stride=p)``.
    """
    w = _lift(w, y.dtype)
    b, r, Hp, Wp = y.shape
    r_w, c_out, p, p2 = w.shape
    if p != p2 or stride != p:
        raise ConfigError(f"conv_transpose2d needs square kernel equal to stride, got kernel {p}x{p2}, stride {stride}")
    if r_w != r:
        raise ShapeError(f"weight has {r_w} input channels, data has {r}")
    y2 = y.data.transpose(0, 2, 3, 1).reshape(-1, r)
    w2 = w.data.reshape(r, c_out * p * p)
    out = (y2 @ w2).reshape(b, Hp, Wp, c_out, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c_out, Hp * p, Wp * p)

    def bw(g):
        g2 = g.reshape(b, c_out, Hp, p, Wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c_out * p * p)
        gy = (g2 @ w2.T).reshape(b, Hp, Wp, r).transpose(0, 3, 1, 2)
        gw = (y2.T @ g2).reshape(r, c_out, p, p)
        return gy, gw

    return Tensor(out, parents=(y, w), op="conv_transpose2d", backward_fn=bw)


def mul_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply channel ``c`` (axis 1) of ``x`` by ``scale[c]``."""
    scale = _lift(scale, x.dtype)
    r = x.shape[1]
    if scale.data.size != r:
        raise ShapeError(f"scale has {scale.data.size} entries, input has {r} channels")
    bshape = (1, r) + (1,) * (x.ndim - 2)
    return mul(x, reshape(scale, bshape))


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel (axis 1) batch normalization.

    In training mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased variance).
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch norm parameters must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            n = x.data.size // C
            dx = (
                inv_std.reshape(bshape)
                / n
                * (n * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor(out, parents=(x, gamma, beta), op="batch_norm", backward_fn=bw)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def check_distribution(targets: np.ndarray, tol: float = 1e-6) -> None:
    if targets.ndim != 2:
        raise ValidationError(f"targets must be a (batch, classes) matrix, got shape {targets.shape}")
    if (targets < 0).any():
        raise ValidationError("targets contain negative entries")
    bad = np.abs(targets.sum(axis=1) - 1.0) > tol
    if bad.any():
        raise ValidationError(f"target row {int(np.argmax(bad))} does not sum to 1")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``; targets may be soft."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    check_distribution(targets)
    b = logits.shape[0]
    logp = log_softmax(logits.data.astype(np.float64))
    loss = -(targets * logp).sum() / b
    t = targets.astype(logits.dtype)
    probs = np.exp(logp).astype(logits.dtype)

    def bw(g):
        return (g * (probs - t) / b,)

    return Tensor(np.asarray(loss, dtype=logits.dtype), parents=(logits,), op="softmax_cross_entropy", backward_fn=bw)


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out
