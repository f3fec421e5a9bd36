"""Network layers, including the sum-product (SPN) replacements for dense and conv layers.

An SPN layer computes ``W_c [(W_b x) * a_tilde]``: ternary ``W_b`` and ``W_c``
need only additions, so the ``r`` products with ``a_tilde`` are the only
multiplications per evaluation.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError, ShapeError
from .quantize import QuantState, TernaryMatrix


class Parameter(Tensor):
    """Trainable leaf. ``decay`` controls whether weight decay applies."""

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    training: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, QuantState):
                yield prefix + name, value.shadow
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, list):
                yield from (v for v in value if isinstance(v, Module))

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (float64 copies serve as test oracles)."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, QuantState):
                    value.shadow.data = value.shadow.data.astype(dtype)
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(m, name, value.astype(dtype))
        return self


def check_finite(x: Tensor, where: str) -> None:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"non-finite values at {where}")


# ---------------------------------------------------------------------------
# Plain full-precision layers
# ---------------------------------------------------------------------------


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        rng = np.random.default_rng(rng)
        bound = math.sqrt(6.0 / in_features)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)).astype(np.float32))
        self.bias = Parameter(np.zeros(out_features, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=None, groups=1, rng=None):
        rng = np.random.default_rng(rng)
        self.c_in, self.c_out, self.k, self.stride, self.groups = c_in, c_out, k, stride, groups
        self.padding = (k - 1) // 2 if padding is None else padding
        std = math.sqrt(2.0 / (c_in // groups * k * k))
        self.weight = Parameter((rng.standard_normal((c_out, c_in // groups, k, k)) * std).astype(np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.padding, self.groups)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.reshape(x, (x.shape[0], -1))


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.tmean(x, axis=(2, 3))


class BatchNorm(Module):
    """Batch normalization over axis 1 (features or channels)."""

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(num_features, np.float32))
        self.beta = Parameter(np.zeros(num_features, np.float32))
        self.running_mean = np.zeros(num_features, np.float32)
        self.running_var = np.ones(num_features, np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Inference-mode (scale, shift) so that ``bn(x) == scale * x + shift``."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - self.running_mean * scale


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        check_finite(x, "model input")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            check_finite(x, f"output of layer {i} ({type(layer).__name__})")
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


# ---------------------------------------------------------------------------
# SPN layers
# ---------------------------------------------------------------------------


def _shadow(shape, rng, scale=1.0) -> Parameter:
    return Parameter((rng.standard_normal(shape) * scale).astype(np.float32))


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of the trailing two axes."""
    return np.swapaxes(m, -1, -2).reshape(m.shape[:-2] + (-1,))


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


class SpnLayer(Module):
    """Shared bookkeeping for SPN layers: quantizers, ``a_tilde`` and the multiplication tally."""

    r: int
    W_b: QuantState
    W_c: QuantState
    a_tilde: Parameter
    mult_count: int = 0

    def quant_states(self) -> List[QuantState]:
        return [self.W_b, self.W_c]

    def reset_tally(self) -> None:
        self.mult_count = 0

    def set_quant_mode(self, mode: str) -> None:
        for q in self.quant_states():
            q.mode = mode


class SpnGemm(SpnLayer):
    """SPN for the product ``A @ B`` with ``A`` (k x m) folded into ``a_tilde``.

    Input ``B`` is a batch of (m, n) matrices, output a batch of (k, n) matrices.
    ``W_b`` is r x (m n) and ``W_c`` is (k n) x r; vectorization stacks columns.
    """

    def __init__(self, k: int, m: int, n: int, r: int, rng=None, mode: str = "adaptive"):
        if min(k, m, n, r) < 1:
            raise ConfigError("SPN dimensions and r must be positive")
        rng = np.random.default_rng(rng)
        self.k, self.m, self.n, self.r = k, m, n, r
        self.W_b = QuantState(_shadow((r, m * n), rng), mode=mode)
        self.W_c = QuantState(_shadow((k * n, r), rng), mode=mode)
        self.a_tilde = Parameter(
            (rng.standard_normal(r) * math.sqrt(2.0 / (r * m * n))).astype(np.float32), decay=False
        )
        self.mult_count = 0

    def spn(self, x: Tensor) -> Tensor:
        """Evaluate on vectorized inputs (batch, m n) -> (batch, k n)."""
        if x.ndim != 2 or x.shape[1] != self.m * self.n:
            raise ShapeError(f"expected input of shape (batch, {self.m * self.n}), got {x.shape}")
        hidden = ad.matmul(x, ad.transpose(self.W_b.view()))
        hidden = ad.mul(hidden, self.a_tilde)
        self.mult_count += self.r * x.shape[0]
        return ad.matmul(hidden, ad.transpose(self.W_c.view()))

    def forward(self, B: Tensor) -> Tensor:
        if B.ndim != 3 or B.shape[1:] != (self.m, self.n):
            raise ShapeError(f"expected B of shape (batch, {self.m}, {self.n}), got {B.shape}")
        b = B.shape[0]
        x = ad.reshape(ad.transpose(B, (0, 2, 1)), (b, self.m * self.n))
        y = self.spn(x)
        return ad.transpose(ad.reshape(y, (b, self.n, self.k)), (0, 2, 1))

    @classmethod
    def from_bilinear(cls, W_a, W_b, W_c, A: np.ndarray, n: int) -> "SpnGemm":
        """Fixed SPN from ternary (W_a, W_b, W_c) with ``a_tilde = W_a vec(A)``."""
        W_a, W_b, W_c = (np.asarray(w, dtype=np.int8) for w in (W_a, W_b, W_c))
        A = np.asarray(A, dtype=np.float64)
        k, m = A.shape
        r = W_a.shape[0]
        if W_a.shape != (r, k * m) or W_b.shape != (r, m * n) or W_c.shape != (k * n, r):
            raise ShapeError("bilinear weight shapes do not match A and n")
        layer = cls(k, m, n, r, rng=0)
        layer.W_b.set_frozen(TernaryMatrix(W_b), 1.0)
        layer.W_c.set_frozen(TernaryMatrix(W_c), 1.0)
        layer.a_tilde.data = (W_a.astype(np.float64) @ vec(A)).astype(np.float32)
        return layer


class StDense(SpnGemm):
    """SPN replacement for a fully connected layer ``y = A x`` (A is out x in)."""

    def __init__(self, in_features: int, out_features: int, r: int, rng=None, mode: str = "adaptive"):
        super().__init__(out_features, in_features, 1, r, rng=rng, mode=mode)
        self.in_features, self.out_features = in_features, out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.spn(x)


def naive_bilinear(k: int, m: int, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ternary (W_a, W_b, W_c) computing the k x m by m x n product with r = kmn.

    Hidden unit (i, l, j) multiplies A[i, l] by B[l, j] and feeds C[i, j].
    """
    r = k * m * n
    W_a = np.zeros((r, k * m), np.int8)
    W_b = np.zeros((r, m * n), np.int8)
    W_c = np.zeros((k * n, r), np.int8)
    h = 0
    for j in range(n):
        for i in range(k):
            for l in range(m):
                W_a[h, i + l * k] = 1
                W_b[h, l + j * m] = 1
                W_c[i + j * k, h] = 1
                h += 1
    return W_a, W_b, W_c


def exact_construction(A: np.ndarray, n: int = 1) -> SpnGemm:
    """SPN computing ``A @ B`` exactly for any (m, n) matrix B, using r = k m n."""
    A = np.asarray(A)
    k, m = A.shape
    return SpnGemm.from_bilinear(*naive_bilinear(k, m, n), A, n)


def same_padding(k: int) -> int:
    if k % 2 == 0:
        raise ConfigError(f"kernel size {k} must be odd for symmetric padding")
    return (k - 1) // 2


class StConv2d(SpnLayer):
    """SPN replacement for a k x k convolution producing p x p output patches.

    Pipeline: grouped conv with ternary ``W_b`` (kernel ``(p-1)*stride + k``,
    stride ``p*stride``) -> optional batch norm -> per-channel scaling by
    ``a_tilde`` -> stride-p transposed conv with ternary ``W_c``.
    For stride 1 the W_b kernel is ``p - 1 + k``. Inputs whose size is not a
    multiple of p are zero-padded at the bottom/right and the output is cropped.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        r: int,
        p: int = 1,
        g: int = 1,
        stride: int = 1,
        bn: bool = True,
        rng=None,
        mode: str = "adaptive",
    ):
        if min(c_in, c_out, k, r, p, g, stride) < 1:
            raise ConfigError("conv dimensions, r, p, g and stride must be positive")
        if c_in % g or r % g:
            raise ConfigError(f"groups g={g} must divide c_in={c_in} and r={r}")
        rng = np.random.default_rng(rng)
        self.c_in, self.c_out, self.k, self.r, self.p, self.g, self.stride = c_in, c_out, k, r, p, g, stride
        self.pad = same_padding(k)
        K = self.kernel_b
        fan_in = c_in // g * K * K
        self.W_b = QuantState(_shadow((r, c_in // g, K, K), rng), mode=mode)
        self.W_c = QuantState(_shadow((r, c_out, p, p), rng), mode=mode)
        self.a_tilde = Parameter(
            (rng.standard_normal(r) * math.sqrt(2.0 / (fan_in * r))).astype(np.float32), decay=False
        )
        self.bn = BatchNorm(r) if bn else None
        self.mult_count = 0

    @property
    def kernel_b(self) -> int:
        return (self.p - 1) * self.stride + self.k

    def output_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.k) // self.stride + 1

    def patch_grid(self, H: int, W: int) -> Tuple[int, int]:
        """Number of p x p output patches along each spatial axis."""
        return -(-self.output_size(H) // self.p), -(-self.output_size(W) // self.p)

    def _padding(self, H: int, W: int) -> Tuple[int, int, int, int]:
        ph, pw = self.patch_grid(H, W)
        step, K = self.p * self.stride, self.kernel_b
        extra_h = max(0, (ph - 1) * step + K - (H + 2 * self.pad))
        extra_w = max(0, (pw - 1) * step + K - (W + 2 * self.pad))
        return self.pad, self.pad + extra_h, self.pad, self.pad + extra_w

    def conv_b(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        z = ad.conv2d(x, self.W_b.view(), self.p * self.stride, self._padding(H, W), self.g)
        return self.bn(z) if self.bn is not None else z

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"expected input (batch, {self.c_in}, H, W), got {x.shape}")
        b, _, H, W = x.shape
        z = self.conv_b(x)
        ph, pw = z.shape[2:]
        z = ad.mul_channels(z, self.a_tilde)
        self.mult_count += self.r * ph * pw * b
        y = ad.conv_transpose2d(z, self.W_c.view(), self.p)
        Ho, Wo = self.output_size(H), self.output_size(W)
        if y.shape[2:] != (Ho, Wo):
            y = y[:, :, :Ho, :Wo]
        return y


def exact_conv_construction(weight: np.ndarray, p: int = 1, stride: int = 1) -> StConv2d:
    """SPN conv reproducing ``conv2d(x, weight, stride, padding=(k-1)/2)`` exactly.

    Uses r = k*k*c_in*c_out*p*p hidden units, one per (output offset, tap, channel pair).
    """
    weight = np.asarray(weight)
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ConfigError("kernel must be square")
    r = c_in * c_out * k * k * p * p
    layer = StConv2d(c_in, c_out, k, r, p=p, g=1, stride=stride, bn=False, rng=0)
    K = layer.kernel_b
    W_b = np.zeros((r, c_in, K, K), np.int8)
    W_c = np.zeros((r, c_out, p, p), np.int8)
    a = np.zeros(r, np.float64)
    h = 0
    for co in range(c_out):
        for u in range(p):
            for v in range(p):
                for ci in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            W_b[h, ci, u * stride + dy, v * stride + dx] = 1
                            W_c[h, co, u, v] = 1
                            a[h] = weight[co, ci, dy, dx]
                            h += 1
    layer.W_b.set_frozen(TernaryMatrix(W_b), 1.0)
    layer.W_c.set_frozen(TernaryMatrix(W_c), 1.0)
    layer.a_tilde.data = a.astype(np.float32)
    return layer


def spn_layers(model: Module) -> List[SpnLayer]:
    return [m for m in model.modules() if isinstance(m, SpnLayer)]


def total_multiplications(model: Module) -> int:
    return sum(layer.mult_count for layer in spn_layers(model))


def quant_summary(model: Module) -> List[Dict[str, float]]:
    """Most recent (delta, alpha) of every quantized weight, for logging."""
    out = []
    for i, layer in enumerate(spn_layers(model)):
        out.append(
            {
                "layer": i,
                "kind": type(layer).__name__,
                "delta_b": layer.W_b.last_delta,
                "alpha_b": layer.W_b.last_alpha,
                "delta_c": layer.W_c.last_delta,
                "alpha_c": layer.W_c.last_alpha,
            }
        )
    return out
