"""Ternary weight quantization with full-precision shadow weights.

Every forward pass re-quantizes the shadow weight: entries above the threshold
``delta = 0.7 * mean(|W|)`` map to +1, entries below ``-delta`` to -1 and the
rest to 0; the scale ``alpha`` is the mean magnitude over the surviving
entries. Gradients flow straight through the quantizer to the shadow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, straight_through
from .errors import UsageError, ValidationError

THRESHOLD_FACTOR = 0.7
FIXED_DELTA = 0.5
FIXED_ALPHA = 1.0


class DegenerateQuantizationWarning(UserWarning):
    """Every entry of a weight quantized to zero."""


@dataclass(frozen=True)
class TernaryMatrix:
    """Integer weights in {-1, 0, +1} with an optional positive scale.

    ``entries`` may carry a convolution kernel shape; ``rows``/``cols`` refer
    to the matrix obtained by flattening all trailing axes.
    """

    entries: np.ndarray
    scale: Optional[float] = None

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.size == 0:
            raise ValidationError("ternary matrix must be non-empty")
        if not np.isin(entries, (-1, 0, 1)).all():
            raise ValidationError("ternary matrix entries must lie in {-1, 0, 1}")
        if self.scale is not None and not self.scale > 0:
            raise ValidationError(f"ternary scale must be positive, got {self.scale}")
        object.__setattr__(self, "entries", entries.astype(np.int8))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.entries.shape

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return int(np.prod(self.entries.shape[1:])) if self.entries.ndim > 1 else 1

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.entries))

    def dense(self, dtype=np.float32) -> np.ndarray:
        scale = 1.0 if self.scale is None else self.scale
        return self.entries.astype(dtype) * dtype(scale)

    def __eq__(self, other):
        if not isinstance(other, TernaryMatrix):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.entries, other.entries)

    __hash__ = None


def ternarize(shadow: np.ndarray) -> Tuple[TernaryMatrix, float, float]:
    """Quantize ``shadow`` to (pattern, delta, alpha).

    The pattern carries no scale; ``alpha`` is returned separately and is 0
    (with a :class:`DegenerateQuantizationWarning`) when nothing survives the
    threshold.
    """
    w = np.asarray(shadow)
    if w.size == 0:
        raise ValidationError("cannot ternarize an empty weight")
    mag = np.abs(w.astype(np.float64))
    delta = THRESHOLD_FACTOR * float(mag.sum()) / w.size
    pattern = np.zeros(w.shape, dtype=np.int8)
    pattern[w > delta] = 1
    pattern[w < -delta] = -1
    support = pattern != 0
    nnz = int(support.sum())
    if nnz == 0:
        warnings.warn("all weights quantized to zero", DegenerateQuantizationWarning, stacklevel=2)
        return TernaryMatrix(pattern), delta, 0.0
    alpha = float(mag[support].sum()) / nnz
    return TernaryMatrix(pattern), delta, alpha


def ternarize_fixed(shadow: np.ndarray, delta: float = FIXED_DELTA) -> TernaryMatrix:
    """Fixed-threshold variant (alpha is implicitly ``FIXED_ALPHA``)."""
    w = np.asarray(shadow)
    pattern = np.zeros(w.shape, dtype=np.int8)
    pattern[w > delta] = 1
    pattern[w < -delta] = -1
    return TernaryMatrix(pattern)


def alpha_optimal(shadow: np.ndarray, pattern: TernaryMatrix) -> float:
    """Least-squares scale for a fixed pattern: argmin_a ||shadow - a * pattern||_F^2."""
    w = np.asarray(shadow, dtype=np.float64)
    t = pattern.entries.astype(np.float64)
    if w.shape != t.shape:
        raise ValidationError(f"shadow shape {w.shape} != pattern shape {t.shape}")
    denom = float((t * t).sum())
    if denom == 0:
        raise ValidationError("pattern has empty support; optimal scale undefined")
    return float((w * t).sum()) / denom


def frobenius_objective(shadow: np.ndarray, pattern: TernaryMatrix, alpha: float) -> float:
    diff = np.asarray(shadow, dtype=np.float64) - alpha * pattern.entries.astype(np.float64)
    return float((diff * diff).sum())


@dataclass
class QuantState:
    """A full-precision shadow weight plus the switches controlling its quantized view.

    ``mode`` is ``"adaptive"`` (threshold and scale from the shadow) or
    ``"fixed"`` (delta 0.5, alpha 1).
    """

    shadow: Tensor
    active: bool = False
    frozen: bool = False
    mode: str = "adaptive"
    last_delta: float = 0.0
    last_alpha: float = 0.0
    pattern: Optional[TernaryMatrix] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValidationError(f"unknown quantization mode {self.mode!r}")
        if self.frozen and not self.active:
            raise ValidationError("a frozen quantizer must also be active")

    def quantize(self) -> Tuple[TernaryMatrix, float]:
        if self.mode == "fixed":
            pattern, alpha = ternarize_fixed(self.shadow.data), FIXED_ALPHA
            self.last_delta = FIXED_DELTA
        else:
            pattern, self.last_delta, alpha = ternarize(self.shadow.data)
        self.last_alpha = alpha
        return pattern, alpha

    def activate(self) -> None:
        self.active = True

    def freeze(self) -> None:
        """Snapshot the current ternary pattern and scale; the shadow is no longer consulted."""
        if self.frozen:
            return
        if not self.active:
            raise UsageError("activate quantization before freezing")
        self.pattern, alpha = self.quantize()
        self.last_alpha = alpha
        self.frozen = True

    def set_frozen(self, pattern: TernaryMatrix, alpha: float) -> None:
        if pattern.shape != self.shadow.shape:
            raise ValidationError(f"pattern shape {pattern.shape} != weight shape {self.shadow.shape}")
        self.pattern = pattern
        self.last_alpha = float(alpha)
        self.active = True
        self.frozen = True

    def quantized_view(self) -> np.ndarray:
        """Effective weight as an array (no graph)."""
        if not self.active:
            return self.shadow.data
        if self.frozen:
            return self.pattern.dense(self.shadow.dtype.type) * self.shadow.dtype.type(self.last_alpha)
        pattern, alpha = self.quantize()
        return pattern.entries.astype(self.shadow.dtype) * self.shadow.dtype.type(alpha)

    def view(self) -> Tensor:
        """Effective weight as a graph node.

        Inactive: the shadow itself. Active: a straight-through node whose value
        is ``alpha * pattern``. Frozen: a constant, so the shadow gets no gradient.
        """
        if not self.active:
            return self.shadow
        if self.frozen:
            return Tensor(self.quantized_view())
        return straight_through(self.shadow, self.quantized_view())

    def ternary(self) -> TernaryMatrix:
        """The current ternary pattern (frozen snapshot or fresh quantization)."""
        if self.frozen:
            return self.pattern
        if not self.active:
            raise UsageError("quantization is not active")
        return self.quantize()[0]


def ste_gradient(upstream: np.ndarray, state: QuantState) -> np.ndarray:
    """Gradient delivered to the shadow weight for an upstream gradient on its quantized view."""
    if state.frozen:
        return np.zeros_like(upstream)
    return upstream
