"""Add-only inference for exported SPN layers.

Packed layout: each ternary entry takes 2 bits (00 -> 0, 01 -> +1, 10 -> -1,
11 invalid). Entries are stored row-major; entry ``j`` of a row lives in
64-bit word ``j // 32`` at bit offset ``2 * (j % 32)``. Every row starts on a
fresh word (unused high bits are zero) and words are little-endian on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import im2col
from .errors import ShapeError, UsageError, ValidationError
from .layers import (BatchNorm, Conv2d, Dense, Flatten, GlobalAvgPool, Module, ReLU, Sequential, SpnGemm,
                     SpnLayer, StConv2d, StDense)
from .quantize import TernaryMatrix

ENTRIES_PER_WORD = 32
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


@dataclass
class MultCounter:
    """Per-call instrumentation; merge counters from concurrent calls with ``+=``."""

    multiplications: int = 0  # the a-tilde products of SPN layers
    additions: int = 0
    dense_multiplications: int = 0  # products in layers left uncompressed

    def __iadd__(self, other: "MultCounter") -> "MultCounter":
        self.multiplications += other.multiplications
        self.additions += other.additions
        self.dense_multiplications += other.dense_multiplications
        return self


@dataclass(frozen=True)
class PackedTernary:
    rows: int
    cols: int
    words: np.ndarray  # uint64, shape (rows, words_per_row)

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape != (self.rows, self.words_per_row(self.cols)):
            raise ValidationError(f"payload shape {words.shape} does not fit a {self.rows}x{self.cols} matrix")
        codes = _codes(words)
        if (codes == 3).any():
            raise ValidationError("payload contains the reserved 2-bit pattern 11")
        if codes[:, self.cols:].any():
            raise ValidationError("row padding bits must be zero")
        object.__setattr__(self, "words", words)

    @staticmethod
    def words_per_row(cols: int) -> int:
        return -(-cols // ENTRIES_PER_WORD)

    @classmethod
    def pack(cls, m: Union[TernaryMatrix, np.ndarray]) -> "PackedTernary":
        entries = m.entries if isinstance(m, TernaryMatrix) else TernaryMatrix(np.asarray(m)).entries
        if entries.ndim != 2:
            raise ShapeError(f"pack expects a matrix, got shape {entries.shape}")
        rows, cols = entries.shape
        wpr = cls.words_per_row(cols)
        codes = np.zeros((rows, wpr * ENTRIES_PER_WORD), dtype=np.uint64)
        codes[:, :cols] = np.where(entries == 1, 1, np.where(entries == -1, 2, 0))
        shifts = (2 * np.arange(ENTRIES_PER_WORD, dtype=np.uint64))
        words = np.bitwise_or.reduce(codes.reshape(rows, wpr, ENTRIES_PER_WORD) << shifts, axis=2)
        return cls(rows, cols, words)

    def unpack(self) -> TernaryMatrix:
        return TernaryMatrix(_DECODE[_codes(self.words)[:, :self.cols]])

    def to_bytes(self) -> bytes:
        return self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, rows: int, cols: int, data: bytes) -> "PackedTernary":
        words = np.frombuffer(data, dtype="<u8")
        if words.size != rows * cls.words_per_row(cols):
            raise ValidationError(f"{len(data)} bytes do not hold a packed {rows}x{cols} matrix")
        return cls(rows, cols, words.astype(np.uint64).reshape(rows, -1))

    @property
    def nbytes(self) -> int:
        return self.words.size * 8

    def __eq__(self, other):
        if not isinstance(other, PackedTernary):
            return NotImplemented
        return (self.rows, self.cols) == (other.rows, other.cols) and np.array_equal(self.words, other.words)

    __hash__ = None


def _codes(words: np.ndarray) -> np.ndarray:
    shifts = 2 * np.arange(ENTRIES_PER_WORD, dtype=np.uint64)
    codes = (words[:, :, None] >> shifts) & np.uint64(3)
    return codes.reshape(words.shape[0], -1).astype(np.int8)


def ternary_apply(w: PackedTernary, x: np.ndarray, counter: Optional[MultCounter] = None) -> np.ndarray:
    """``y = T x`` for the packed pattern ``T`` using additions and subtractions only.

    ``x`` has shape (..., cols); the result (..., rows) is float32. Columns are
    visited in order and each one is added to (or subtracted from) the rows
    where its sign is nonzero, so the accumulation order is fixed.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != w.cols:
        raise ShapeError(f"input has {x.shape[-1]} features, packed matrix has {w.cols} columns")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, w.cols)
    signs = w.unpack().entries
    y = np.zeros((x2.shape[0], w.rows), dtype=np.float32)
    for j in range(w.cols):
        col = x2[:, j:j + 1]
        pos, neg = signs[:, j] == 1, signs[:, j] == -1
        if pos.any():
            np.add(y, col, out=y, where=pos)
        if neg.any():
            np.subtract(y, col, out=y, where=neg)
    if counter is not None:
        # the first nonzero term of a row is a copy, not an addition
        adds = int(np.count_nonzero(signs)) - int(np.count_nonzero(signs.any(axis=1)))
        counter.additions += adds * x2.shape[0]
    return y.reshape(lead + (w.rows,))


# ---------------------------------------------------------------------------
# Exported layers
# ---------------------------------------------------------------------------


@dataclass
class ExportedSpn:
    """An SPN layer with every scale folded into ``a_scale`` (and BN shift into ``a_bias``).

    ``kind`` is ``"gemm"`` (input (batch, m, n)), ``"dense"`` (input (batch, m))
    or ``"conv"`` (input (batch, c_in, H, W)). For conv, ``W_b`` holds one
    packed (r/g) x (c_in/g * K * K) block per group and ``W_c`` is the
    (c_out * p * p) x r matrix with rows ordered (channel, row offset, column offset).
    """

    kind: str
    params: dict
    W_b: List[PackedTernary]
    W_c: PackedTernary
    a_scale: np.ndarray
    a_bias: np.ndarray = field(default=None)

    def __post_init__(self):
        self.a_scale = np.asarray(self.a_scale, dtype=np.float32)
        r = self.W_c.cols
        self.a_bias = (np.zeros(r, np.float32) if self.a_bias is None
                       else np.asarray(self.a_bias, dtype=np.float32))
        if self.a_scale.shape != (r,) or self.a_bias.shape != (r,):
            raise ValidationError("a_scale and a_bias must have one entry per hidden unit")
        if sum(b.rows for b in self.W_b) != r:
            raise ValidationError("W_b blocks must produce r hidden units")

    @property
    def r(self) -> int:
        return self.W_c.cols

    def hidden(self, z: np.ndarray, counter: Optional[MultCounter]) -> np.ndarray:
        # the only multiplications of the layer: one per hidden unit and patch
        if counter is not None:
            counter.multiplications += z.size
        return z * self.a_scale + self.a_bias


def _frozen_pattern(layer: SpnLayer) -> Tuple[np.ndarray, float, np.ndarray, float]:
    for q in layer.quant_states():
        if not q.active:
            raise UsageError("layer is not quantized; train through the quantized phase (or freeze it) "
                             "before exporting")
    b, c = layer.W_b.ternary(), layer.W_c.ternary()
    return b.entries, layer.W_b.last_alpha, c.entries, layer.W_c.last_alpha


def export_layer(layer: SpnLayer) -> ExportedSpn:
    """Fold ``alpha_b * alpha_c`` (and any batch norm after W_b) into the hidden scaling."""
    Tb, ab, Tc, ac = _frozen_pattern(layer)
    a = layer.a_tilde.data.astype(np.float64)
    if isinstance(layer, StConv2d):
        scale, shift = (np.ones(layer.r), np.zeros(layer.r)) if layer.bn is None else layer.bn.affine()
        a_scale = ab * ac * a * scale
        a_bias = ac * a * shift
        rg = layer.r // layer.g
        blocks = [PackedTernary.pack(Tb[i * rg:(i + 1) * rg].reshape(rg, -1)) for i in range(layer.g)]
        wc = PackedTernary.pack(Tc.transpose(1, 2, 3, 0).reshape(-1, layer.r))
        params = dict(c_in=layer.c_in, c_out=layer.c_out, k=layer.k, r=layer.r, p=layer.p, g=layer.g,
                      stride=layer.stride, pad=layer.pad)
        return ExportedSpn("conv", params, blocks, wc, a_scale, a_bias)
    if isinstance(layer, SpnGemm):
        kind = "dense" if isinstance(layer, StDense) else "gemm"
        params = dict(k=layer.k, m=layer.m, n=layer.n, r=layer.r)
        return ExportedSpn(kind, params, [PackedTernary.pack(Tb)], PackedTernary.pack(Tc), ab * ac * a)
    raise UsageError(f"cannot export {type(layer).__name__}")


def spn_infer(layer: ExportedSpn, x: np.ndarray, counter: Optional[MultCounter] = None) -> np.ndarray:
    if not isinstance(layer, ExportedSpn):
        raise UsageError("spn_infer needs an exported layer; call export_layer first")
    x = np.asarray(x, dtype=np.float32)
    P = layer.params
    if layer.kind == "conv":
        return _conv_infer(layer, x, counter)
    if layer.kind == "gemm":
        if x.ndim != 3 or x.shape[1:] != (P["m"], P["n"]):
            raise ShapeError(f"expected input (batch, {P['m']}, {P['n']}), got {x.shape}")
        b = x.shape[0]
        v = x.transpose(0, 2, 1).reshape(b, -1)
        y = _gemm_core(layer, v, counter)
        return y.reshape(b, P["n"], P["k"]).transpose(0, 2, 1)
    if x.ndim != 2 or x.shape[1] != P["m"]:
        raise ShapeError(f"expected input (batch, {P['m']}), got {x.shape}")
    return _gemm_core(layer, x, counter)


def _gemm_core(layer: ExportedSpn, v: np.ndarray, counter: Optional[MultCounter]) -> np.ndarray:
    z = ternary_apply(layer.W_b[0], v, counter)
    return ternary_apply(layer.W_c, layer.hidden(z, counter), counter)


def conv_geometry(P: dict, H: int, W: int) -> Tuple[int, int, int, int, Tuple[int, int, int, int]]:
    """(Ho, Wo, patch rows, patch cols, padding) of an SPN conv on an H x W input."""
    k, p, s, pad = P["k"], P["p"], P["stride"], P["pad"]
    K = (p - 1) * s + k
    Ho, Wo = (H + 2 * pad - k) // s + 1, (W + 2 * pad - k) // s + 1
    ph, pw = -(-Ho // p), -(-Wo // p)
    extra_h = max(0, (ph - 1) * p * s + K - (H + 2 * pad))
    extra_w = max(0, (pw - 1) * p * s + K - (W + 2 * pad))
    return Ho, Wo, ph, pw, (pad, pad + extra_h, pad, pad + extra_w)


def _conv_infer(layer: ExportedSpn, x: np.ndarray, counter: Optional[MultCounter]) -> np.ndarray:
    P = layer.params
    if x.ndim != 4 or x.shape[1] != P["c_in"]:
        raise ShapeError(f"expected input (batch, {P['c_in']}, H, W), got {x.shape}")
    b, _, H, W = x.shape
    p, g, c_out = P["p"], P["g"], P["c_out"]
    K = (p - 1) * P["stride"] + P["k"]
    Ho, Wo, ph, pw, padding = conv_geometry(P, H, W)
    cols = im2col(x, K, K, p * P["stride"], padding)[:, :ph, :pw]  # b, ph, pw, c_in, K, K
    cg = P["c_in"] // g
    cols = cols.reshape(b * ph * pw, g, cg * K * K)
    z = np.concatenate([ternary_apply(blk, cols[:, i], counter) for i, blk in enumerate(layer.W_b)], axis=1)
    out = ternary_apply(layer.W_c, layer.hidden(z, counter), counter)
    out = out.reshape(b, ph, pw, c_out, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c_out, ph * p, pw * p)
    return np.ascontiguousarray(out[:, :, :Ho, :Wo])


# ---------------------------------------------------------------------------
# Whole models
# ---------------------------------------------------------------------------


@dataclass
class ExportedModel:
    """A sequence of inference ops; uncompressed layers keep full-precision weights."""

    ops: List[Tuple[str, object]]

    def forward(self, x: np.ndarray, counter: Optional[MultCounter] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        for kind, op in self.ops:
            if kind == "spn":
                x = spn_infer(op, x, counter)
            elif kind == "dense":
                w, b = op
                if counter is not None:
                    counter.dense_multiplications += x.shape[0] * w.size
                x = x @ w.T + (b if b is not None else 0)
            elif kind == "conv":
                raise UsageError("full-precision convolutions are not supported by the add-only runtime")
            elif kind == "affine":
                scale, shift = op
                if counter is not None:
                    counter.dense_multiplications += x.size
                shape = (1, -1) + (1,) * (x.ndim - 2)
                x = x * scale.reshape(shape) + shift.reshape(shape)
            elif kind == "relu":
                x = np.maximum(x, 0)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif kind == "global_avgpool":
                x = x.mean(axis=(2, 3))
            else:
                raise ValidationError(f"unknown op {kind!r}")
        return x


def export_model(model: Module) -> ExportedModel:
    layers: Sequence[Module] = model.layers if isinstance(model, Sequential) else [model]
    ops: List[Tuple[str, object]] = []
    for layer in layers:
        if isinstance(layer, SpnLayer):
            ops.append(("spn", export_layer(layer)))
        elif isinstance(layer, Dense):
            ops.append(("dense", (layer.weight.data.astype(np.float32),
                                  None if layer.bias is None else layer.bias.data.astype(np.float32))))
        elif isinstance(layer, BatchNorm):
            scale, shift = layer.affine()
            ops.append(("affine", (scale.astype(np.float32), shift.astype(np.float32))))
        elif isinstance(layer, ReLU):
            ops.append(("relu", None))
        elif isinstance(layer, Flatten):
            ops.append(("flatten", None))
        elif isinstance(layer, GlobalAvgPool):
            ops.append(("global_avgpool", None))
        elif isinstance(layer, Conv2d):
            raise UsageError("full-precision Conv2d layers cannot be exported; replace them with StConv2d")
        else:
            raise UsageError(f"cannot export layer type {type(layer).__name__}")
    return ExportedModel(ops)
