"""Operation and model-size accounting for full-precision vs SPN-compressed architectures.

Architectures are described by JSON documents (see ``archs/``). Counts are
per image. Convolutions are charged ``c_in*c_out*k^2*H'*W'`` multiplications
and additions in full precision and ``r*ceil(H'/p)*ceil(W'/p)`` multiplications
once compressed; ternary matrix applications are charged additions at the
dense upper bound (every ternary entry assumed nonzero).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import ValidationError

SCHEMA_VERSION = 1
BUNDLED = ("resnet20-cifar", "resnet18-imagenet", "resnet34-imagenet", "vgg7-cifar")

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class OpCount:
    multiplications: int = 0
    additions: int = 0
    ternary_params: int = 0
    fp_params: int = 0

    def __post_init__(self):
        if min(self.multiplications, self.additions, self.ternary_params, self.fp_params) < 0:
            raise ValidationError(f"operation counts must be nonnegative: {self}")

    @property
    def model_bytes(self) -> int:
        """2 bits per ternary weight, 4 bytes per full-precision value."""
        return -(-self.ternary_params * 2 // 8) + self.fp_params * 4

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(self.multiplications + other.multiplications, self.additions + other.additions,
                       self.ternary_params + other.ternary_params, self.fp_params + other.fp_params)

    def to_dict(self) -> dict:
        return {"multiplications": self.multiplications, "additions": self.additions,
                "ternary_params": self.ternary_params, "fp_params": self.fp_params,
                "model_bytes": self.model_bytes}


# ---------------------------------------------------------------------------
# Layer records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    bn: bool = True
    compressed: bool = True
    r_ratio: Optional[float] = None
    r: Optional[int] = None
    p: Optional[int] = None
    g: Optional[int] = None


@dataclass(frozen=True)
class FcSpec:
    name: str
    in_features: int
    out_features: int
    compressed: bool = False
    r: Optional[int] = None
    # compress only when the convolutions' r-ratio does not exceed this bound
    max_conv_r_ratio: Optional[float] = None


@dataclass(frozen=True)
class PoolSpec:
    name: str
    kind: str  # "maxpool" | "global_avgpool" | "flatten"
    k: int = 1
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ResidualSpec:
    name: str
    body: Tuple["LayerSpec", ...]
    shortcut: Tuple["LayerSpec", ...] = ()


LayerSpec = Union[ConvSpec, FcSpec, PoolSpec, ResidualSpec]


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    defaults: Dict[str, float] = field(default_factory=dict)


def _int(rec: dict, key: str, where: str, default=None, minimum: int = 0) -> int:
    if key not in rec:
        if default is None:
            raise ValidationError(f"{where}: missing field {key!r}")
        return default
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ValidationError(f"{where}: field {key!r} must be an integer >= {minimum}, got {v!r}")
    return v


def _opt_int(rec: dict, key: str, where: str) -> Optional[int]:
    return _int(rec, key, where, minimum=1) if rec.get(key) is not None else None


def _parse_layer(rec: dict, where: str) -> LayerSpec:
    if not isinstance(rec, dict) or "type" not in rec:
        raise ValidationError(f"{where}: layer record must be an object with a 'type'")
    kind = rec["type"]
    name = str(rec.get("name", where))
    if kind == "conv":
        r_ratio = rec.get("r_ratio")
        if r_ratio is not None and not (isinstance(r_ratio, (int, float)) and r_ratio > 0):
            raise ValidationError(f"{where}: r_ratio must be positive, got {r_ratio!r}")
        return ConvSpec(name, _int(rec, "c_in", where, minimum=1), _int(rec, "c_out", where, minimum=1),
                        _int(rec, "k", where, minimum=1), _int(rec, "stride", where, 1, 1),
                        _int(rec, "padding", where, 0), bool(rec.get("bn", True)),
                        bool(rec.get("compressed", True)), r_ratio,
                        _opt_int(rec, "r", where),
                        _opt_int(rec, "p", where),
                        _opt_int(rec, "g", where))
    if kind == "fc":
        spn = rec.get("spn")
        compressed = bool(rec.get("compressed", spn is not None))
        r = max_ratio = None
        if spn is not None:
            r = _int(spn, "r", where + ".spn", minimum=1)
            max_ratio = spn.get("max_conv_r_ratio")
        elif compressed:
            r = _int(rec, "r", where, minimum=1)
        return FcSpec(name, _int(rec, "in", where, minimum=1), _int(rec, "out", where, minimum=1),
                      compressed, r, max_ratio)
    if kind == "maxpool":
        return PoolSpec(name, kind, _int(rec, "k", where, minimum=1), _int(rec, "stride", where, 1, 1),
                        _int(rec, "padding", where, 0))
    if kind in ("global_avgpool", "flatten"):
        return PoolSpec(name, kind)
    if kind == "residual":
        body = tuple(_parse_layer(r, f"{where}.body[{i}]") for i, r in enumerate(rec.get("body", [])))
        if not body:
            raise ValidationError(f"{where}: residual block needs a non-empty body")
        sc = tuple(_parse_layer(r, f"{where}.shortcut[{i}]") for i, r in enumerate(rec.get("shortcut", [])))
        return ResidualSpec(name, body, sc)
    raise ValidationError(f"{where}: unknown layer type {kind!r}")


def parse_arch(doc: dict) -> ArchSpec:
    """Validate an architecture document and check that shapes chain; errors name the layer index."""
    if not isinstance(doc, dict):
        raise ValidationError("architecture spec must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version!r}")
    shape = doc.get("input")
    if not isinstance(shape, list) or len(shape) not in (1, 3) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise ValidationError("'input' must be [c, H, W] or [features] with positive integers")
    layers = tuple(_parse_layer(r, f"layers[{i}]") for i, r in enumerate(doc.get("layers", [])))
    spec = ArchSpec(str(doc.get("name", "unnamed")), tuple(shape), layers, dict(doc.get("defaults", {})))
    infer_shapes(spec)
    return spec


def load_arch(name_or_path: Union[str, Path]) -> ArchSpec:
    """Load a bundled spec by (prefix of) its name, or a JSON file."""
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        with open(path) as fh:
            return parse_arch(json.load(fh))
    matches = [b for b in BUNDLED if b == name_or_path or b.split("-")[0] == name_or_path]
    if not matches:
        raise ValidationError(f"unknown architecture {name_or_path!r}; bundled: {', '.join(BUNDLED)}")
    text = resources.files("strassen_spn").joinpath("archs", matches[0] + ".json").read_text()
    return parse_arch(json.loads(text))


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------


def _out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def layer_output_shape(layer: LayerSpec, shape: Shape, where: str) -> Shape:
    if isinstance(layer, ConvSpec):
        if len(shape) != 3 or shape[0] != layer.c_in:
            raise ValidationError(f"{where} ({layer.name}): expects {layer.c_in} input channels, got shape {shape}")
        ho, wo = _out(shape[1], layer.k, layer.stride, layer.padding), _out(shape[2], layer.k, layer.stride,
                                                                                layer.padding)
        if ho < 1 or wo < 1:
            raise ValidationError(f"{where} ({layer.name}): empty output for input {shape}")
        return (layer.c_out, ho, wo)
    if isinstance(layer, FcSpec):
        features = int(math.prod(shape))
        if features != layer.in_features:
            raise ValidationError(f"{where} ({layer.name}): expects {layer.in_features} inputs, got shape {shape}")
        return (layer.out_features,)
    if isinstance(layer, PoolSpec):
        if layer.kind == "flatten":
            return (int(math.prod(shape)),)
        if len(shape) != 3:
            raise ValidationError(f"{where} ({layer.name}): pooling needs a c x H x W input, got {shape}")
        if layer.kind == "global_avgpool":
            return (shape[0],)
        return (shape[0], _out(shape[1], layer.k, layer.stride, layer.padding),
                _out(shape[2], layer.k, layer.stride, layer.padding))
    body = shape
    for i, sub in enumerate(layer.body):
        body = layer_output_shape(sub, body, f"{where}.body[{i}]")
    short = shape
    for i, sub in enumerate(layer.shortcut):
        short = layer_output_shape(sub, short, f"{where}.shortcut[{i}]")
    if body != short:
        raise ValidationError(f"{where} ({layer.name}): body output {body} != shortcut output {short}")
    return body


def infer_shapes(spec: ArchSpec) -> List[Tuple[str, LayerSpec, Shape, Shape]]:
    """Flattened (path, layer, input shape, output shape) for every leaf layer."""
    out: List[Tuple[str, LayerSpec, Shape, Shape]] = []

    def walk(layers: Sequence[LayerSpec], shape: Shape, prefix: str) -> Shape:
        for i, layer in enumerate(layers):
            where = f"{prefix}[{i}]"
            if isinstance(layer, ResidualSpec):
                layer_output_shape(layer, shape, where)
                walk(layer.shortcut, shape, where + ".shortcut")
                shape = walk(layer.body, shape, where + ".body")
            else:
                nxt = layer_output_shape(layer, shape, where)
                out.append((where, layer, shape, nxt))
                shape = nxt
        return shape

    walk(spec.layers, spec.input_shape, "layers")
    return out


# ---------------------------------------------------------------------------
# Counting
# ---------------------------------------------------------------------------


def count_layer(layer: LayerSpec, in_shape: Shape) -> OpCount:
    """Full-precision cost of one layer (weights only; batch norm is charged by :func:`compare`)."""
    if isinstance(layer, ConvSpec):
        _, ho, wo = layer_output_shape(layer, in_shape, layer.name)
        macs = layer.c_in * layer.c_out * layer.k * layer.k * ho * wo
        return OpCount(macs, macs, 0, layer.c_in * layer.c_out * layer.k * layer.k)
    if isinstance(layer, FcSpec):
        macs = layer.in_features * layer.out_features
        return OpCount(macs, macs, 0, macs)
    return OpCount()


def resolve_conv(layer: ConvSpec, r_ratio: float = 1.0, p: int = 1, g: int = 1) -> Tuple[int, int, int]:
    """Effective (r, p, g) of a compressed conv; layer-level fields win over the given defaults.

    ``g`` is reduced to the largest value dividing both ``c_in`` and ``r`` (the
    RGB input layer cannot be split into 4 groups, for instance).
    """
    if layer.r is not None:
        r = layer.r
    else:
        ratio = layer.r_ratio if layer.r_ratio is not None else r_ratio
        exact = Fraction(ratio).limit_denominator(1 << 20) * layer.c_out
        if exact.denominator != 1 or exact < 1:
            raise ValidationError(f"{layer.name}: r = r_ratio*c_out = {float(exact):g} must be an integer >= 1")
        r = int(exact)
    p = layer.p if layer.p is not None else p
    g = layer.g if layer.g is not None else g
    if p < 1 or g < 1:
        raise ValidationError(f"{layer.name}: p and g must be >= 1")
    return r, p, math.gcd(g, math.gcd(layer.c_in, r))


def count_spn_layer(layer: ConvSpec, in_shape: Shape, r: int, p: int = 1, g: int = 1) -> OpCount:
    """Cost of a compressed conv with budget ``r``, output patch ``p`` and ``g`` groups in W_b."""
    if r < 1:
        raise ValidationError(f"{layer.name}: r must be >= 1, got {r}")
    if layer.c_in % g or r % g:
        raise ValidationError(f"{layer.name}: g={g} must divide c_in={layer.c_in} and r={r}")
    _, ho, wo = layer_output_shape(layer, in_shape, layer.name)
    patches = -(-ho // p) * -(-wo // p)
    kb = (p - 1) * layer.stride + layer.k
    wb_cols = (layer.c_in // g) * kb * kb
    wc_rows = layer.c_out * p * p
    ternary = r * wb_cols + wc_rows * r
    return OpCount(r * patches, patches * ternary, ternary, r)


def count_spn_fc(layer: FcSpec, r: int) -> OpCount:
    ternary = r * layer.in_features + layer.out_features * r
    return OpCount(r, ternary, ternary, r)


def reduction_factor(layer: ConvSpec, in_shape: Shape, r: int, p: int = 1, g: int = 1) -> Fraction:
    """Exact ratio full-precision / compressed multiplications for one conv."""
    return Fraction(count_layer(layer, in_shape).multiplications,
                    count_spn_layer(layer, in_shape, r, p, g).multiplications)


def _pct(full: int, compressed: int) -> float:
    return 100.0 * (1.0 - compressed / full) if full else 0.0


@dataclass
class LayerRow:
    layer: str
    kind: str
    fp: OpCount
    spn: OpCount
    r: Optional[int] = None
    p: Optional[int] = None
    g: Optional[int] = None

    def reductions(self) -> Dict[str, float]:
        return {"multiplications": _pct(self.fp.multiplications, self.spn.multiplications),
                "additions": _pct(self.fp.additions, self.spn.additions),
                "model_bytes": _pct(self.fp.model_bytes, self.spn.model_bytes)}


@dataclass
class Report:
    arch: str
    settings: dict
    rows: List[LayerRow]

    @property
    def fp_total(self) -> OpCount:
        return sum((r.fp for r in self.rows), OpCount())

    @property
    def spn_total(self) -> OpCount:
        return sum((r.spn for r in self.rows), OpCount())

    def total_row(self) -> LayerRow:
        return LayerRow("total", "total", self.fp_total, self.spn_total)

    def reductions(self) -> Dict[str, float]:
        return self.total_row().reductions()

    def to_dict(self, per_layer: bool = False) -> dict:
        def row(r: LayerRow) -> dict:
            d = {"layer": r.layer, "kind": r.kind, "full_precision": r.fp.to_dict(), "spn": r.spn.to_dict(),
                 "reductions_pct": r.reductions()}
            if r.r is not None:
                d.update(r=r.r, p=r.p, g=r.g)
            return d

        out = {"schema_version": SCHEMA_VERSION, "arch": self.arch, "settings": self.settings,
               "total": row(self.total_row())}
        if per_layer:
            out["layers"] = [row(r) for r in self.rows]
        return out

    def to_json(self, per_layer: bool = False) -> str:
        return json.dumps(self.to_dict(per_layer), indent=1, sort_keys=True) + "\n"

    def to_csv(self, per_layer: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in (self.rows if per_layer else []) + [self.total_row()]:
            red = r.reductions()
            w.writerow([r.layer, r.fp.multiplications, r.spn.multiplications, r.fp.additions, r.spn.additions,
                        r.spn.ternary_params, r.spn.fp_params, r.fp.model_bytes, r.spn.model_bytes,
                        f"{red['multiplications']:.3f}", f"{red['additions']:.3f}", f"{red['model_bytes']:.3f}"])
        return buf.getvalue()


CSV_COLUMNS = ("layer", "fp-mults", "spn-mults", "fp-adds", "spn-adds", "ternary-params", "fp-params",
               "fp-bytes", "bytes", "mult-reduction", "add-reduction", "bytes-reduction")


def compare(spec: ArchSpec, r_ratio: Optional[float] = None, p: Optional[int] = None, g: Optional[int] = None,
            count_bn: bool = True) -> Report:
    """Per-layer full-precision vs compressed costs.

    ``r_ratio``/``p``/``g`` fall back to the spec's ``defaults`` and then to
    1. Batch norm after a conv is charged one multiplication, one addition
    and two parameters per output channel element on both sides.
    """
    d = spec.defaults
    r_ratio = float(r_ratio if r_ratio is not None else d.get("r_ratio", 1.0))
    p = int(p if p is not None else d.get("p", 1))
    g = int(g if g is not None else d.get("g", 1))
    if r_ratio <= 0:
        raise ValidationError(f"r_ratio must be positive (r >= 1 per layer), got {r_ratio}")
    rows: List[LayerRow] = []
    for where, layer, in_shape, out_shape in infer_shapes(spec):
        label = f"{where}:{layer.name}"
        if isinstance(layer, ConvSpec):
            fp = count_layer(layer, in_shape)
            if layer.compressed:
                r, pe, ge = resolve_conv(layer, r_ratio, p, g)
                spn = count_spn_layer(layer, in_shape, r, pe, ge)
            else:
                spn, r, pe, ge = fp, None, None, None
            if count_bn and layer.bn:
                elems = math.prod(out_shape)
                bn = OpCount(elems, elems, 0, 2 * layer.c_out)
                fp, spn = fp + bn, spn + bn
            rows.append(LayerRow(label, "conv", fp, spn, r, pe, ge))
        elif isinstance(layer, FcSpec):
            fp = count_layer(layer, in_shape)
            use = layer.compressed and (layer.max_conv_r_ratio is None or r_ratio <= layer.max_conv_r_ratio)
            spn = count_spn_fc(layer, layer.r) if use else fp
            rows.append(LayerRow(label, "fc", fp, spn, layer.r if use else None, 1 if use else None,
                                 1 if use else None))
    settings = {"r_ratio": r_ratio, "p": p, "g": g, "count_bn": count_bn}
    return Report(spec.name, settings, rows)


def uncompressed(spec: ArchSpec) -> ArchSpec:
    """Copy of ``spec`` with every layer marked uncompressed."""

    def strip(layer: LayerSpec) -> LayerSpec:
        if isinstance(layer, (ConvSpec, FcSpec)):
            return replace(layer, compressed=False)
        if isinstance(layer, ResidualSpec):
            return replace(layer, body=tuple(map(strip, layer.body)), shortcut=tuple(map(strip, layer.shortcut)))
        return layer

    return replace(spec, layers=tuple(map(strip, spec.layers)))
