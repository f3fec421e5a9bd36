"""Model files, exported (packed) models, IDX datasets and atomic writes.

All documents are canonical JSON: sorted keys, no insignificant whitespace,
floats in shortest round-trip form. Loading a document and saving it again
reproduces it byte for byte.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import FormatError, ValidationError
from .kernel import ExportedModel, ExportedSpn, PackedTernary
from .layers import (BatchNorm, Conv2d, Dense, Flatten, GlobalAvgPool, Module, ReLU, Sequential, SpnGemm,
                     StConv2d, StDense)
from .quantize import QuantState, TernaryMatrix

FORMAT_VERSION = 1
PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def atomic_write(path: PathLike, data: Union[str, bytes]) -> None:
    """Write via a temporary file in the target directory and rename it into place."""
    path = Path(path)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def read_json(path: PathLike) -> dict:
    """Parse a JSON file; syntax errors report line and column."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def encode_array(a: np.ndarray, integer: bool = False) -> dict:
    a = np.asarray(a)
    if integer:
        data = [int(v) for v in a.ravel()]
    else:
        if not np.isfinite(a).all():
            raise ValidationError("refusing to serialize non-finite values")
        data = [float(v) for v in a.ravel()]
    return {"shape": list(a.shape), "data": data}


def decode_array(d: dict, dtype=np.float32) -> np.ndarray:
    try:
        return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed array record: {exc}") from exc


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def build_layer(cfg: dict, rng: np.random.Generator) -> Module:
    """Construct an untrained layer from a config record (the weight-free part of a model file)."""
    t = cfg.get("type")
    try:
        if t == "dense":
            return Dense(cfg["in"], cfg["out"], bias=cfg.get("bias", True), rng=rng)
        if t == "st_dense":
            return StDense(cfg["in"], cfg["out"], cfg["r"], rng=rng, mode=cfg.get("mode", "adaptive"))
        if t == "spn_gemm":
            return SpnGemm(cfg["k"], cfg["m"], cfg["n"], cfg["r"], rng=rng, mode=cfg.get("mode", "adaptive"))
        if t == "conv":
            return Conv2d(cfg["c_in"], cfg["c_out"], cfg["k"], cfg.get("stride", 1), cfg.get("padding"),
                          cfg.get("groups", 1), rng=rng)
        if t == "st_conv":
            return StConv2d(cfg["c_in"], cfg["c_out"], cfg["k"], cfg["r"], cfg.get("p", 1), cfg.get("g", 1),
                            cfg.get("stride", 1), cfg.get("bn", True), rng=rng, mode=cfg.get("mode", "adaptive"))
        if t == "bn":
            return BatchNorm(cfg["features"], cfg.get("momentum", 0.9), cfg.get("eps", 1e-5))
        if t == "relu":
            return ReLU()
        if t == "flatten":
            return Flatten()
        if t == "global_avgpool":
            return GlobalAvgPool()
    except KeyError as exc:
        raise ValidationError(f"layer of type {t!r} is missing field {exc}") from exc
    raise ValidationError(f"unknown layer type {t!r}")


def build_model(layer_cfgs: List[dict], seed: int) -> Sequential:
    rng = np.random.default_rng(seed)
    layers = []
    for i, cfg in enumerate(layer_cfgs):
        try:
            layers.append(build_layer(cfg, rng))
        except ValidationError as exc:
            raise ValidationError(f"layer {i}: {exc}") from exc
    return Sequential(layers)


def _quant_to_dict(q: QuantState) -> dict:
    d = {"active": q.active, "frozen": q.frozen, "mode": q.mode, "shadow": encode_array(q.shadow.data),
         "last_delta": float(q.last_delta), "last_alpha": float(q.last_alpha)}
    if q.frozen:
        d["ternary"] = encode_array(q.pattern.entries, integer=True)
    return d


def _quant_from_dict(q: QuantState, d: dict) -> None:
    shadow = decode_array(d["shadow"])
    if shadow.shape != q.shadow.shape:
        raise FormatError(f"shadow shape {shadow.shape} != expected {q.shadow.shape}")
    q.shadow.data = shadow
    q.mode = d["mode"]
    q.active = bool(d["active"])
    if d["frozen"]:
        ints = decode_array(d["ternary"], np.int64)
        if not np.isin(ints, (-1, 0, 1)).all():
            raise FormatError("ternary weight arrays may only contain -1, 0 and 1")
        q.set_frozen(TernaryMatrix(ints), d["last_alpha"])
    q.last_delta, q.last_alpha = float(d["last_delta"]), float(d["last_alpha"])


def _bn_to_dict(bn: BatchNorm) -> dict:
    return {"gamma": encode_array(bn.gamma.data), "beta": encode_array(bn.beta.data),
            "running_mean": encode_array(bn.running_mean), "running_var": encode_array(bn.running_var)}


def _bn_from_dict(bn: BatchNorm, d: dict) -> None:
    bn.gamma.data, bn.beta.data = decode_array(d["gamma"]), decode_array(d["beta"])
    bn.running_mean, bn.running_var = decode_array(d["running_mean"]), decode_array(d["running_var"])


def layer_to_dict(layer: Module) -> dict:
    if isinstance(layer, StDense):
        d = {"type": "st_dense", "in": layer.in_features, "out": layer.out_features, "r": layer.r}
    elif isinstance(layer, SpnGemm):
        d = {"type": "spn_gemm", "k": layer.k, "m": layer.m, "n": layer.n, "r": layer.r}
    elif isinstance(layer, StConv2d):
        d = {"type": "st_conv", "c_in": layer.c_in, "c_out": layer.c_out, "k": layer.k, "r": layer.r,
             "p": layer.p, "g": layer.g, "stride": layer.stride, "bn": layer.bn is not None}
        if layer.bn is not None:
            d["bn_params"] = _bn_to_dict(layer.bn)
    elif isinstance(layer, Dense):
        d = {"type": "dense", "in": layer.in_features, "out": layer.out_features, "bias": layer.bias is not None,
             "weight": encode_array(layer.weight.data)}
        if layer.bias is not None:
            d["bias_data"] = encode_array(layer.bias.data)
        return d
    elif isinstance(layer, Conv2d):
        return {"type": "conv", "c_in": layer.c_in, "c_out": layer.c_out, "k": layer.k, "stride": layer.stride,
                "padding": layer.padding, "groups": layer.groups, "weight": encode_array(layer.weight.data)}
    elif isinstance(layer, BatchNorm):
        d = {"type": "bn", "features": layer.num_features, "momentum": layer.momentum, "eps": layer.eps}
        d.update(_bn_to_dict(layer))
        return d
    elif isinstance(layer, ReLU):
        return {"type": "relu"}
    elif isinstance(layer, Flatten):
        return {"type": "flatten"}
    elif isinstance(layer, GlobalAvgPool):
        return {"type": "global_avgpool"}
    else:
        raise ValidationError(f"cannot serialize layer type {type(layer).__name__}")
    d["mode"] = layer.W_b.mode
    d["a_tilde"] = encode_array(layer.a_tilde.data)
    d["W_b"], d["W_c"] = _quant_to_dict(layer.W_b), _quant_to_dict(layer.W_c)
    return d


def _load_weights(layer: Module, d: dict) -> None:
    if isinstance(layer, (SpnGemm, StConv2d)):
        layer.a_tilde.data = decode_array(d["a_tilde"])
        _quant_from_dict(layer.W_b, d["W_b"])
        _quant_from_dict(layer.W_c, d["W_c"])
        if isinstance(layer, StConv2d) and layer.bn is not None:
            _bn_from_dict(layer.bn, d["bn_params"])
    elif isinstance(layer, Dense):
        layer.weight.data = decode_array(d["weight"])
        if layer.bias is not None:
            layer.bias.data = decode_array(d["bias_data"])
    elif isinstance(layer, Conv2d):
        layer.weight.data = decode_array(d["weight"])
    elif isinstance(layer, BatchNorm):
        _bn_from_dict(layer, d)


def model_to_dict(model: Sequential, arch: str = "sequential", provenance: Optional[dict] = None,
                  input_shape: Optional[List[int]] = None) -> dict:
    """Model document; ``input_shape`` is the per-example shape the first layer expects."""
    return {"format_version": FORMAT_VERSION, "kind": "model", "arch": arch,
            "input_shape": list(input_shape) if input_shape is not None else None,
            "layers": [layer_to_dict(layer) for layer in model.layers], "provenance": provenance or {}}


def model_from_dict(doc: dict) -> Sequential:
    _check_header(doc, "model")
    model = build_model(doc["layers"], seed=0)
    for i, (layer, d) in enumerate(zip(model.layers, doc["layers"])):
        try:
            _load_weights(layer, d)
        except (KeyError, ValidationError) as exc:
            raise FormatError(f"layer {i}: {exc}") from exc
    return model


def _check_header(doc: dict, kind: str) -> None:
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"expected format_version {FORMAT_VERSION}")
    if doc.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} document, got {doc.get('kind')!r}")


def save_model(path: PathLike, model: Sequential, arch: str = "sequential", provenance: Optional[dict] = None,
               input_shape: Optional[List[int]] = None) -> None:
    atomic_write(path, canonical_json(model_to_dict(model, arch, provenance, input_shape)))


def load_model(path: PathLike) -> Tuple[Sequential, dict]:
    doc = read_json(path)
    return model_from_dict(doc), doc


# ---------------------------------------------------------------------------
# Exported models
# ---------------------------------------------------------------------------


def _packed_to_dict(p: PackedTernary) -> dict:
    return {"rows": p.rows, "cols": p.cols, "words": base64.b64encode(p.to_bytes()).decode("ascii")}


def _packed_from_dict(d: dict) -> PackedTernary:
    return PackedTernary.from_bytes(d["rows"], d["cols"], base64.b64decode(d["words"]))


def exported_to_dict(em: ExportedModel, arch: str = "sequential", provenance: Optional[dict] = None,
                     input_shape: Optional[List[int]] = None) -> dict:
    ops = []
    for kind, op in em.ops:
        if kind == "spn":
            ops.append({"op": "spn", "kind": op.kind, "params": op.params,
                        "W_b": [_packed_to_dict(b) for b in op.W_b], "W_c": _packed_to_dict(op.W_c),
                        "a_scale": encode_array(op.a_scale), "a_bias": encode_array(op.a_bias)})
        elif kind == "dense":
            w, b = op
            rec = {"op": "dense", "weight": encode_array(w)}
            if b is not None:
                rec["bias"] = encode_array(b)
            ops.append(rec)
        elif kind == "affine":
            ops.append({"op": "affine", "scale": encode_array(op[0]), "shift": encode_array(op[1])})
        else:
            ops.append({"op": kind})
    return {"format_version": FORMAT_VERSION, "kind": "exported", "arch": arch,
            "input_shape": list(input_shape) if input_shape is not None else None, "ops": ops,
            "provenance": provenance or {}}


def exported_from_dict(doc: dict) -> ExportedModel:
    _check_header(doc, "exported")
    ops = []
    try:
        for rec in doc["ops"]:
            kind = rec["op"]
            if kind == "spn":
                ops.append(("spn", ExportedSpn(rec["kind"], dict(rec["params"]),
                                               [_packed_from_dict(b) for b in rec["W_b"]],
                                               _packed_from_dict(rec["W_c"]), decode_array(rec["a_scale"]),
                                               decode_array(rec["a_bias"]))))
            elif kind == "dense":
                ops.append(("dense", (decode_array(rec["weight"]),
                                      decode_array(rec["bias"]) if "bias" in rec else None)))
            elif kind == "affine":
                ops.append(("affine", (decode_array(rec["scale"]), decode_array(rec["shift"]))))
            else:
                ops.append((kind, None))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed exported model: {exc}") from exc
    return ExportedModel(ops)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

_IDX_TYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
              0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def read_idx(path: PathLike, expect_magic: Optional[int] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    zero, code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def idx_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    codes = {v.newbyteorder("=").str if v.itemsize > 1 else v.str: k for k, v in _IDX_TYPES.items()}
    key = a.dtype.newbyteorder("=").str if a.dtype.itemsize > 1 else a.dtype.str
    if key not in codes:
        raise ValidationError(f"dtype {a.dtype} has no IDX type code")
    code = codes[key]
    header = struct.pack(">I", (code << 8) | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    return header + a.astype(_IDX_TYPES[code]).tobytes()


def write_idx(path: PathLike, a: np.ndarray) -> None:
    atomic_write(path, idx_bytes(a))


def dataset_paths(directory: PathLike, split: str = "train") -> Tuple[Path, Path]:
    d = Path(directory)
    return d / f"{split}-images-idx3-ubyte", d / f"{split}-labels-idx1-ubyte"


def load_idx_dataset(directory: PathLike, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Images (scaled to [0, 1], float32) and integer labels."""
    img_path, lbl_path = dataset_paths(directory, split)
    images = read_idx(img_path, IMAGES_MAGIC)
    labels = read_idx(lbl_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def make_blobs(per_class: int = 100, classes: int = 4, side: int = 4, spread: float = 0.12,
               seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs rendered as ``side`` x ``side`` uint8 images, with uint8 labels."""
    rng = np.random.default_rng(seed)
    dim = side * side
    centers = rng.uniform(0.2, 0.8, (classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    images = np.clip(np.rint(x[order] * 255), 0, 255).astype(np.uint8).reshape(-1, side, side)
    return images, labels[order].astype(np.uint8)


def write_blobs(directory: PathLike, seed: int = 0, **kwargs) -> Tuple[Path, Path]:
    images, labels = make_blobs(seed=seed, **kwargs)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img_path, lbl_path = dataset_paths(d)
    write_idx(img_path, images)
    write_idx(lbl_path, labels)
    return img_path, lbl_path


def load_tensor(path: PathLike) -> np.ndarray:
    """Input tensor from ``.npy``, an IDX file, or a JSON ``{"shape", "data"}`` record."""
    path = Path(path)
    if path.suffix == ".npy":
        try:
            return np.load(path, allow_pickle=False).astype(np.float32)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if path.suffix == ".json":
        return decode_array(read_json(path))
    return read_idx(path).astype(np.float32)


def arch_from_model_doc(doc: dict) -> dict:
    """Architecture spec (budget schema) describing a model or exported-model document.

    Batch norm folded into an SPN layer is free at inference, so convolutions
    are emitted with ``bn: false``.
    """
    if doc.get("input_shape") is None:
        raise ValidationError("model file does not record its input shape")
    layers = []
    if doc.get("kind") == "exported":
        for i, rec in enumerate(doc["ops"]):
            if rec["op"] == "spn":
                P = rec["params"]
                if rec["kind"] == "conv":
                    layers.append({"type": "conv", "name": f"op{i}", "c_in": P["c_in"], "c_out": P["c_out"],
                                   "k": P["k"], "stride": P["stride"], "padding": P["pad"], "bn": False,
                                   "r": P["r"], "p": P["p"], "g": P["g"]})
                else:
                    layers.append({"type": "fc", "name": f"op{i}", "in": P["m"] * P["n"], "out": P["k"] * P["n"],
                                   "spn": {"r": P["r"]}})
            elif rec["op"] == "dense":
                out, inp = rec["weight"]["shape"]
                layers.append({"type": "fc", "name": f"op{i}", "in": inp, "out": out, "compressed": False})
            elif rec["op"] in ("flatten", "global_avgpool"):
                layers.append({"type": rec["op"], "name": f"op{i}"})
    else:
        for i, rec in enumerate(doc["layers"]):
            t, name = rec["type"], f"layer{i}"
            if t == "st_conv":
                layers.append({"type": "conv", "name": name, "c_in": rec["c_in"], "c_out": rec["c_out"],
                               "k": rec["k"], "stride": rec["stride"], "padding": (rec["k"] - 1) // 2,
                               "bn": False, "r": rec["r"], "p": rec["p"], "g": rec["g"]})
            elif t == "conv":
                layers.append({"type": "conv", "name": name, "c_in": rec["c_in"], "c_out": rec["c_out"],
                               "k": rec["k"], "stride": rec["stride"], "padding": rec["padding"], "bn": False,
                               "compressed": False})
            elif t == "st_dense":
                layers.append({"type": "fc", "name": name, "in": rec["in"], "out": rec["out"],
                               "spn": {"r": rec["r"]}})
            elif t == "spn_gemm":
                layers.append({"type": "fc", "name": name, "in": rec["m"] * rec["n"], "out": rec["k"] * rec["n"],
                               "spn": {"r": rec["r"]}})
            elif t == "dense":
                layers.append({"type": "fc", "name": name, "in": rec["in"], "out": rec["out"], "compressed": False})
            elif t in ("flatten", "global_avgpool"):
                layers.append({"type": t, "name": name})
    return {"schema_version": 1, "name": doc.get("arch", "model"), "input": list(doc["input_shape"]),
            "layers": layers}
