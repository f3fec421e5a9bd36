import json
import os
import struct

import numpy as np
import pytest

from strassen_spn import io as sio
from strassen_spn.autodiff import Tensor
from strassen_spn.errors import FormatError, ValidationError
from strassen_spn.kernel import export_model
from strassen_spn.layers import BatchNorm, Dense, Flatten, ReLU, Sequential, StConv2d, StDense


def _model(freeze=True):
    model = Sequential([StConv2d(1, 4, 3, r=4, p=2, rng=0), ReLU(), Flatten(), StDense(64, 3, 3, rng=1),
                        BatchNorm(3), Dense(3, 2, rng=2)])
    model(Tensor(np.random.default_rng(0).standard_normal((4, 1, 4, 4)).astype(np.float32)))
    for layer in (model.layers[0], model.layers[3]):
        for q in layer.quant_states():
            q.activate()
            if freeze:
                q.freeze()
    return model.eval()


def test_idx_round_trip(tmp_path):
    for a in (np.arange(24, dtype=np.uint8).reshape(2, 3, 4), np.array([1, 2, 3], np.uint8),
              np.linspace(-1, 1, 6).astype(np.float32).reshape(2, 3), np.array([[-5, 7]], np.int32)):
        path = tmp_path / "a.idx"
        sio.write_idx(path, a)
        back = sio.read_idx(path)
        assert back.dtype == a.dtype
        np.testing.assert_array_equal(back, a)


def test_idx_header_is_big_endian_standard_layout(tmp_path):
    raw = sio.idx_bytes(np.zeros((5, 2, 3), np.uint8))
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert struct.unpack(">3I", raw[4:16]) == (5, 2, 3)
    assert sio.IMAGES_MAGIC == 0x803 and sio.LABELS_MAGIC == 0x801


def test_idx_magic_mismatch_and_truncation(tmp_path):
    path = tmp_path / "labels"
    sio.write_idx(path, np.zeros(4, np.uint8))
    with pytest.raises(FormatError, match="magic"):
        sio.read_idx(path, sio.IMAGES_MAGIC)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        sio.read_idx(path)
    path.write_bytes(b"\x01\x00\x08\x01" + bytes(4))
    with pytest.raises(FormatError):
        sio.read_idx(path)


def test_blob_dataset_files(tmp_path):
    sio.write_blobs(tmp_path, seed=3, per_class=10)
    X, y = sio.load_idx_dataset(tmp_path)
    assert X.shape == (40, 4, 4) and X.dtype == np.float32 and 0 <= X.min() and X.max() <= 1
    assert sorted(np.bincount(y)) == [10] * 4
    a, _ = sio.make_blobs(per_class=10, seed=3)
    np.testing.assert_array_equal((X * 255).round().astype(np.uint8), a)


def test_atomic_write_leaves_no_partial_files(tmp_path):
    target = tmp_path / "out.json"
    sio.atomic_write(target, "old\n")

    class Boom(str):
        def encode(self, *a):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        sio.atomic_write(target, Boom("new"))
    assert target.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.json"]


def test_non_finite_values_not_serialized():
    with pytest.raises(ValidationError):
        sio.encode_array(np.array([1.0, np.nan]))


def test_read_json_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "a": 1,\n  "b": ]\n}\n')
    with pytest.raises(FormatError, match=r"bad.json:3:8"):
        sio.read_json(path)


@pytest.mark.parametrize("freeze", [False, True])
def test_model_load_save_byte_identical(tmp_path, freeze):
    model = _model(freeze)
    path = tmp_path / "m.json"
    sio.save_model(path, model, "toy", {"seed": 1}, [1, 4, 4])
    loaded, doc = sio.load_model(path)
    again = tmp_path / "m2.json"
    sio.save_model(again, loaded, doc["arch"], doc["provenance"], doc["input_shape"])
    assert path.read_bytes() == again.read_bytes()
    x = np.random.default_rng(1).standard_normal((3, 1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(loaded.eval()(Tensor(x)).data, model(Tensor(x)).data)


def test_frozen_weights_are_stored_as_ternary_integers(tmp_path):
    doc = sio.model_to_dict(_model())
    rec = doc["layers"][3]
    assert set(rec["W_b"]["ternary"]["data"]) <= {-1, 0, 1}
    rec["W_b"]["ternary"]["data"][0] = 2
    with pytest.raises(FormatError):
        sio.model_from_dict(json.loads(json.dumps(doc)))


def test_exported_document_round_trip():
    em = export_model(_model())
    doc = sio.exported_to_dict(em, "toy", {}, [1, 4, 4])
    text = sio.canonical_json(doc)
    back = sio.exported_from_dict(json.loads(text))
    assert sio.canonical_json(sio.exported_to_dict(back, "toy", {}, [1, 4, 4])) == text
    x = np.random.default_rng(2).standard_normal((2, 1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x), em.forward(x))


def test_header_checks():
    with pytest.raises(FormatError):
        sio.model_from_dict({"format_version": 99, "kind": "model", "layers": []})
    with pytest.raises(FormatError):
        sio.exported_from_dict({"format_version": 1, "kind": "model", "ops": []})
    with pytest.raises(ValidationError, match="layer 1"):
        sio.build_model([{"type": "relu"}, {"type": "dense", "in": 3}], seed=0)


def test_load_tensor_formats(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.save(tmp_path / "a.npy", a)
    (tmp_path / "a.json").write_text(json.dumps(sio.encode_array(a)))
    sio.write_idx(tmp_path / "a.idx", a)
    for name in ("a.npy", "a.json", "a.idx"):
        np.testing.assert_array_equal(sio.load_tensor(tmp_path / name), a)


def test_arch_from_model_doc_feeds_budget():
    from strassen_spn import budget as bud
    doc = sio.model_to_dict(_model(), input_shape=[1, 4, 4])
    spec = bud.parse_arch(sio.arch_from_model_doc(doc))
    report = bud.compare(spec, count_bn=False)
    # r * patches for the conv, r for the SPN dense layer, 3 * 2 for the plain dense head
    assert report.spn_total.multiplications == 4 * 4 + 3 + 6
