import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strassen_spn import budget as bud
from strassen_spn.autodiff import Tensor
from strassen_spn.errors import ShapeError, UsageError, ValidationError
from strassen_spn.kernel import (ENTRIES_PER_WORD, MultCounter, PackedTernary, export_layer, export_model,
                                 spn_infer, ternary_apply)
from strassen_spn.layers import ReLU, Sequential, SpnGemm, StConv2d, StDense
from strassen_spn.quantize import TernaryMatrix
from strassen_spn.strassen import BilinearSolution


def _quantized(layer, x):
    """Warm batch-norm statistics, switch quantizers on and go to eval mode."""
    layer(Tensor(x))
    for q in layer.quant_states():
        q.activate()
    return layer.eval()


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 5), st.integers(1, 70)), elements=st.integers(-1, 1)))
def test_pack_round_trip(entries):
    packed = PackedTernary.pack(entries)
    np.testing.assert_array_equal(packed.unpack().entries, entries)
    assert PackedTernary.pack(packed.unpack()) == packed
    again = PackedTernary.from_bytes(packed.rows, packed.cols, packed.to_bytes())
    assert again == packed


def test_packed_layout_is_little_endian_two_bits_per_entry():
    packed = PackedTernary.pack(np.array([[1, -1, 0, 1]]))
    # entry j occupies bits 2j..2j+1: 01, 10, 00, 01 -> 0b01_00_10_01
    assert packed.to_bytes() == bytes([0b01001001]) + bytes(7)
    wide = PackedTernary.pack(np.ones((2, ENTRIES_PER_WORD + 1), np.int8))
    assert wide.words.shape == (2, 2) and wide.nbytes == 32


def test_reserved_pattern_and_padding_rejected():
    with pytest.raises(ValidationError):
        PackedTernary(1, 2, np.array([[0b1100]], np.uint64))
    with pytest.raises(ValidationError):
        PackedTernary(1, 2, np.array([[0b010000]], np.uint64))  # entry beyond cols
    with pytest.raises(ValidationError):
        PackedTernary.from_bytes(2, 3, bytes(8))


def test_ternary_apply_examples():
    x = np.arange(1, 6, dtype=np.float32)
    counter = MultCounter()
    np.testing.assert_array_equal(ternary_apply(PackedTernary.pack(np.eye(5, dtype=np.int8)), x, counter), x)
    assert ternary_apply(PackedTernary.pack(np.ones((1, 5), np.int8)), x, counter)[0] == x.sum()
    assert counter.multiplications == 0 and counter.dense_multiplications == 0


def test_ternary_apply_matches_dense_matmul():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rows, cols = rng.integers(1, 40, 2)
        t = rng.integers(-1, 2, (rows, cols))
        x = rng.standard_normal((7, cols)).astype(np.float32)
        got = ternary_apply(PackedTernary.pack(t), x)
        assert _rel(got, x.astype(np.float64) @ t.T) <= 1e-5
    with pytest.raises(ShapeError):
        ternary_apply(PackedTernary.pack(np.eye(3, dtype=np.int8)), np.ones(4))


def test_addition_count_excludes_row_copies():
    t = np.array([[1, -1, 1], [0, 0, 0], [0, 1, 0]])
    counter = MultCounter()
    ternary_apply(PackedTernary.pack(t), np.ones((2, 3), np.float32), counter)
    assert counter.additions == 2 * 2


def test_strassen_fixture_uses_seven_multiplications():
    doc = json.loads(resources.files("strassen_spn").joinpath("data", "strassen.json").read_text())
    sol = BilinearSolution.from_dict(doc)
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((2, 2)), rng.standard_normal((1, 2, 2)).astype(np.float32)
    layer = SpnGemm.from_bilinear(sol.W_a, sol.W_b, sol.W_c, A, 2)
    counter = MultCounter()
    out = spn_infer(export_layer(layer), B, counter)
    assert counter.multiplications == 7
    assert _rel(out, A @ B) <= 1e-6


def test_non_exported_layer_refused():
    with pytest.raises(UsageError):
        spn_infer(StDense(4, 3, 3, rng=0), np.ones((1, 4)))
    with pytest.raises(UsageError):
        export_layer(StDense(4, 3, 3, rng=0))  # quantizers never activated


def test_conv_counter_on_8x8_input_with_p2():
    c_in, r = 3, 10
    layer = _quantized(StConv2d(c_in, 4, 3, r=r, p=2, rng=0), np.ones((2, c_in, 8, 8), np.float32))
    counter = MultCounter()
    spn_infer(export_layer(layer), np.random.default_rng(0).standard_normal((1, c_in, 8, 8)), counter)
    assert counter.multiplications == r * 16


def test_zero_input_still_counts_mandatory_multiplications():
    layer = _quantized(StDense(6, 4, 5, rng=0), np.ones((2, 6), np.float32))
    counter = MultCounter()
    out = spn_infer(export_layer(layer), np.zeros((3, 6)), counter)
    np.testing.assert_array_equal(out, 0)
    assert counter.multiplications == 5 * 3


@pytest.mark.parametrize("p,g,stride", [(1, 1, 1), (2, 1, 1), (2, 2, 2), (3, 2, 1), (1, 2, 2)])
def test_conv_export_matches_training_path_and_budget(p, g, stride):
    rng = np.random.default_rng(p * 10 + g + stride)
    layer = StConv2d(4, 6, 3, r=8, p=p, g=g, stride=stride, rng=p)
    layer = _quantized(layer, rng.standard_normal((8, 4, 7, 9)).astype(np.float32))
    ex = export_layer(layer)
    for _ in range(100 // 10):
        x = rng.standard_normal((3, 4, 7, 9)).astype(np.float32)
        layer.reset_tally()
        want = layer(Tensor(x)).data
        counter = MultCounter()
        got = spn_infer(ex, x, counter)
        assert _rel(got, want) <= 1e-5
        spec = bud.ConvSpec("c", 4, 6, 3, stride=stride, padding=1)
        predicted = bud.count_spn_layer(spec, (4, 7, 9), r=8, p=p, g=g).multiplications * 3
        assert counter.multiplications == layer.mult_count == predicted


def test_model_export_matches_forward():
    rng = np.random.default_rng(4)
    model = Sequential([StDense(10, 8, 8, rng=0), ReLU(), StDense(8, 3, 3, rng=1)])
    for layer in (model.layers[0], model.layers[2]):
        for q in layer.quant_states():
            q.activate()
            q.freeze()
    model.eval()
    x = rng.standard_normal((20, 10)).astype(np.float32)
    counter = MultCounter()
    got = export_model(model).forward(x, counter)
    assert _rel(got, model(Tensor(x)).data) <= 1e-5
    assert counter.multiplications == 20 * (8 + 3)


def test_counters_merge():
    a, b = MultCounter(1, 2, 3), MultCounter(10, 20, 30)
    a += b
    assert (a.multiplications, a.additions, a.dense_multiplications) == (11, 22, 33)


def test_exported_gemm_matches_bilinear_oracle():
    rng = np.random.default_rng(5)
    layer = _quantized(SpnGemm(2, 3, 2, 6, rng=0), rng.standard_normal((4, 3, 2)).astype(np.float32))
    ex = export_layer(layer)
    B = rng.standard_normal((5, 3, 2)).astype(np.float32)
    Tb = ex.W_b[0].unpack().entries.astype(np.float64)
    Tc = ex.W_c.unpack().entries.astype(np.float64)
    v = B.transpose(0, 2, 1).reshape(5, -1)
    want = ((v @ Tb.T) * ex.a_scale) @ Tc.T
    got = spn_infer(ex, B).transpose(0, 2, 1).reshape(5, -1)
    assert _rel(got, want) <= 1e-5
    assert isinstance(ex.W_c.unpack(), TernaryMatrix)
