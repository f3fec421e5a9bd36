import numpy as np
import pytest

from strassen_spn import autodiff as ad
from strassen_spn.autodiff import Tensor
from strassen_spn.errors import ConfigError, ShapeError, UsageError, ValidationError

from helpers import numeric_grad, rel_err


def _check(fn, *arrays, seed=0, tol=1e-6):
    """Compare backprop of sum(fn(*tensors) * proj) against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float((fn(*[Tensor(b) for b in arrays]).data * proj).sum()), a)
        assert rel_err(t.grad, num) < tol


def test_float32_default_and_float64_kept():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_scalar_results_keep_float64():
    a, b = Tensor(np.array(1.5)), Tensor(np.array(2.0))
    assert (a + b).dtype == np.float64 and (a * 3.0).dtype == np.float64


def test_elementwise_and_broadcast_grads():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4,))
    _check(lambda x, y: ad.add(x, y), a, b)
    _check(lambda x, y: ad.mul(x, y), a, b)
    _check(lambda x, y: x - y * 2.0, a, b)
    _check(lambda x: ad.square(x), a)
    _check(lambda x: ad.relu(x) + ad.tabs(x), a + 0.05)
    _check(lambda x: ad.tsum(x, axis=1), a)
    _check(lambda x: ad.tmean(x, axis=0), a)
    _check(lambda x: ad.transpose(ad.reshape(x, (2, 6)), (1, 0)), a)
    _check(lambda x: ad.getitem(x, (slice(0, 2), slice(1, 3))), a)


def test_matmul_batched_grads():
    rng = np.random.default_rng(1)
    _check(lambda x, y: ad.matmul(x, y), rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_straight_through_passes_gradient_unchanged():
    shadow = Tensor(np.array([0.3, -2.0, 0.1]), requires_grad=True)
    v = ad.straight_through(shadow, np.array([1.0, -1.0, 0.0]))
    np.testing.assert_array_equal(v.data, [1.0, -1.0, 0.0])
    v.backward(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(shadow.grad, [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        ad.straight_through(shadow, np.zeros(2))


def _conv_loops(x, w, stride, pad, groups):
    b, c_in, H, W = x.shape
    c_out, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    og = c_out // groups
    out = np.zeros((b, c_out, Ho, Wo))
    for n in range(b):
        for co in range(c_out):
            gi = co // og
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, gi * cg:(gi + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, co, i, j] = (patch * w[co]).sum()
    return out


@pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 2, 2)])
def test_conv2d_matches_direct_loops(stride, pad, groups):
    rng = np.random.default_rng(stride * 10 + groups)
    x = rng.standard_normal((2, 4, 7, 6))
    w = rng.standard_normal((6, 4 // groups, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride, pad, groups).data
    np.testing.assert_allclose(got, _conv_loops(x, w, stride, pad, groups), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, (0, 1, 1, 0), 2)])
def test_conv2d_grads(stride, pad, groups):
    rng = np.random.default_rng(3)
    _check(lambda x, w: ad.conv2d(x, w, stride, pad, groups),
           rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((4, 4 // groups, 3, 3)))


def test_conv2d_rejects_bad_groups():
    with pytest.raises(ConfigError):
        ad.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 1, 1))), groups=2)


def test_conv_transpose_is_scatter_of_patches():
    rng = np.random.default_rng(4)
    y = rng.standard_normal((2, 3, 2, 3))
    w = rng.standard_normal((3, 5, 2, 2))
    out = ad.conv_transpose2d(Tensor(y), Tensor(w), 2).data
    ref = np.zeros((2, 5, 4, 6))
    for i in range(2):
        for j in range(3):
            ref[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += np.einsum("br,rcuv->bcuv", y[:, :, i, j], w)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((2, 3, 3, 3))
    w = rng.standard_normal((3, 4, 2, 2))
    x = rng.standard_normal((2, 4, 6, 6))
    lhs = (ad.conv_transpose2d(Tensor(y), Tensor(w), 2).data * x).sum()
    # conv2d with the (c_out=r, c_in=4) kernel is the adjoint map
    rhs = (ad.conv2d(Tensor(x), Tensor(w), 2, 0).data * y).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_transpose_grads_and_kernel_check():
    rng = np.random.default_rng(6)
    _check(lambda y, w: ad.conv_transpose2d(y, w, 2), rng.standard_normal((2, 3, 2, 2)),
           rng.standard_normal((3, 2, 2, 2)))
    with pytest.raises(ConfigError):
        ad.conv_transpose2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((3, 2, 3, 3))), 2)


def test_mul_channels_grads_and_shape_check():
    rng = np.random.default_rng(7)
    _check(lambda x, s: ad.mul_channels(x, s), rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3))
    with pytest.raises(ShapeError):
        ad.mul_channels(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros(4)))


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 2, 2)])
def test_batch_norm_training_grads(shape):
    rng = np.random.default_rng(8)
    c = shape[1]
    rm, rv = np.zeros(c), np.ones(c)
    _check(lambda x, g, b: ad.batch_norm(x, g, b, rm.copy(), rv.copy(), True),
           rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c), tol=1e-5)


def test_batch_norm_running_stats_and_eval():
    x = np.random.default_rng(9).standard_normal((50, 2)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = ad.batch_norm(Tensor(x), g, b, rm, rv, True, momentum=0.0)
    np.testing.assert_allclose(out.data.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(rm, x.mean(0))
    np.testing.assert_allclose(rv, x.var(0, ddof=1))
    ev = ad.batch_norm(Tensor(x), g, b, rm, rv, False)
    np.testing.assert_allclose(ev.data, (x - rm) / np.sqrt(rv + 1e-5))


def test_softmax_cross_entropy_value_and_grad():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((5, 4))
    t = ad.softmax(rng.standard_normal((5, 4)))
    loss = ad.softmax_cross_entropy(Tensor(z), t)
    assert loss.item() == pytest.approx(float(-(t * ad.log_softmax(z)).sum(1).mean()))
    _check(lambda x: ad.softmax_cross_entropy(x, t), z)


def test_cross_entropy_rejects_non_distributions():
    with pytest.raises(ValidationError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.full((2, 3), 0.5))


def test_softmax_stable_for_large_logits():
    p = ad.softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)
