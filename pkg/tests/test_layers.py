import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zbcnn.errors import DomainError, NumericError, ShapeError, UsageError
from zbcnn.layers import (Conv2d, Dropout, FullyConnected, LayerSpec, MaxPool2, QuadrantPool, ReLU,
                          quadrant_bounds, softmax_xent)
from zbcnn.tensor import Rng


def naive_conv(x, W):
    n, c, h, w = x.shape
    f, _, k, _ = W.shape
    out = np.zeros((n, f, h - k + 1, w - k + 1))
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            out[:, :, i, j] = np.einsum("nckl,fckl->nf", x[:, :, i:i + k, j:j + k], W)
    return out


def test_conv_hand_example():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    out, _ = Conv2d(1, 3).forward(x, {"W": np.ones((1, 1, 3, 3))})
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 45


def test_conv_zero_kernel(rng):
    out, _ = Conv2d(2, 3).forward(rng.gaussian(0, 1, (2, 3, 6, 6)), {"W": np.zeros((2, 3, 3, 3))})
    assert not out.any()


def test_conv_standard_shape():
    conv = Conv2d(64, 5)
    assert conv.output_shape((1, 96, 96)) == (64, 92, 92)
    out, _ = conv.forward(np.zeros((1, 1, 96, 96), np.float32), {"W": np.zeros((64, 1, 5, 5), np.float32)})
    assert out.shape == (1, 64, 92, 92) and out.dtype == np.float32


def test_conv_matches_direct_sum(rng):
    x = rng.gaussian(0, 1, (2, 3, 9, 8))
    W = rng.gaussian(0, 1, (4, 3, 5, 5))
    out, _ = Conv2d(4, 5).forward(x, {"W": W})
    np.testing.assert_allclose(out, naive_conv(x, W), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint(rng):
    # <conv(x), y> == <x, conv^T(y)>
    x = rng.gaussian(0, 1, (1, 3, 10, 10))
    W = rng.gaussian(0, 1, (4, 3, 3, 3))
    y = rng.gaussian(0, 1, (1, 4, 8, 8))
    out, _ = Conv2d(4, 3).forward(x, {"W": W})
    assert math.isclose(np.sum(out * y), np.sum(x * Conv2d.transpose(y, W)), rel_tol=1e-12)


def test_conv_rejects_bias_and_even_kernels():
    with pytest.raises(DomainError):
        LayerSpec("conv", out_filters=2, kernel=4)
    with pytest.raises(DomainError):
        LayerSpec("conv", out_filters=2, kernel=3, has_bias=True)


def test_context_single_use(rng):
    conv = Conv2d(1, 3)
    W = rng.gaussian(0, 1, (1, 1, 3, 3))
    out, ctx = conv.forward(rng.gaussian(0, 1, (1, 1, 5, 5)), {"W": W})
    conv.backward(np.ones_like(out), ctx, {"W": W})
    with pytest.raises(UsageError):
        conv.backward(np.ones_like(out), ctx, {"W": W})


def test_relu_hand_values():
    x = np.array([-1.0, 0.0, 2.0, -3.0]).reshape(1, 1, 2, 2)
    out, ctx = ReLU().forward(x)
    assert out.reshape(-1).tolist() == [0, 0, 2, 0]
    g, _ = ReLU().backward(np.ones_like(x), ctx)
    assert g.reshape(-1).tolist() == [0, 0, 1, 0]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4))
def test_relu_idempotent(vals):
    x = np.array(vals).reshape(1, 1, 2, 2)
    once, _ = ReLU().forward(x)
    twice, _ = ReLU().forward(once)
    assert np.array_equal(once, twice)


def test_maxpool_hand_example():
    x = np.array([1.0, 5.0, 3.0, 5.0]).reshape(1, 1, 2, 2)
    out, ctx = MaxPool2().forward(x)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 5
    g, _ = MaxPool2().backward(np.ones((1, 1, 1, 1)), ctx)
    assert g.reshape(-1).tolist() == [0, 1, 0, 0]  # switch at the first 5


def test_maxpool_constant_and_standard_shape():
    out, _ = MaxPool2().forward(np.full((1, 2, 6, 6), 3.0))
    assert out.shape == (1, 2, 3, 3) and np.all(out == 3.0)
    assert MaxPool2().output_shape((64, 92, 92)) == (64, 46, 46)
    assert MaxPool2().output_shape((128, 42, 42)) == (128, 21, 21)


def test_maxpool_odd_extent_drops_last_row(rng):
    x = rng.gaussian(0, 1, (1, 1, 5, 5))
    out, _ = MaxPool2().forward(x)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 1, 1] == x[0, 0, 2:4, 2:4].max()


def test_unpool_places_values_at_switches(rng):
    x = rng.gaussian(0, 1, (2, 3, 6, 6))
    out, ctx = MaxPool2().forward(x)
    up = MaxPool2.unpool(out, ctx["arg"], x.shape)
    assert np.count_nonzero(up) == out.size
    assert np.array_equal(np.sort(up[up != 0]), np.sort(out.reshape(-1)))


def test_quadrantpool():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out, _ = QuadrantPool().forward(x)
    assert out.reshape(-1).tolist() == [1, 2, 3, 4]
    out, _ = QuadrantPool().forward(np.full((1, 3, 7, 5), -2.0))
    assert np.all(out == -2.0)


def test_quadrant_areas_standard():
    areas = [(r.stop - r.start) * (c.stop - c.start) for r, c in quadrant_bounds(17, 17)]
    assert areas == [81, 72, 72, 64]
    assert QuadrantPool().output_shape((256, 17, 17)) == (256, 2, 2)


def test_fully_connected_hand_values():
    fc = FullyConnected(2)
    x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    out, _ = fc.forward(x, {"W": np.eye(2), "b": np.array([10.0, 20.0])})
    assert out.reshape(-1).tolist() == [11, 22]
    out, _ = fc.forward(x, {"W": np.eye(2), "b": np.zeros(2)})
    assert np.array_equal(out.reshape(-1), x.reshape(-1))
    assert fc.param_shapes((256, 2, 2)) == {"W": (1024, 2), "b": (2,)}


def test_dropout_identities(rng):
    x = rng.gaussian(0, 1, (4, 5, 1, 1))
    assert np.array_equal(Dropout(0.0).forward(x, train=True, rng=rng)[0], x)
    assert np.array_equal(Dropout(0.5).forward(x, train=False)[0], x)
    with pytest.raises(UsageError):
        Dropout(0.5).forward(x, train=True)
    with pytest.raises(DomainError):
        Dropout(1.0)


def test_dropout_expectation():
    x = np.ones((10_000, 3, 1, 1))
    out, _ = Dropout(0.5).forward(x, train=True, rng=Rng(11))
    assert np.all(np.abs(out.mean(axis=0) - 1.0) < 0.02)
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_softmax_xent_hand_values():
    loss, _, _ = softmax_xent(np.zeros((1, 8)), [3])
    assert math.isclose(loss, math.log(8), rel_tol=1e-12)
    loss, grad, _ = softmax_xent(np.array([[1000.0, 0.0]]), [0])
    assert loss < 1e-12 and np.all(np.isfinite(grad))
    loss, _, _ = softmax_xent(np.array([[1.0, 2.0]]), [1])
    assert math.isclose(loss, math.log(1 + math.exp(-1)), rel_tol=1e-12)
    assert abs(loss - 0.3133) < 5e-5


def test_softmax_xent_errors():
    with pytest.raises(DomainError):
        softmax_xent(np.zeros((1, 3)), [3])
    with pytest.raises(ShapeError):
        softmax_xent(np.zeros((2, 3)), [0])
    with pytest.raises(NumericError):
        softmax_xent(np.array([[np.nan, 0.0]]), [0])
