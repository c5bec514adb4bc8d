import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zbcnn.errors import DomainError, ShapeError, SizeError, UsageError
from zbcnn.tensor import Rng, Tensor, elementwise, reduce, tensor_new


def t4(values, shape=(1, 1, 2, 2), precision=64):
    return Tensor(np.asarray(values, dtype=float).reshape(shape), precision)


def test_constant_zero_fill():
    t = tensor_new((1, 1, 2, 2), ("constant", 0.0))
    assert t.shape == (1, 1, 2, 2)
    assert np.all(t.data == 0.0)


def test_gaussian_fill_same_seed_same_scalar():
    a = tensor_new((1, 1, 1, 1), ("gaussian", 0.0, 1.0), Rng(7))
    b = tensor_new((1, 1, 1, 1), ("gaussian", 0.0, 1.0), Rng(7))
    assert a == b


def test_data_length_is_product_of_extents():
    t = tensor_new((2, 3, 5, 5), ("uniform", -1.0, 1.0), Rng(0))
    assert len(t) == 150 and t.data.size == 150


def test_bad_shapes():
    with pytest.raises(ShapeError):
        tensor_new((1, -1, 2, 2))
    with pytest.raises(ShapeError):
        tensor_new((2, 2))
    with pytest.raises(SizeError):
        tensor_new((2 ** 20, 2 ** 20, 2 ** 20, 2 ** 20))
    with pytest.raises(UsageError):
        tensor_new((1, 1, 1, 1), ("gaussian", 0.0, 1.0))


def test_precision_tag():
    assert tensor_new((1, 1, 1, 1), precision=32).dtype == np.float32
    assert tensor_new((1, 1, 1, 1), precision=64).precision == 64


def test_elementwise_hand_values():
    x = t4([1, 2, 3, 4])
    assert elementwise("mul", x, t4([2, 2, 2, 2])) == t4([2, 4, 6, 8])
    assert elementwise("add", x, tensor_new((1, 1, 2, 2), precision=64)) == x
    assert elementwise("scale", x, 1.0) == x
    assert elementwise("map", x, fn=lambda v: v * v) == t4([1, 4, 9, 16])


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        elementwise("add", t4([1, 2, 3, 4]), t4([1, 2], (1, 1, 1, 2)))
    with pytest.raises(DomainError):
        elementwise("add", t4([1, 2, 3, 4], precision=32), t4([1, 2, 3, 4], precision=64))


def test_reduce_hand_values():
    assert reduce("max", tensor_new((1, 2, 3, 3), 2.5, precision=64)) == 2.5
    assert reduce("sum", tensor_new((1, 1, 3, 3), 1.0)) == 9
    values, pos = reduce("max", t4([1, 5, 3, 5]), "per-channel-spatial")
    assert values[0, 0] == 5
    assert tuple(pos[0, 0]) == (0, 1)  # first of the two 5s


def test_reduce_empty_is_domain_error():
    with pytest.raises(DomainError):
        reduce("max", tensor_new((0, 1, 2, 2)))
    with pytest.raises(DomainError):
        reduce("max", tensor_new((1, 1, 0, 2)), "per-channel-spatial")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_sum_is_order_independent(vals):
    a = Tensor(np.array(vals).reshape(1, 1, 1, -1))
    b = Tensor(np.array(vals[::-1]).reshape(1, 1, 1, -1))
    assert reduce("sum", a) == reduce("sum", b) == math.fsum(vals)


def test_rng_streams():
    assert np.array_equal(Rng(3).uniform(0, 1, 5), Rng(3).uniform(0, 1, 5))
    assert not np.array_equal(Rng(3).child(0).uniform(0, 1, 5), Rng(3).child(1).uniform(0, 1, 5))
    assert np.array_equal(Rng(3).child(2).gaussian(0, 1, 4), Rng(3).child(2).gaussian(0, 1, 4))
    with pytest.raises(DomainError):
        Rng(0).bernoulli(1.5, 3)
