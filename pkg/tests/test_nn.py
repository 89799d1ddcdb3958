import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pharnet import tensor as T
from pharnet.nn import DSBlock, ParamStore, ResidualBlock, USBlock, ds_output_size, init_params
from pharnet.tensor import ShapeError, Tensor, grad_check


def _store_with(block_cls, *args, seed=0):
    store = ParamStore("blk")
    block = block_cls(store, "b", *args)
    init_params(store, seed=seed)
    return store, block


def _x(shape, seed=0, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, shape).astype(dtype))


def test_residual_block_zeroed_branch_is_relu():
    store, block = _store_with(ResidualBlock, 3)
    for path, t in store.params.items():
        t.data = np.zeros_like(t.data)
    x = _x((2, 3, 5, 4))
    np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9))
def test_residual_block_preserves_shape(h, w):
    _, block = _store_with(ResidualBlock, 2)
    assert block(_x((2, 2, h, w))).shape == (2, 2, h, w)


def test_residual_block_channel_mismatch():
    _, block = _store_with(ResidualBlock, 2)
    with pytest.raises(ShapeError, match="channels"):
        block(_x((1, 3, 4, 4)))


def test_residual_block_grad_check():
    store, block = _store_with(ResidualBlock, 2, seed=3)
    store.cast(np.float64)
    x = Tensor(np.random.default_rng(1).uniform(0.1, 1.0, (3, 2, 4, 4)), requires_grad=True)
    assert grad_check(lambda x: T.sum(T.square(block(x))), [x]) < 1e-3


@pytest.mark.parametrize("n, expected", [(256, 128), (2, 1), (5, 2), (64, 32)])
def test_ds_output_size(n, expected):
    assert ds_output_size(n) == expected
    _, block = _store_with(DSBlock, 1, 2)
    assert block(_x((2, 1, n, n), dtype=np.float32)).shape[2:] == (expected, expected)


def test_ds_block_rejects_tiny_input():
    _, block = _store_with(DSBlock, 1, 2)
    with pytest.raises(ShapeError):
        block(_x((1, 1, 1, 4)))


@pytest.mark.parametrize("h, w", [(1, 1), (3, 5), (8, 8)])
def test_us_block_doubles(h, w):
    _, block = _store_with(USBlock, 2, 3)
    assert block(_x((2, 2, h, w))).shape == (2, 3, 2 * h, 2 * w)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 16).map(lambda k: 2 * k), st.integers(1, 16).map(lambda k: 2 * k))
def test_ds_then_us_restores_even_dims(h, w):
    store = ParamStore("blk")
    ds, us = DSBlock(store, "d", 2, 4), USBlock(store, "u", 4, 2)
    init_params(store, seed=0)
    assert us(ds(_x((2, 2, h, w)))).shape == (2, 2, h, w)


def test_init_is_deterministic_and_bounded():
    a, _ = _store_with(ResidualBlock, 4, seed=7)
    b, _ = _store_with(ResidualBlock, 4, seed=7)
    for (pa, ta), (pb, tb) in zip(a, b):
        assert pa == pb
        np.testing.assert_array_equal(ta.data, tb.data)
    for path, t in a:
        kind = a.kinds[path]
        if kind == "conv_weight":
            bound = np.sqrt(6.0 / np.prod(t.shape[1:]))
            assert np.abs(t.data).max() <= bound
        elif kind == "bn_gamma":
            assert np.all(t.data == 1.0)
        else:
            assert np.all(t.data == 0.0)


def test_param_paths_unique_and_ordered():
    store = ParamStore("S")
    store.add_param("a.weight", (1,), "bias")
    store.add_param("b.weight", (1,), "bias")
    assert list(store.params) == ["S.a.weight", "S.b.weight"]
    with pytest.raises(KeyError):
        store.add_param("a.weight", (1,), "bias")


def test_adam_state_matches_param_shapes():
    store, _ = _store_with(ResidualBlock, 3)
    for path, t in store.params.items():
        assert store.adam[path].m.shape == t.shape
        assert store.adam[path].v.shape == t.shape


def test_frozen_store_blocks_gradients():
    store, block = _store_with(ResidualBlock, 2)
    x = _x((2, 2, 3, 3), dtype=np.float32)
    with store.frozen():
        y = block(x)
    assert not y.requires_grad
    assert all(t.requires_grad for t in store.params.values())
