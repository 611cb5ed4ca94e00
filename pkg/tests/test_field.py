import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarfield.errors import DomainError
from avatarfield.field import CanonicalField, MlpConfig, sigmoid, softplus
from avatarfield.hashgrid import HashGridConfig

SMALL_GRID = HashGridConfig(levels=2, features_per_level=2, table_size_log2=8, base_resolution=4, max_resolution=12)


def small_field(hidden=8, layers=2, seed=0):
    return CanonicalField(SMALL_GRID, MlpConfig(hidden=hidden, hidden_layers=layers), seed=seed, dtype=np.float64)


def test_zero_parameters_give_ln2_and_grey():
    f = small_field()
    for p in [f.grid.tables] + f.mlp.weights + f.mlp.biases:
        p[...] = 0.0
    sigma, color = f.query(np.array([0.3, -0.2, 0.5]))
    assert sigma == pytest.approx(math.log(2.0), abs=1e-15)
    np.testing.assert_allclose(color, [0.5, 0.5, 0.5], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_in_range(seed):
    f = small_field(seed=seed)
    rng = np.random.default_rng(seed)
    f.grid.tables[...] = rng.normal(scale=3.0, size=f.grid.tables.shape)
    sigma, color = f.query(rng.uniform(-1, 1, (64, 3)))
    assert np.all(np.isfinite(sigma)) and np.all(sigma >= 0)
    assert np.all((color >= 0) & (color <= 1))


def test_hand_evaluated_single_hidden_layer():
    grid = HashGridConfig(levels=1, features_per_level=2, table_size_log2=6, base_resolution=2, max_resolution=2)
    f = CanonicalField(grid, MlpConfig(hidden=2, hidden_layers=1), dtype=np.float64)
    # features constant 1 and -2 at every corner, so the encoding is (1, -2) everywhere
    f.grid.tables[...] = [1.0, -2.0]
    f.mlp.weights[0][...] = [[1.0, 0.5], [0.25, 1.0]]
    f.mlp.biases[0][...] = [0.0, 1.0]
    f.mlp.weights[1][...] = [[1.0, 2.0, -1.0, 0.0], [3.0, 0.0, 1.0, 1.0]]
    f.mlp.biases[1][...] = [0.5, 0.0, 0.0, -1.0]
    # hidden = relu([1 - 0.5, 0.5 - 2 + 1]) = relu([0.5, -0.5]) = [0.5, 0]
    # logits = [0.5 + 0.5, 1.0, -0.5, -1.0]
    sigma, color = f.query(np.zeros(3))
    assert sigma == pytest.approx(math.log1p(math.e), rel=1e-14)
    expected = [1 / (1 + math.exp(-1.0)), 1 / (1 + math.exp(0.5)), 1 / (1 + math.exp(1.0))]
    np.testing.assert_allclose(color, expected, rtol=1e-14)


def test_out_of_box_raises():
    with pytest.raises(DomainError):
        small_field().query(np.array([0.0, 2.0, 0.0]))


def test_activations_stable():
    x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    assert np.all(np.isfinite(softplus(x))) and np.all(np.isfinite(sigmoid(x)))
    np.testing.assert_allclose(softplus(x)[[0, 4]], [0.0, 800.0])
    np.testing.assert_allclose(sigmoid(x)[[0, 2, 4]], [0.0, 0.5, 1.0])


def test_zero_upstream_no_accumulation():
    f = small_field()
    f.query_backward(np.zeros((3, 3)), np.zeros(3), np.zeros((3, 3)))
    for _, _, g in f.parameters():
        assert not g.any()


def _fd_check(f, x, ws, wc, entries):
    def loss():
        s, c = f.query(x)
        return float(np.sum(ws * s) + np.sum(wc * c))

    eps = 1e-6
    for value, grad, idx in entries:
        orig = value[idx]
        value[idx] = orig + eps
        lp = loss()
        value[idx] = orig - eps
        lm = loss()
        value[idx] = orig
        fd = (lp - lm) / (2 * eps)
        assert math.isclose(grad[idx], fd, rel_tol=1e-4, abs_tol=1e-8), (idx, grad[idx], fd)


def test_mlp_gradients_match_fd():
    f = small_field()
    rng = np.random.default_rng(4)
    f.grid.tables[...] = rng.normal(scale=0.5, size=f.grid.tables.shape)
    x = rng.uniform(-1, 1, (5, 3))
    ws, wc = rng.normal(size=5), rng.normal(size=(5, 3))
    f.query_backward(x, ws, wc)
    entries = []
    for name, value, grad in f.parameters():
        if name.startswith("mlp"):
            for idx in np.ndindex(value.shape):
                entries.append((value, grad, idx))
    _fd_check(f, x, ws, wc, entries)


def test_grid_gradients_match_fd():
    f = small_field()
    rng = np.random.default_rng(5)
    f.grid.tables[...] = rng.normal(scale=0.5, size=f.grid.tables.shape)
    x = rng.uniform(-1, 1, (4, 3))
    ws, wc = rng.normal(size=4), rng.normal(size=(4, 3))
    f.query_backward(x, ws, wc)
    touched = [tuple(i) for i in np.argwhere(f.grid.grads != 0)]
    assert touched
    _fd_check(f, x, ws, wc, [(f.grid.tables, f.grid.grads, i) for i in touched])


def test_parameter_order():
    names = [n for n, _, _ in small_field().parameters()]
    assert names == ["grid.tables", "mlp.w0", "mlp.w1", "mlp.w2", "mlp.b0", "mlp.b1", "mlp.b2"]


def test_position_only():
    # the forward signature takes points alone; equal points give equal samples
    f = small_field()
    x = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]])
    s, c = f.query(x)
    assert s[0] == s[1] and np.array_equal(c[0], c[1])
