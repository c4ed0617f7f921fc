import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltri.errors import ConfigError, InvalidTrace
from ltri.tri_attention import (
    AttentionTile,
    build_tile,
    causal_mask,
    ta_field,
    ta_score,
    theta_from_quantile,
    triangle_counts,
)
from oracles import all_triangle_sums, random_stochastic_tile, triangle_sum


def test_uniform_logits_softmax():
    t = build_tile(np.zeros((2, 2)), apply_softmax=True)
    np.testing.assert_allclose(t.values[0], [[1.0, 0.0], [0.5, 0.5]])


def test_nonzero_above_diagonal_rejected():
    v = np.array([[[0.5, 0.5], [0.5, 0.5]]], dtype=np.float32)
    with pytest.raises(InvalidTrace):
        AttentionTile(v)


def test_build_tile_errors():
    with pytest.raises(InvalidTrace):
        build_tile(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(InvalidTrace):
        build_tile(np.array([[-0.1, 0.0], [0.0, 1.0]]))
    with pytest.raises(InvalidTrace):
        build_tile(np.zeros((3, 2)))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    t = build_tile(rng.normal(size=(2, 64, 64)), apply_softmax=True)
    np.testing.assert_allclose(t.values.sum(axis=2, dtype=np.float64), 1.0, atol=1e-6)


def test_rectangular_decode_row_sees_all_columns():
    m = causal_mask(1, 5)
    assert m.all()
    m = causal_mask(2, 4)
    assert m.tolist() == [[True, True, True, False], [True, True, True, True]]


def test_hand_field():
    tile = AttentionTile(np.array([[[1.0, 0.0], [0.5, 0.5]]], dtype=np.float32))
    f = ta_field(tile, 0.0)
    assert f.mass(0, 1) == 2.0
    assert f.mass(1, 1) == 0.5
    assert f.mass(0, 0) == 1.0
    g = ta_field(tile, 0.1)
    assert ta_score(g, 1, 1) == pytest.approx(0.4, abs=1e-12)
    assert ta_score(g, 0, 1) == pytest.approx(1.7, abs=1e-12)


def test_triangle_counts():
    t = triangle_counts(4)
    assert t[1, 0] == 3 and t[0, 0] == 1 and t[3, 0] == 10 and t[0, 1] == 0


def test_theta_range_and_span_bounds():
    tile = AttentionTile(random_stochastic_tile(np.random.default_rng(0), 1, 8))
    with pytest.raises(ConfigError):
        ta_field(tile, 1.0)
    with pytest.raises(ConfigError):
        ta_field(tile, -0.1)
    f = ta_field(tile, 0.0)
    with pytest.raises(IndexError):
        ta_score(f, 3, 2)
    with pytest.raises(IndexError):
        ta_score(f, 0, 8)


def test_quantile_matches_numpy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        tile = AttentionTile(random_stochastic_tile(rng, 2, int(rng.integers(1, 40))))
        nz = tile.values[tile.values > 0].astype(np.float64)
        for q in (0.0, 0.3, 0.9, 0.95, 1.0):
            assert theta_from_quantile(tile, q) == pytest.approx(float(np.quantile(nz, q)), rel=1e-12, abs=0)


def test_brute_force_h4_n128():
    rng = np.random.default_rng(7)
    v = random_stochastic_tile(rng, 4, 128)
    f = ta_field(AttentionTile(v), 0.05)
    ref = all_triangle_sums(v)
    iy, ix = np.tril_indices(128)
    np.testing.assert_allclose(f.cumulative[iy, ix], ref[iy, ix], rtol=1e-4)
    t = triangle_counts(128)
    np.testing.assert_allclose(f.thresholded[iy, ix], ref[iy, ix] - 4 * 0.05 * t[iy, ix], rtol=1e-4, atol=1e-9)


def test_full_span_and_diagonal():
    rng = np.random.default_rng(3)
    v = random_stochastic_tile(rng, 3, 50)
    f = ta_field(AttentionTile(v), 0.0)
    assert ta_score(f, 0, 49) == pytest.approx(150.0, abs=1e-3)
    for k in (0, 17, 49):
        assert ta_score(f, k, k) == pytest.approx(float(v[:, k, k].sum(dtype=np.float64)), rel=1e-9)


tiles = st.builds(
    lambda seed, h, n: random_stochastic_tile(np.random.default_rng(seed), h, n, 2.0),
    st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 40),
)


@given(tiles, st.floats(0.0, 0.5))
def test_threshold_identity(v, theta):
    f = ta_field(AttentionTile(v), theta)
    n = v.shape[-1]
    iy, ix = np.tril_indices(n)
    back = f.thresholded[iy, ix] + v.shape[0] * theta * triangle_counts(n)[iy, ix]
    np.testing.assert_allclose(back, f.cumulative[iy, ix], rtol=1e-12, atol=1e-12)
    assert np.isneginf(f.thresholded[np.triu_indices(n, 1)]).all()


@given(tiles, st.data())
def test_monotone_containment(v, data):
    n = v.shape[-1]
    f = ta_field(AttentionTile(v), 0.0)
    x = data.draw(st.integers(0, n - 1))
    y = data.draw(st.integers(x, n - 1))
    x2 = data.draw(st.integers(x, y))
    y2 = data.draw(st.integers(x2, y))
    assert f.mass(x2, y2) <= f.mass(x, y) + 1e-9
    assert f.mass(x, y) >= 0
    assert f.mass(x, y) == pytest.approx(triangle_sum(v, x, y), rel=1e-9, abs=1e-12)


@given(st.integers(1, 4), st.integers(1, 64), st.integers(0, 1000))
def test_normalization(h, n, seed):
    v = random_stochastic_tile(np.random.default_rng(seed), h, n)
    f = ta_field(AttentionTile(v), 0.0)
    assert abs(ta_score(f, 0, n - 1) - h * n) <= 1e-3
