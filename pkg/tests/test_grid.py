import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddhum.errors import ParameterError, ShapeError, WeightSingularityError
from oddhum.grid import (
    SpaceTimeGrid,
    d_dt,
    laplacian,
    lp_norm,
    make_grid,
    profile_norm,
    read_field_csv,
    write_field_csv,
    xp_norm,
)


def test_spacing_and_shape():
    g = make_grid(2.0, 1.0, 9, 20)
    assert g.dx == pytest.approx(0.2)
    assert g.dt == pytest.approx(0.05)
    assert g.shape == (21, 9)
    assert g.x[0] == pytest.approx(0.2) and g.x[-1] == pytest.approx(1.8)
    assert g.time_weights.sum() == pytest.approx(1.0)


@pytest.mark.parametrize(
    "args",
    [(0.0, 1.0, 8, 8), (1.0, -1.0, 8, 8), (1.0, 1.0, 2, 8), (1.0, 1.0, 8, 2), (1.0, 1.0, 8.5, 8), (math.inf, 1.0, 8, 8)],
)
def test_make_grid_rejects(args):
    with pytest.raises(ParameterError):
        make_grid(*args)


@given(st.integers(3, 40), st.integers(3, 40), st.integers(2, 4))
def test_refined_grid_contains_coarse_nodes(nx, nt, factor):
    g = SpaceTimeGrid(1.0, 1.0, nx, nt)
    f = g.refined(factor)
    np.testing.assert_allclose(f.x[factor - 1 :: factor], g.x, atol=1e-13)
    np.testing.assert_allclose(f.t[::factor], g.t, atol=1e-13)


def test_d_dt_exact_on_quadratics():
    g = make_grid(1.0, 2.0, 5, 10)
    f = g.sample(lambda t, x: 3 * t**2 - t + x)
    np.testing.assert_allclose(d_dt(f, g), g.sample(lambda t, x: 6 * t - 1 + 0 * x), atol=1e-12)


def test_laplacian_exact_on_vanishing_quadratic():
    g = make_grid(1.5, 1.0, 11, 4)
    v = g.x * (g.L - g.x)
    np.testing.assert_allclose(laplacian(v, g), -2.0, atol=1e-11)
    with pytest.raises(ShapeError):
        laplacian(np.zeros(3), g)


def test_lp_norm_of_constant():
    g = make_grid(1.0, 1.0, 7, 9)
    c = 0.3
    measure = g.T * g.nx * g.dx
    assert lp_norm(np.full(g.shape, c), g, 3) == pytest.approx(c * measure ** (1 / 3))
    assert lp_norm(np.full(g.shape, -c), g, math.inf) == pytest.approx(c)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-30, 1e30), st.sampled_from([1.0, 2.0, 4.0, 4 / 3]))
def test_lp_norm_homogeneous(scale, p):
    g = make_grid(1.0, 1.0, 6, 6)
    f = np.random.default_rng(0).standard_normal(g.shape)
    assert lp_norm(scale * f, g, p) == pytest.approx(scale * lp_norm(f, g, p), rel=1e-12)


def test_weighted_norm_conventions():
    g = make_grid(1.0, 1.0, 4, 4)
    w = np.ones(g.nt + 1)
    w[-1] = 0.0
    f = np.ones(g.shape)
    f[-1] = 0.0
    assert lp_norm(f, g, 2, w=w) == pytest.approx(lp_norm(f, g, 2))
    f[-1, 0] = 1.0
    with pytest.raises(WeightSingularityError):
        lp_norm(f, g, 2, w=w)


def test_profile_and_xp_norm():
    g = make_grid(1.0, 1.0, 9, 9)
    assert profile_norm(np.zeros(9), g) == 0.0
    assert profile_norm(np.full(9, 2.0), g, math.inf) == 2.0
    assert xp_norm(g.zeros(), g) == 0.0
    with pytest.raises(ParameterError):
        xp_norm(g.zeros(), g, math.inf)


def test_shape_check():
    g = make_grid(1.0, 1.0, 4, 4)
    with pytest.raises(ShapeError):
        g.check(np.zeros((4, 4)))


def test_csv_round_trip_is_bitwise(tmp_path):
    g = make_grid(1.0, 1.0, 5, 6)
    f = np.random.default_rng(1).standard_normal(g.shape) * 1e-7
    write_field_csv(tmp_path / "f.csv", f, g)
    assert np.array_equal(read_field_csv(tmp_path / "f.csv", g), f)
    with pytest.raises(ShapeError):
        read_field_csv(tmp_path / "f.csv", make_grid(1.0, 1.0, 5, 7))
