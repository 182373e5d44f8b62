import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddhum.errors import BlowUpError, ParameterError
from oddhum.grid import make_grid
from oddhum.heat import (
    ThetaStepper,
    dirichlet_matrix,
    smooth_to_midtime,
    solve_forward,
    solve_semilinear,
    solve_semilinear_stepping,
)


@pytest.mark.parametrize("theta", [0.5, 0.75, 1.0])
@pytest.mark.parametrize("mode", [1, 3])
def test_eigenmode_amplification(theta, mode):
    g = make_grid(1.0, 0.5, 31, 40)
    v = np.sin(mode * math.pi * g.x)
    mu = -(4 / g.dx**2) * math.sin(mode * math.pi * g.dx / 2) ** 2
    amp = (1 + (1 - theta) * g.dt * mu) / (1 - theta * g.dt * mu)
    y = solve_forward(v, None, g, theta=theta).y
    np.testing.assert_allclose(y, amp ** np.arange(g.nt + 1)[:, None] * v[None, :], atol=1e-13)


def test_dirichlet_matrix_matches_three_point_stencil():
    g = make_grid(1.0, 1.0, 5, 4)
    K = dirichlet_matrix(g, 2.0).toarray()
    assert K[0, 0] == pytest.approx(-4 / g.dx**2)
    assert K[0, 1] == pytest.approx(2 / g.dx**2)
    assert K[0, 2] == 0.0


@pytest.mark.parametrize("theta", [0.4, 1.1])
def test_theta_range(theta):
    g = make_grid(1.0, 1.0, 5, 5)
    with pytest.raises(ParameterError):
        ThetaStepper(g, theta)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_forward_solver_is_linear(a, b, seed):
    g = make_grid(1.0, 1.0, 8, 8)
    rng = np.random.default_rng(seed)
    y1, y2 = rng.standard_normal(g.nx), rng.standard_normal(g.nx)
    s1, s2 = rng.standard_normal(g.shape), rng.standard_normal(g.shape)
    lhs = solve_forward(a * y1 + b * y2, a * s1 + b * s2, g).y
    rhs = a * solve_forward(y1, s1, g).y + b * solve_forward(y2, s2, g).y
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


@pytest.mark.parametrize("N", [2, 3, 5])
@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_banach_matches_stepping_oracle(N, theta):
    g = make_grid(1.0, 1.0, 20, 40)
    y0 = 0.2 * np.sin(math.pi * g.x)
    src = g.sample(lambda t, x: 0.1 * np.cos(3 * t) * x * (1 - x))
    a = solve_semilinear(y0, src, N, g, theta=theta)
    b = solve_semilinear_stepping(y0, src, N, g, theta=theta)
    assert a.residual < 1e-12
    assert b.residual < 1e-12
    np.testing.assert_allclose(a.y, b.y, atol=1e-12)


def test_guard_raises_on_large_data():
    g = make_grid(1.0, 1.0, 10, 20)
    with pytest.raises(BlowUpError) as info:
        solve_semilinear(0.9 * np.sin(math.pi * g.x), None, 3, g)
    assert info.value.error_class == "BLOW_UP_GUARD"


def test_iteration_cap_is_an_error():
    g = make_grid(1.0, 1.0, 10, 20)
    with pytest.raises(BlowUpError):
        solve_semilinear(0.3 * np.sin(math.pi * g.x), None, 2, g, max_iter=2)


def test_midtime_profile():
    g = make_grid(1.0, 1.0, 10, 20)
    y0 = 0.01 * np.sin(math.pi * g.x)
    mid = smooth_to_midtime(y0, 3, g)
    assert mid.t == 0.5
    assert 0 < mid.linf < 0.01
    with pytest.raises(ParameterError):
        smooth_to_midtime(y0, 3, make_grid(1.0, 1.0, 10, 21))


def test_bad_initial_shape():
    g = make_grid(1.0, 1.0, 10, 20)
    with pytest.raises(ParameterError):
        solve_forward(np.zeros(9), None, g)


def test_trajectory_export(tmp_path):
    g = make_grid(1.0, 1.0, 4, 4)
    tr = solve_forward(np.ones(4), None, g)
    tr.export(tmp_path, "run")
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["terminal_linf"] == tr.terminal_norm()
    assert (tmp_path / "run.csv").exists()
