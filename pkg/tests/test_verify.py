import math

import numpy as np
import pytest

from oddhum.control import ControlConfig
from oddhum.errors import ParameterError, PreconditionError, SmallnessError
from oddhum.grid import make_grid
from oddhum.verify import (
    AdjointSample,
    convexity_spot_check,
    default_workers,
    gradient_certify,
    gradient_step_order,
    loglog_slope,
    max_principle_probe,
    observability_battery,
    observability_terms,
    scaling_sweep,
)
from oddhum.weights import WeightFamily, select_exponents


def test_backward_heat_sample_has_small_residual():
    g = make_grid(1.0, 1.0, 63, 400)
    a = np.array([1.0, 0.0, 0.0])
    zeta = AdjointSample(a, np.zeros(3)).sample(g)
    from oddhum.grid import d_dt, laplacian

    res = d_dt(zeta, g) + laplacian(zeta, g)
    assert np.max(np.abs(res)) < 1e-2 * np.max(np.abs(laplacian(zeta, g)))


def test_observability_ratio_is_scale_invariant(small_weights):
    r1 = observability_battery(small_weights, n_samples=10, seed=5)
    r2 = observability_battery(small_weights, n_samples=10, seed=5, scale=-1e7)
    np.testing.assert_allclose(r1.ratios, r2.ratios, rtol=1e-13)
    assert r1.finite and r1.violations == []
    assert r1.constant == max(r1.ratios)


def test_observability_battery_is_seeded(small_weights):
    a = observability_battery(small_weights, n_samples=8, seed=1, workers=1)
    b = observability_battery(small_weights, n_samples=8, seed=1, workers=4)
    assert a.to_dict() == b.to_dict()


def test_zero_rhs_is_flagged(small_weights):
    g = small_weights.grid
    chi = np.zeros(g.nx)
    lhs, rhs = observability_terms(g.zeros(), small_weights, chi, 4)
    assert lhs == 0 and rhs == 0


def test_observability_needs_samples(small_weights):
    with pytest.raises(ParameterError):
        observability_battery(small_weights, n_samples=0)


def test_gradient_certificate(small_weights):
    cert = gradient_certify(0, small_weights, trials=10)
    assert cert.errors[0] == 0.0
    assert cert.worst <= 1e-6
    assert cert.trials == 10


def test_central_difference_order(small_weights):
    orders = gradient_step_order(0, small_weights)
    assert all(abs(o - 2) < 0.1 for o in orders)


def test_convexity(small_weights):
    rep = convexity_spot_check(0, small_weights, pairs=20)
    assert rep.passed and rep.min_gap > 0


def test_probe_positive_for_even_coupling():
    cfg = ControlConfig(nx=16, nt=32, N2=2)
    g = cfg.grid()
    prof = np.sin(math.pi * g.x)
    h = 5.0 * np.cos(7 * g.t)[:, None] * np.ones(g.nx)[None, :]
    assert max_principle_probe(np.zeros(g.nx), prof, cfg, h) > 0
    assert max_principle_probe(np.zeros(g.nx), np.zeros(g.nx), cfg) == 0.0


def test_probe_preconditions():
    g = ControlConfig(nx=16, nt=32).grid()
    prof = np.sin(math.pi * g.x)
    with pytest.raises(PreconditionError):
        max_principle_probe(prof, prof, ControlConfig(nx=16, nt=32, N2=3))
    with pytest.raises(PreconditionError):
        max_principle_probe(-prof, prof, ControlConfig(nx=16, nt=32, N2=2))


def test_scaling_sweep_rows(small_cfg):
    table = scaling_sweep([1e-2, 1e-3, 0.0], small_cfg)
    assert table.rows[-1]["h_linf"] == 0.0 and table.rows[-1]["y_xp"] == 0.0
    assert table.monotone
    assert table.slope == pytest.approx(1.0, abs=0.2)


@pytest.mark.parametrize("deltas", [[1e-3, 1e-2], [-1.0]])
def test_scaling_sweep_rejects_bad_lists(small_cfg, deltas):
    with pytest.raises(ParameterError):
        scaling_sweep(deltas, small_cfg)


def test_scaling_sweep_smallness(small_cfg):
    with pytest.raises(SmallnessError):
        scaling_sweep([1.0], small_cfg)


def test_loglog_slope_exact_power():
    d = np.array([1e-1, 1e-2, 1e-3])
    assert loglog_slope(d, 3 * d**1.5) == pytest.approx(1.5)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("ODDHUM_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("ODDHUM_THREADS", "zero")
    with pytest.raises(ParameterError):
        default_workers()
