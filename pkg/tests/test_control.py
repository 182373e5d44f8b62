import json
import math

import numpy as np
import pytest

from oddhum.control import (
    ControlConfig,
    _interp_control,
    cascade_control,
    chi_omega,
    null_control_linear,
    null_control_semilinear,
    replay_cascade,
)
from oddhum.errors import ConfigError, GeometryError, OddCouplingError, PreconditionError, SmallnessError, StepError
from oddhum.grid import make_grid


def test_chi_support_and_power():
    g = make_grid(1.0, 1.0, 99, 4)
    chi = chi_omega(g, (0.3, 0.7))
    inside = (g.x > 0.3) & (g.x < 0.7)
    assert np.all(chi[~inside] == 0) and np.all(chi[inside] > 0)
    assert chi.max() == pytest.approx(math.exp(-1), rel=1e-3)
    np.testing.assert_allclose(chi_omega(g, (0.3, 0.7), 3), chi**3)
    with pytest.raises(GeometryError):
        chi_omega(g, (0.7, 0.3))


def test_even_coupling_rejected_with_stable_class():
    with pytest.raises(OddCouplingError) as info:
        ControlConfig(N2=2).validate(cascade=True)
    assert info.value.error_class == "N2_MUST_BE_ODD"
    assert isinstance(info.value, PreconditionError)
    ControlConfig(N2=2).validate(cascade=False)


@pytest.mark.parametrize(
    "kwargs,cls",
    [({"omega": (0.5, 1.5)}, GeometryError), ({"theta": 0.2}, ConfigError), ({"delta": -1.0}, ConfigError), ({"d1": 0.0}, ConfigError)],
)
def test_config_validation(kwargs, cls):
    with pytest.raises(cls):
        ControlConfig(**kwargs).validate()


def test_odd_split_rejected():
    with pytest.raises(ConfigError):
        ControlConfig(nt=33).validate(cascade=True)


def test_config_round_trip():
    cfg = ControlConfig(nx=20, exponent_overrides={"m0": 1.2})
    again = ControlConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ConfigError):
        ControlConfig.from_dict({"bogus": 1})


def test_linear_null_control(small_cfg, sine):
    g = small_cfg.grid()
    res = null_control_linear(sine(g, 0.01), None, small_cfg)
    assert res.terminal <= res.tol_T
    chi = chi_omega(g, small_cfg.omega, small_cfg.N2)
    assert np.all(res.duality.h[:, chi == 0] == 0)


def test_linear_null_control_with_source(small_cfg, sine):
    g = small_cfg.grid()
    F = g.sample(lambda t, x: 1e-3 * np.sin(math.pi * x) * (t < 0.4))
    res = null_control_linear(sine(g, 0.01), F, small_cfg)
    assert res.terminal <= res.tol_T


def test_semilinear_null_control(small_cfg, sine):
    g = small_cfg.grid()
    res = null_control_semilinear(sine(g, 0.01), small_cfg)
    assert res.fixed_point.converged
    assert res.fixed_point.gaps[-1] < small_cfg.fp_tol
    assert res.terminal <= res.tol_T


def test_semilinear_smallness_guard(small_cfg, sine):
    cfg = ControlConfig(nx=16, nt=32, R0=1e-12)
    with pytest.raises(SmallnessError):
        null_control_semilinear(sine(cfg.grid(), 0.01), cfg)


@pytest.fixture(scope="module")
def small_cascade():
    # the time step must resolve the weight decay near t = T for Newton to converge
    cfg = ControlConfig(nx=16, nt=64)
    g = cfg.grid()
    y0 = 0.01 * np.sin(math.pi * g.x)
    return cfg, cascade_control(y0, y0, cfg)


def test_cascade_synthesis(small_cascade):
    cfg, run = small_cascade
    term = run.terminal_norms()
    assert term["y1_T"] == 0.0
    assert term["y1_half"] <= 1e-6 * cfg.delta
    assert term["y2_T"] <= cfg.tol_T_rel * cfg.delta
    d = run.diagnostics
    assert d["coupling_gap"] <= 1e-12
    # the three-point Laplacian spreads the support of y1 by one node
    near = np.convolve(run.chi > 0, np.ones(3), mode="same") > 0
    assert np.all(run.h[:, ~near] == 0)
    assert d["H_root_endpoint_max"] == 0.0
    assert math.isfinite(d["junction_jump"])


def test_cascade_replay_runs(small_cascade):
    cfg, run = small_cascade
    rep = replay_cascade(run, cfg)
    assert rep.fine_grid["nx"] == 2 * (cfg.nx + 1) - 1
    assert all(math.isfinite(v) for v in (rep.y1_T, rep.y2_T, rep.gap_y1, rep.gap_y2))


def test_cascade_export(tmp_path, small_cascade):
    _, run = small_cascade
    run.export(tmp_path)
    assert {p.name for p in (tmp_path / "fields").iterdir()} == {"y1.csv", "y2.csv", "h.csv", "H.csv"}
    assert "terminal" in json.loads((tmp_path / "cascade.json").read_text())


def test_cascade_step_failure_names_the_step(sine):
    cfg = ControlConfig(nx=16, nt=64, R0=1e-12)
    g = cfg.grid()
    with pytest.raises(StepError) as info:
        cascade_control(sine(g, 0.01), sine(g, 0.01), cfg)
    assert info.value.step == "step1"
    assert info.value.error_class == "SMALLNESS_VIOLATION"


def test_control_interpolation_reproduces_nodes():
    g = make_grid(1.0, 1.0, 9, 8)
    h = g.sample(lambda t, x: np.sin(math.pi * x) * np.cos(t))
    at = _interp_control(h, g, g.refined(2))
    for n in (0, 3, 4, 8):
        np.testing.assert_allclose(at(g.t[n])[1::2], h[n], atol=1e-12)
