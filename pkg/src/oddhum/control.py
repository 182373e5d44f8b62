"""Control synthesis: linear and semilinear null control and the cascade pipeline.

Controls act through a smooth cutoff ``chi``: a duality solve returns ``h``
and the state equation sees the forcing ``h * chi``.  For the cascade, the
second equation is steered by a fictitious forcing that the first component
then reproduces through the coupling ``a21 * y1^N2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import (
    ConfigError,
    ControllabilityResidualError,
    FixedPointError,
    GeometryError,
    OddCouplingError,
    OddHumError,
    ParameterError,
    ShapeError,
    SmallnessError,
    StepError,
)
from .grid import SpaceTimeGrid, d_dt, laplacian, lp_norm, make_grid, write_field_csv, xp_norm
from .heat import Trajectory, solve_forward, solve_semilinear
from .hum import DualityResult, DualProblem, MinimizeOptions, odd_root, solve_duality
from .weights import ExponentSet, WeightFamily, select_exponents, weight_power


@dataclass
class ControlConfig:
    """Every knob of a synthesis run.  Defaults give the reference instance."""

    L: float = 1.0
    T: float = 1.0
    nx: int = 64
    nt: int = 128
    omega: tuple = (0.3, 0.7)
    n: int = 1
    N: int = 3
    N1: int = 2
    N2: int = 3
    N3: int = 2
    d1: float = 1.0
    d2: float = 1.0
    a11: float = 1.0
    a21: float = 1.0
    a22: float = 1.0
    delta: float = 1e-2
    theta: float = 0.5
    exponent_overrides: dict = field(default_factory=dict)
    fp_tol: float = 1e-10
    fp_max_iter: int = 50
    R0: float = 1.0
    betas: tuple = (1.0, 0.5, 0.25)
    tol_T_rel: float = 1e-6
    opt_tol: float = 1e-10
    opt_accept: float = 1e-8
    opt_max_iter: int = 200
    delta_guard: float = 0.5

    def __post_init__(self):
        self.omega = tuple(float(v) for v in self.omega)
        self.betas = tuple(float(v) for v in self.betas)

    def grid(self) -> SpaceTimeGrid:
        return make_grid(self.L, self.T, self.nx, self.nt)

    def violations(self, cascade: bool = False) -> list[str]:
        out = []
        a, b = self.omega
        if not 0 < a < b < self.L:
            out.append(f"control region: 0 < a < b < L violated by omega={self.omega}")
        if not self.delta >= 0:
            out.append(f"smallness: delta >= 0 violated by delta={self.delta}")
        for name in ("d1", "d2"):
            if not getattr(self, name) > 0:
                out.append(f"diffusion: {name} > 0 violated")
        if not 0.5 <= self.theta <= 1:
            out.append(f"scheme: 1/2 <= theta <= 1 violated by theta={self.theta}")
        if cascade and self.N2 % 2 == 0:
            out.append(f"odd coupling: N2 odd violated by N2={self.N2}")
        if cascade and self.a21 == 0:
            out.append("coupling: a21 != 0 violated")
        if cascade and self.nt % 2:
            out.append(f"split: nt even violated by nt={self.nt}")
        return out

    def validate(self, cascade: bool = False) -> "ControlConfig":
        bad = self.violations(cascade)
        if cascade and self.N2 % 2 == 0:
            raise OddCouplingError(
                f"N2={self.N2} is even: a nonnegative coupling cannot steer the second component to zero",
                N2=self.N2,
            )
        if bad:
            cls = GeometryError if bad[0].startswith("control region") else ConfigError
            raise cls("; ".join(bad), violations=bad)
        return self

    def exponents(self, N: int | None = None, n: int | None = None) -> ExponentSet:
        return select_exponents(self.n if n is None else n, 1, self.N if N is None else N, self.exponent_overrides)

    def minimize_options(self, zeta0=None) -> MinimizeOptions:
        return MinimizeOptions(tol=self.opt_tol, accept=self.opt_accept, max_iter=self.opt_max_iter, zeta0=zeta0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omega"] = list(self.omega)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ControlConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown control keys: {sorted(unknown)}")
        return cls(**data)


def chi_omega(grid: SpaceTimeGrid, omega, N2: int = 1) -> np.ndarray:
    """Bump ``exp(-1/(1-s^2))`` on omega (s maps omega onto (-1,1)), raised to N2."""
    a, b = map(float, omega)
    if not 0 < a < b < grid.L:
        raise GeometryError(f"omega=({a}, {b}) must lie strictly inside (0, {grid.L})")
    if int(N2) != N2 or N2 < 1:
        raise ParameterError(f"cutoff power must be a positive integer, got {N2}")
    s = (2 * grid.x - (a + b)) / (b - a)
    inside = np.abs(s) < 1
    bump = np.zeros(grid.nx)
    bump[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return bump ** int(N2)


def _tol_T(cfg: ControlConfig, y0, F=None) -> float:
    scale = float(np.max(np.abs(y0))) if np.size(y0) else 0.0
    if F is not None:
        scale += float(np.max(np.abs(F)))
    return cfg.tol_T_rel * scale


# --------------------------------------------------------------------------- linear


@dataclass
class LinearControlResult:
    duality: DualityResult
    replay: Trajectory
    terminal: float
    tol_T: float

    def diagnostics(self) -> dict:
        return {
            "optimizer": self.duality.report.to_dict(),
            "terminal_linf": self.terminal,
            "tol_T": self.tol_T,
            "h_linf": float(np.max(np.abs(self.duality.h))),
        }


def null_control_linear(y0, F, cfg: ControlConfig, *, check: bool = True) -> LinearControlResult:
    """Duality control for ``y_t - y_xx = F + h chi`` and a replay of it."""
    cfg.validate()
    grid = cfg.grid()
    y0 = np.asarray(y0, dtype=float)
    F = grid.zeros() if F is None else np.asarray(grid.check(F), dtype=float)
    exps = cfg.exponents()
    weights = WeightFamily.build(grid, exps)
    # data must lie in the weighted class; raises if F lives where rho vanishes
    lp_norm(F, grid, exps.p_dual, w=weights.power("rho", exps.m1, warn=False)[0])
    chi = chi_omega(grid, cfg.omega, cfg.N2)
    res = solve_duality(y0, F, weights, chi=chi, opts=cfg.minimize_options(), theta=cfg.theta)
    replay = solve_forward(y0, F + res.forcing, grid, theta=cfg.theta)
    out = LinearControlResult(res, replay, replay.terminal_norm(), _tol_T(cfg, y0, F))
    if check and out.terminal > out.tol_T:
        raise ControllabilityResidualError(
            f"replayed terminal norm {out.terminal:.3e} exceeds tol_T={out.tol_T:.3e}", **out.diagnostics()
        )
    return out


# --------------------------------------------------------------------------- semilinear


@dataclass
class FixedPointReport:
    iterations: int
    gaps: list
    betas: list
    converged: bool
    optimizer_iterations: list
    source_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SemilinearControlResult:
    duality: DualityResult
    source: np.ndarray
    replay: Trajectory
    fixed_point: FixedPointReport
    terminal: float
    tol_T: float
    grid: SpaceTimeGrid

    @property
    def forcing(self) -> np.ndarray:
        return self.duality.forcing

    def diagnostics(self) -> dict:
        return {
            "fixed_point": self.fixed_point.to_dict(),
            "optimizer": self.duality.report.to_dict(),
            "terminal_linf": self.terminal,
            "tol_T": self.tol_T,
            "h_linf": float(np.max(np.abs(self.duality.h))),
        }


def null_control_semilinear(
    y0,
    cfg: ControlConfig,
    *,
    grid: SpaceTimeGrid | None = None,
    N: int | None = None,
    n: int | None = None,
    coef: float = 1.0,
    diffusivity: float = 1.0,
    check: bool = True,
) -> SemilinearControlResult:
    """Null control of ``y_t - nu y_xx = coef y^N + h chi`` by damped Picard iteration.

    Each sweep solves the linear duality problem with source ``F_j`` and sets
    ``F_{j+1} = (1 - beta) F_j + beta coef y_j^N``.  Gap and ball radius use
    the ``L^q`` norm weighted by ``(rho / rho(0))^{-m1}``.  After two consecutive gap
    increases the next, smaller ``beta`` of ``cfg.betas`` is used.
    """
    cfg.validate()
    grid = cfg.grid() if grid is None else grid
    N = cfg.N if N is None else N
    y0 = np.asarray(y0, dtype=float)
    exps = cfg.exponents(N=N, n=n)
    weights = WeightFamily.build(grid, exps)
    # rho / rho(0) keeps the ball radius meaningful for any horizon
    w_m1, _ = weight_power(weights.log_rho - weights.log_rho[0], exps.m1)
    chi = chi_omega(grid, cfg.omega, cfg.N2)
    prob = DualProblem(weights, chi=chi, theta=cfg.theta, diffusivity=diffusivity)

    F = grid.zeros()
    zeta = None
    gaps, betas, opt_its = [], [], []
    beta_idx, rises = 0, 0
    converged = False
    res = None
    for it in range(1, cfg.fp_max_iter + 1):
        res = solve_duality(y0, F, weights, opts=cfg.minimize_options(zeta), problem=prob)
        zeta = res.zeta
        opt_its.append(res.report.iterations)
        NF = coef * res.y**N
        gap = lp_norm(NF - F, grid, exps.q, w=w_m1)
        size = lp_norm(NF, grid, exps.q, w=w_m1)
        if size > cfg.R0:
            raise SmallnessError(
                f"source norm {size:.3e} left the ball of radius R0={cfg.R0} at iteration {it}",
                iteration=it,
                gaps=gaps + [gap],
            )
        if gaps and gap > gaps[-1]:
            rises += 1
        else:
            rises = 0
        gaps.append(gap)
        if gap < cfg.fp_tol:
            converged = True
            break
        if rises >= 2 and beta_idx + 1 < len(cfg.betas):
            beta_idx += 1
            rises = 0
        beta = cfg.betas[beta_idx]
        betas.append(beta)
        F = (1 - beta) * F + beta * NF
    report = FixedPointReport(it, gaps, betas, converged, opt_its, lp_norm(F, grid, exps.q, w=w_m1))
    if not converged:
        raise FixedPointError(
            f"fixed point not reached in {cfg.fp_max_iter} iterations (last gap {gaps[-1]:.3e})",
            report=report.to_dict(),
        )
    replay = solve_semilinear(
        y0, res.forcing, N, grid, theta=cfg.theta, coef=coef, diffusivity=diffusivity, delta_guard=cfg.delta_guard
    )
    out = SemilinearControlResult(res, F, replay, report, replay.terminal_norm(), _tol_T(cfg, y0), grid)
    if check and out.terminal > out.tol_T:
        raise ControllabilityResidualError(
            f"replayed terminal norm {out.terminal:.3e} exceeds tol_T={out.tol_T:.3e}", **out.diagnostics()
        )
    return out


# --------------------------------------------------------------------------- cascade


@dataclass
class CascadeRun:
    """Record of a two-step cascade experiment on the full horizon."""

    grid: SpaceTimeGrid
    y10: np.ndarray
    y20: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    h: np.ndarray
    H: np.ndarray
    chi: np.ndarray
    diagnostics: dict
    config: dict

    @property
    def split(self) -> int:
        return self.grid.nt // 2

    def terminal_norms(self) -> dict:
        return {
            "y1_T": float(np.max(np.abs(self.y1[-1]))),
            "y2_T": float(np.max(np.abs(self.y2[-1]))),
            "y1_half": float(np.max(np.abs(self.y1[self.split]))),
        }

    def export(self, directory) -> None:
        directory = Path(directory)
        for name in ("y1", "y2", "h"):
            write_field_csv(directory / "fields" / f"{name}.csv", getattr(self, name), self.grid)
        half = SpaceTimeGrid(self.grid.L, self.grid.T / 2, self.grid.nx, self.split)
        write_field_csv(directory / "fields" / "H.csv", self.H, half)
        manifest = {"config": self.config, "diagnostics": self.diagnostics, "terminal": self.terminal_norms()}
        (directory / "cascade.json").write_text(json.dumps(manifest, indent=2, default=float))


def _half_grid(grid: SpaceTimeGrid) -> SpaceTimeGrid:
    return SpaceTimeGrid(grid.L, grid.T / 2, grid.nx, grid.nt // 2)


def _step(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except OddHumError as exc:
        raise StepError(name, exc) from exc


def cascade_control(y10, y20, cfg: ControlConfig) -> CascadeRun:
    """Two-step null control of the cascade system.

    Step 1 steers ``y1`` to zero on ``(0, T/2)`` while ``y2`` runs freely
    under the coupling.  Step 2 steers ``y2`` on ``(T/2, T)`` with a
    fictitious forcing ``a21 H chi`` (``H`` odd in the adjoint), then sets
    ``y1 = (H chi)^{1/N2}`` and reads off the real control from the first
    equation.
    """
    cfg.validate(cascade=True)
    grid = cfg.grid()
    y10 = np.asarray(y10, dtype=float)
    y20 = np.asarray(y20, dtype=float)
    half = _half_grid(grid)
    ns = half.nt
    n_odd = (cfg.N2 - 1) // 2
    chi = chi_omega(grid, cfg.omega, cfg.N2)

    step1 = _step(
        "step1", null_control_semilinear, y10, cfg, grid=half, N=cfg.N1, n=n_odd, coef=cfg.a11, diffusivity=cfg.d1
    )
    y1_a = step1.replay.y
    y2_a = _step(
        "step1-y2",
        solve_semilinear,
        y20,
        cfg.a21 * y1_a**cfg.N2,
        cfg.N3,
        half,
        theta=cfg.theta,
        coef=cfg.a22,
        diffusivity=cfg.d2,
        delta_guard=cfg.delta_guard,
    ).y
    y2_half = y2_a[-1].copy()

    step2 = _step(
        "step2",
        null_control_semilinear,
        y2_half,
        cfg,
        grid=half,
        N=cfg.N3,
        n=n_odd,
        coef=cfg.a22,
        diffusivity=cfg.d2,
        check=False,
    )
    H = step2.duality.h / cfg.a21
    y1_b = odd_root(H * chi[None, :], cfg.N2)
    h_b = d_dt(y1_b, half) - cfg.d1 * laplacian(y1_b, half) - cfg.a11 * y1_b**cfg.N1
    y2_b = step2.replay.y

    y1 = np.concatenate([y1_a[:-1], y1_b])
    y2 = np.concatenate([y2_a[:-1], y2_b])
    h_a = step1.forcing
    h = np.concatenate([h_a[:-1], h_b])

    coupling_gap = float(np.max(np.abs(cfg.a21 * y1_b**cfg.N2 - cfg.a21 * H * chi[None, :])))
    root = odd_root(H, cfg.N2)
    exps2 = cfg.exponents(N=cfg.N3, n=n_odd)
    outside = np.abs(h[:, chi == 0])
    diag = {
        "step1": step1.diagnostics(),
        "step2": step2.diagnostics(),
        "y1_half_linf": float(np.max(np.abs(y1_a[-1]))),
        "y2_half_linf": float(np.max(np.abs(y2_half))),
        "junction_jump": float(np.max(np.abs(h_a[-1] - h_b[0]))),
        "coupling_gap": coupling_gap,
        "H_root_endpoint_max": float(max(np.abs(root[0]).max(), np.abs(root[-1]).max())),
        "H_root_xp": xp_norm(root, half, exps2.p),
        "h_outside_omega_linf": float(outside.max()) if outside.size else 0.0,
        "h_lp": lp_norm(h, grid, exps2.p),
        "h_linf": float(np.max(np.abs(h))),
    }
    run = CascadeRun(grid, y10, y20, y1, y2, h, H, chi, diag, cfg.to_dict())
    diag["terminal"] = run.terminal_norms()
    return run


# --------------------------------------------------------------------------- replay


def _interp_control(h: np.ndarray, grid: SpaceTimeGrid, fine: SpaceTimeGrid):
    """Spline the control in space (zero ends) and, per half interval, in time."""
    if h.shape != grid.shape:
        raise ShapeError(f"control shape {h.shape} does not match grid {grid.shape}")
    xs = np.r_[0.0, grid.x, grid.L]
    padded = np.pad(h, ((0, 0), (1, 1)))
    hx = CubicSpline(xs, padded, axis=1, bc_type="clamped")(fine.x)
    if not np.all(np.isfinite(hx)):
        raise ShapeError("spatial interpolation of the control produced non-finite values")
    k = grid.nt // 2
    pieces = (CubicSpline(grid.t[: k + 1], hx[: k + 1], axis=0), CubicSpline(grid.t[k:], hx[k:], axis=0))
    t_half = grid.t[k]

    def at(t: float) -> np.ndarray:
        return pieces[0](t) if t <= t_half else pieces[1](t)

    return at


def _interp_profile(v: np.ndarray, grid: SpaceTimeGrid, fine: SpaceTimeGrid) -> np.ndarray:
    xs = np.r_[0.0, grid.x, grid.L]
    return CubicSpline(xs, np.r_[0.0, v, 0.0])(fine.x)


@dataclass
class ReplayReport:
    y1_T: float
    y2_T: float
    y1_half: float
    gap_y1: float
    gap_y2: float
    synthesis_terminal: dict
    fine_grid: dict
    solver: dict

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_cascade(y10, y20, control_at, grid: SpaceTimeGrid, cfg: ControlConfig, rtol=1e-11, atol=1e-15, t_eval=None):
    """Method-of-lines simulation of the coupled system with an implicit
    Runge-Kutta integrator (Radau IIA, adaptive steps)."""
    nx = grid.nx
    K = sp.diags([np.ones(nx - 1), -2 * np.ones(nx), np.ones(nx - 1)], [-1, 0, 1], format="csr") / grid.dx**2
    K1, K2 = cfg.d1 * K, cfg.d2 * K

    def rhs(t, u):
        y1, y2 = u[:nx], u[nx:]
        f1 = K1 @ y1 + cfg.a11 * y1**cfg.N1 + control_at(t)
        f2 = K2 @ y2 + cfg.a21 * y1**cfg.N2 + cfg.a22 * y2**cfg.N3
        return np.r_[f1, f2]

    def jac(t, u):
        y1, y2 = u[:nx], u[nx:]
        j11 = K1 + sp.diags(cfg.a11 * cfg.N1 * y1 ** (cfg.N1 - 1))
        j21 = sp.diags(cfg.a21 * cfg.N2 * y1 ** (cfg.N2 - 1))
        j22 = K2 + sp.diags(cfg.a22 * cfg.N3 * y2 ** (cfg.N3 - 1))
        return sp.bmat([[j11, None], [j21, j22]], format="csc")

    t_eval = grid.t if t_eval is None else t_eval
    sol = solve_ivp(
        rhs, (0.0, grid.T), np.r_[y10, y20], method="Radau", t_eval=t_eval, jac=jac, rtol=rtol, atol=atol
    )
    if not sol.success:
        raise OddHumError(f"replay integrator failed: {sol.message}")
    return sol.y[:nx].T, sol.y[nx:].T, {"method": "Radau", "rtol": rtol, "atol": atol, "nfev": int(sol.nfev)}


def replay_cascade(run: CascadeRun, cfg: ControlConfig, factor: int = 2, rtol: float = 1e-11, atol: float = 1e-15) -> ReplayReport:
    """Independent replay of a cascade run on a refined spatial grid.

    Only the initial data and the concatenated control are used.  Time
    integration is adaptive and implicit, so the replay shares neither grid
    nor scheme with the synthesis.
    """
    grid = run.grid
    fine = grid.refined(factor)
    control_at = _interp_control(run.h, grid, fine)
    y10 = _interp_profile(run.y10, grid, fine)
    y20 = _interp_profile(run.y20, grid, fine)
    y1, y2, info = simulate_cascade(y10, y20, control_at, fine, cfg, rtol, atol, t_eval=grid.t)
    # compare on the shared spatial nodes (every factor-th fine node)
    sub = slice(factor - 1, None, factor)
    return ReplayReport(
        y1_T=float(np.max(np.abs(y1[-1]))),
        y2_T=float(np.max(np.abs(y2[-1]))),
        y1_half=float(np.max(np.abs(y1[grid.nt // 2]))),
        gap_y1=float(np.max(np.abs(y1[:, sub] - run.y1))),
        gap_y2=float(np.max(np.abs(y2[:, sub] - run.y2))),
        synthesis_terminal=run.terminal_norms(),
        fine_grid=fine.to_dict(),
        solver=info,
    )
