"""Property and diagnostic checks.

* empirical observability ratios over seeded batteries of smooth adjoint fields;
* a maximum-principle probe for the cascade with an even coupling power;
* finite-difference certification of the duality gradient, plus convexity spot checks;
* control-size scaling sweeps.

Every report records its seed, so a rerun with the same inputs is bitwise identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .control import ControlConfig, chi_omega, null_control_semilinear
from .errors import ParameterError, PreconditionError, SmallnessError, StepError, OddHumError
from .grid import SpaceTimeGrid, d_dt, laplacian, lp_norm, make_grid, profile_norm, xp_norm
from .heat import dirichlet_matrix
from .hum import XP, DualProblem
from .weights import WeightFamily


def default_workers() -> int:
    """Worker cap from ``ODDHUM_THREADS`` (default: CPU count, at most 8)."""
    raw = os.environ.get("ODDHUM_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ParameterError(f"ODDHUM_THREADS must be a positive integer, got {raw!r}") from exc
        if n < 1:
            raise ParameterError(f"ODDHUM_THREADS must be a positive integer, got {raw!r}")
        return n
    return min(8, os.cpu_count() or 1)


def _pmap(fn, items, workers: int | None = None) -> list:
    items = list(items)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- observability


@dataclass(frozen=True)
class AdjointSample:
    """Smooth adjoint-like field given by its sine-mode coefficients.

    ``zeta(t, x) = sum_k sin(k pi x / L) (a_k exp(-(k pi / L)^2 (T - t)) + b_k (t / T)^2)``.
    The first part solves the backward heat equation; the second does not.
    """

    a: np.ndarray
    b: np.ndarray

    def sample(self, grid: SpaceTimeGrid) -> np.ndarray:
        k = np.arange(1, len(self.a) + 1)
        lam = (k * math.pi / grid.L) ** 2
        modes = np.sin(np.outer(k, grid.x) * math.pi / grid.L)
        t = grid.t[:, None]
        coef = self.a[None, :] * np.exp(-lam[None, :] * (grid.T - t)) + self.b[None, :] * (t / grid.T) ** 2
        return coef @ modes


def random_adjoint_samples(seed: int, n_samples: int, modes: int = 4) -> list[AdjointSample]:
    if n_samples < 1:
        raise ParameterError(f"need n_samples >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        decay = 1.0 / np.arange(1, modes + 1)
        out.append(AdjointSample(rng.standard_normal(modes) * decay, rng.standard_normal(modes) * decay))
    return out


def observability_terms(zeta: np.ndarray, weights: WeightFamily, chi: np.ndarray, p: float) -> tuple[float, float]:
    """``(LHS, RHS)`` of the weighted observability inequality for one field."""
    grid = weights.grid
    e = weights.exponents
    r_m1, _ = weights.power("rho", e.m1, warn=False)
    r_m0, _ = weights.power("rho", e.m0, warn=False)
    r0_m0, _ = weights.power("rho0", e.m0, warn=False)
    lhs = profile_norm(zeta[0], grid, p) + lp_norm(zeta * r_m1[:, None], grid, p)
    residual = d_dt(zeta, grid) + laplacian(zeta, grid)
    rhs = lp_norm(residual * r_m0[:, None], grid, p) + lp_norm(zeta * r0_m0[:, None] * chi[None, :], grid, p)
    return lhs, rhs


@dataclass
class ObservabilityReport:
    lhs: list
    rhs: list
    ratios: list
    constant: float
    n_samples: int
    seed: int
    p: float
    grid: dict
    violations: list = field(default_factory=list)
    refinement: dict = field(default_factory=dict)

    @property
    def finite(self) -> bool:
        return all(math.isfinite(r) for r in self.ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "lhs", "rhs", "ratio"])
            for i, (l, r, q) in enumerate(zip(self.lhs, self.rhs, self.ratios)):
                w.writerow([i, repr(l), repr(r), repr(q)])


def observability_battery(
    weights: WeightFamily,
    grid: SpaceTimeGrid | None = None,
    p: float | None = None,
    n_samples: int = 100,
    seed: int = 0,
    omega=(0.3, 0.7),
    scale: float = 1.0,
    workers: int | None = None,
) -> ObservabilityReport:
    """Largest ratio LHS / RHS over a seeded battery of smooth adjoint fields.

    A sample with ``RHS = 0`` and ``LHS != 0`` is recorded in ``violations``
    and given an infinite ratio instead of raising.
    """
    grid = weights.grid if grid is None else grid
    if grid != weights.grid:
        raise ParameterError("weights were sampled on a different grid")
    p = weights.exponents.p if p is None else p
    chi = chi_omega(grid, omega, 1)
    samples = random_adjoint_samples(seed, n_samples)

    def one(s: AdjointSample):
        return observability_terms(scale * s.sample(grid), weights, chi, p)

    terms = _pmap(one, samples, workers)
    lhs = [t[0] for t in terms]
    rhs = [t[1] for t in terms]
    ratios, bad = [], []
    for i, (l, r) in enumerate(terms):
        if r == 0:
            ratios.append(0.0 if l == 0 else math.inf)
            if l != 0:
                bad.append(i)
        else:
            ratios.append(l / r)
    return ObservabilityReport(lhs, rhs, ratios, max(ratios), n_samples, seed, float(p), grid.to_dict(), bad)


def observability_refinement(
    exponents,
    nx_list=(32, 64, 128),
    n_samples: int = 100,
    seed: int = 0,
    L: float = 1.0,
    T: float = 1.0,
    omega=(0.3, 0.7),
) -> ObservabilityReport:
    """Run the same battery on grids with ``nt = 2 nx``; the finest grid's report
    carries the constant of every level in ``refinement``."""
    report = None
    series = {}
    for nx in nx_list:
        grid = make_grid(L, T, nx, 2 * nx)
        report = observability_battery(WeightFamily.build(grid, exponents), n_samples=n_samples, seed=seed, omega=omega)
        series[str(nx)] = report.constant
    report.refinement = series
    return report


# --------------------------------------------------------------------------- maximum principle


def max_principle_probe(y10, y20, cfg: ControlConfig, h=None) -> float:
    """Minimum of ``y2(T, .)`` for the cascade with even ``N2`` under backward Euler.

    The linear part is implicit and the reaction terms are frozen at the previous
    level (``a22 y2^N3`` is linearized into the diagonal), so each step
    inverts an M-matrix and keeps ``y2`` nonnegative for every control ``h``.
    """
    if cfg.N2 % 2:
        raise PreconditionError(f"the probe needs an even N2, got {cfg.N2}", N2=cfg.N2)
    if cfg.a21 < 0:
        raise PreconditionError(f"the probe needs a21 >= 0, got {cfg.a21}")
    grid = cfg.grid()
    y10 = np.asarray(y10, dtype=float)
    y20 = np.asarray(y20, dtype=float)
    if y10.shape != (grid.nx,) or y20.shape != (grid.nx,):
        raise ParameterError(f"initial profiles must have shape ({grid.nx},)")
    if np.any(y10 < 0) or np.any(y20 < 0):
        raise PreconditionError("initial data must be nonnegative")
    h = grid.zeros() if h is None else np.asarray(grid.check(h), dtype=float)
    dt = grid.dt
    eye = sp.identity(grid.nx, format="csc")
    lu1 = splu((eye / dt - dirichlet_matrix(grid, cfg.d1)).tocsc())
    B2 = (eye / dt - dirichlet_matrix(grid, cfg.d2)).tocsc()
    y1, y2 = y10.copy(), y20.copy()
    for n in range(1, grid.nt + 1):
        src1 = cfg.a11 * y1**cfg.N1 + h[n]
        react = cfg.a22 * y2 ** (cfg.N3 - 1)
        if np.any(react * dt >= 1):
            raise PreconditionError("time step too large for a monotone step", step=n)
        coupling = cfg.a21 * y1**cfg.N2
        y1 = lu1.solve(y1 / dt + src1)
        y2 = splu((B2 - sp.diags(react)).tocsc()).solve(y2 / dt + coupling)
    return float(y2.min())


# --------------------------------------------------------------------------- gradient and convexity


@dataclass
class GradientCertificate:
    worst: float
    errors: list
    seed: int
    trials: int
    step: float

    def to_dict(self) -> dict:
        return asdict(self)


def _random_problem(rng, grid: SpaceTimeGrid):
    zeta = AdjointSample(rng.standard_normal(4), rng.standard_normal(4)).sample(grid)
    zeta += 1e-2 * rng.standard_normal(grid.shape)
    v = rng.standard_normal(grid.shape)
    y0 = rng.standard_normal(grid.nx)
    F = rng.standard_normal(grid.shape)
    return zeta, v, y0, F


def _directional_error(prob: DualProblem, zeta, v, y0, F, step: float) -> float:
    b = prob.data_vector(y0, F)
    z, vv = np.asarray(zeta, dtype=XP), np.asarray(v, dtype=XP)
    exact = np.sum(prob.grad(z, b) * vv)
    fd = (prob.J(z + step * vv, b) - prob.J(z - step * vv, b)) / (2 * XP(step))
    if exact == 0 and fd == 0:
        return 0.0
    return float(abs(fd - exact) / max(abs(exact), abs(fd)))


def gradient_certify(
    seed: int,
    weights: WeightFamily,
    grid: SpaceTimeGrid | None = None,
    p: int | None = None,
    trials: int = 50,
    step: float = 1e-5,
    chi=None,
) -> GradientCertificate:
    """Compare ``<grad J, v>`` with central differences of J over random trials.

    Trial 0 is the zero problem (zero field, zero data), which must agree exactly.
    """
    if trials < 1:
        raise ParameterError(f"need trials >= 1, got {trials}")
    grid = weights.grid if grid is None else grid
    prob = DualProblem(weights, chi=chi, p=p, warn=False)
    rng = np.random.default_rng(seed)
    errors = [_directional_error(prob, grid.zeros(), rng.standard_normal(grid.shape), None, None, step)]
    for _ in range(trials - 1):
        zeta, v, y0, F = _random_problem(rng, grid)
        scale = 1.0 / max(1.0, float(np.max(np.abs(prob.A(np.asarray(zeta, dtype=XP))))))
        errors.append(_directional_error(prob, scale * zeta, v * scale, y0, F, step))
    return GradientCertificate(max(errors), errors, seed, trials, step)


def gradient_step_order(seed: int, weights: WeightFamily, steps=(4e-2, 2e-2, 1e-2), p: int | None = None) -> list[float]:
    """Observed orders ``log2(err(h) / err(h/2))`` of the central difference."""
    grid = weights.grid
    prob = DualProblem(weights, p=p, warn=False)
    rng = np.random.default_rng(seed)
    zeta, v, y0, F = _random_problem(rng, grid)
    s = 1.0 / float(np.max(np.abs(prob.A(np.asarray(zeta, dtype=XP)))))
    errs = [_directional_error(prob, s * zeta, s * v, y0, F, h) for h in steps]
    return [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]


@dataclass
class ConvexityReport:
    pairs: int
    failures: int
    min_gap: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def convexity_spot_check(seed: int, weights: WeightFamily, pairs: int = 100, chi=None) -> ConvexityReport:
    """Strict midpoint convexity ``J((z1+z2)/2) < (J(z1)+J(z2))/2`` on random pairs.

    The gap is measured relative to ``|J(z1)| + |J(z2)|``.
    """
    grid = weights.grid
    prob = DualProblem(weights, chi=chi, warn=False)
    rng = np.random.default_rng(seed)
    failures, min_gap = 0, math.inf
    for _ in range(pairs):
        z1, _, y0, F = _random_problem(rng, grid)
        z2 = _random_problem(rng, grid)[0]
        s = 1.0 / float(np.max(np.abs(prob.A(np.asarray(z1, dtype=XP)))))
        z1, z2 = np.asarray(s * z1, dtype=XP), np.asarray(s * z2, dtype=XP)
        b = prob.data_vector(y0, F)
        j1, j2, jm = prob.J(z1, b), prob.J(z2, b), prob.J((z1 + z2) / 2, b)
        gap = float(((j1 + j2) / 2 - jm) / (abs(j1) + abs(j2)))
        min_gap = min(min_gap, gap)
        if not gap > 0:
            failures += 1
    return ConvexityReport(pairs, failures, min_gap, seed)


# --------------------------------------------------------------------------- scaling


@dataclass
class ScalingTable:
    rows: list
    slope: float
    monotone: bool
    profile: str

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = list(self.rows[0]) if self.rows else ["delta"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.rows:
                w.writerow([repr(row[k]) for k in keys])
            w.writerow(["slope", repr(self.slope)] + [""] * (len(keys) - 2))


_NORMS = ("h_linf", "h_l2", "y_linf", "y_xp")


def loglog_slope(deltas, values) -> float:
    """Least-squares slope of ``log values`` against ``log deltas``."""
    return float(np.polyfit(np.log(np.asarray(deltas, float)), np.log(np.asarray(values, float)), 1)[0])


def scaling_sweep(deltas, cfg: ControlConfig, profile=None) -> ScalingTable:
    """Semilinear null control of ``delta * profile`` for each delta.

    ``profile`` defaults to ``sin(pi x / L)``.  The slope is the least-squares
    fit of ``log |h|_inf`` against ``log delta`` over the positive deltas.
    """
    deltas = [float(d) for d in deltas]
    if any(d < 0 for d in deltas):
        raise ParameterError("deltas must be nonnegative")
    if any(a < b for a, b in zip(deltas, deltas[1:])):
        raise ParameterError(f"deltas must be sorted in descending order, got {deltas}")
    grid = cfg.grid()
    prof = np.sin(math.pi * grid.x / grid.L) if profile is None else np.asarray(profile, dtype=float)
    peak = float(np.max(np.abs(prof)))
    for d in deltas:
        if d * peak >= cfg.delta_guard:
            raise SmallnessError(f"delta={d:g} exceeds the smallness budget {cfg.delta_guard:g}", delta=d)
    rows = []
    for d in deltas:
        if d == 0:
            rows.append({"delta": 0.0, **{k: 0.0 for k in _NORMS}, "iterations": 0, "terminal": 0.0})
            continue
        try:
            res = null_control_semilinear(d * prof, cfg)
        except OddHumError as exc:
            raise StepError(f"delta={d:g}", exc) from exc
        h, y = res.duality.h, res.replay.y
        rows.append(
            {
                "delta": d,
                "h_linf": float(np.max(np.abs(h))),
                "h_l2": lp_norm(h, grid, 2),
                "y_linf": float(np.max(np.abs(y))),
                "y_xp": xp_norm(y, grid, 2),
                "iterations": res.fixed_point.iterations,
                "terminal": res.terminal,
            }
        )
    pos = [r for r in rows if r["delta"] > 0]
    slope = math.nan
    if len(pos) >= 2:
        slope = loglog_slope([r["delta"] for r in pos], [r["h_linf"] for r in pos])
    monotone = all(a[k] >= b[k] for a, b in zip(rows, rows[1:]) for k in _NORMS)
    return ScalingTable(rows, slope, monotone, "sine" if profile is None else "custom")
