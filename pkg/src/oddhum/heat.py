"""Forward solvers for linear and semilinear 1D heat equations.

All solvers share one discrete scheme.  For ``n = 1..nt``

    (y^n - y^{n-1}) / dt - nu * K (theta y^n + (1 - theta) y^{n-1})
        = theta s^n + (1 - theta) s^{n-1},

where ``K`` is the three-point Dirichlet Laplacian and ``s`` the total
source sampled on the time nodes.  The duality solver in :mod:`oddhum.hum`
is built as the exact adjoint of this scheme, so its states replay here to
rounding error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import BlowUpError, ParameterError
from .grid import SpaceTimeGrid, write_field_csv


@dataclass
class Trajectory:
    """Discrete trajectory with the source that produced it."""

    y: np.ndarray
    g: np.ndarray
    y0: np.ndarray
    grid: SpaceTimeGrid
    scheme: str
    theta: float
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)

    @property
    def terminal(self) -> np.ndarray:
        return self.y[-1]

    def terminal_norm(self) -> float:
        return float(np.max(np.abs(self.y[-1]))) if self.grid.nx else 0.0

    def metadata(self) -> dict:
        return {
            "scheme": self.scheme,
            "theta": self.theta,
            "iterations": self.iterations,
            "residual": self.residual,
            "terminal_linf": self.terminal_norm(),
            "grid": self.grid.to_dict(),
        }

    def export(self, directory, stem: str = "trajectory") -> None:
        directory = Path(directory)
        write_field_csv(directory / f"{stem}.csv", self.y, self.grid)
        (directory / f"{stem}.json").write_text(json.dumps(self.metadata(), indent=2))


def _check_theta(theta: float) -> None:
    if not 0.5 <= theta <= 1.0:
        raise ParameterError(f"theta must lie in [1/2, 1], got {theta}")


def dirichlet_matrix(grid: SpaceTimeGrid, diffusivity: float = 1.0) -> sp.csc_matrix:
    """``nu * K``: three-point Laplacian on interior nodes."""
    nx = grid.nx
    main = np.full(nx, -2.0)
    off = np.ones(nx - 1)
    return (diffusivity / grid.dx**2) * sp.diags([off, main, off], [-1, 0, 1], format="csc")


class ThetaStepper:
    """Factorized one-step operator of the theta-scheme."""

    def __init__(self, grid: SpaceTimeGrid, theta: float = 0.5, diffusivity: float = 1.0):
        _check_theta(theta)
        if not diffusivity > 0:
            raise ParameterError(f"diffusivity must be positive, got {diffusivity}")
        self.grid, self.theta, self.nu = grid, theta, diffusivity
        K = dirichlet_matrix(grid, diffusivity)
        eye = sp.identity(grid.nx, format="csc")
        self.B1 = (eye / grid.dt - theta * K).tocsc()
        self.B0 = (-eye / grid.dt - (1 - theta) * K).tocsc()
        self._lu = splu(self.B1)

    def rhs(self, y_prev: np.ndarray, s_new: np.ndarray, s_old: np.ndarray) -> np.ndarray:
        return -(self.B0 @ y_prev) + self.theta * s_new + (1 - self.theta) * s_old

    def step(self, y_prev, s_new, s_old) -> np.ndarray:
        return self._lu.solve(self.rhs(y_prev, s_new, s_old))


def _as_profile(y0, grid: SpaceTimeGrid) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (grid.nx,):
        raise ParameterError(f"initial profile has shape {y0.shape}, expected ({grid.nx},)")
    return y0


def _as_source(g, grid: SpaceTimeGrid) -> np.ndarray:
    if g is None:
        return grid.zeros()
    return np.asarray(grid.check(g), dtype=float)


def _march(stepper: ThetaStepper, y0: np.ndarray, s: np.ndarray) -> np.ndarray:
    y = np.empty(s.shape)
    y[0] = y0
    for n in range(1, s.shape[0]):
        y[n] = stepper.step(y[n - 1], s[n], s[n - 1])
    return y


def solve_forward(y0, g, grid: SpaceTimeGrid, theta: float = 0.5, diffusivity: float = 1.0) -> Trajectory:
    """theta-scheme for ``y_t - nu y_xx = g`` with zero Dirichlet data."""
    y0 = _as_profile(y0, grid)
    g = _as_source(g, grid)
    stepper = ThetaStepper(grid, theta, diffusivity)
    y = _march(stepper, y0, g)
    return Trajectory(y, g, y0, grid, scheme=f"theta={theta:g}", theta=theta)


def solve_semilinear(
    y0,
    g,
    N: int,
    grid: SpaceTimeGrid,
    theta: float = 0.5,
    coef: float = 1.0,
    diffusivity: float = 1.0,
    delta_guard: float = 0.5,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> Trajectory:
    """Solve ``y_t - nu y_xx = coef * y^N + g`` by Banach iteration on the source.

    ``F_{j+1} = coef * S(y0, F_j + g)^N`` from ``F_0 = 0`` until the sup-norm
    gap drops below ``tol``.  Leaving the sup-norm ball of radius
    ``delta_guard`` (or hitting the cap) raises :class:`BlowUpError`.
    """
    if int(N) != N or N < 1:
        raise ParameterError(f"nonlinearity power must be a positive integer, got {N}")
    y0 = _as_profile(y0, grid)
    g = _as_source(g, grid)
    stepper = ThetaStepper(grid, theta, diffusivity)
    F = np.zeros_like(g)
    history = []
    for it in range(1, max_iter + 1):
        y = _march(stepper, y0, g + F)
        ymax = float(np.max(np.abs(y)))
        if not math.isfinite(ymax) or ymax > delta_guard:
            raise BlowUpError(
                f"iterate left the sup-norm ball of radius {delta_guard} (|y|_inf={ymax:.3e}); data too large",
                iteration=it,
                linf=ymax,
                delta_guard=delta_guard,
            )
        F_new = coef * y**N
        gap = float(np.max(np.abs(F_new - F)))
        history.append(gap)
        F = F_new
        if gap < tol:
            return Trajectory(y, g, y0, grid, f"banach(theta={theta:g})", theta, it, gap, history)
    raise BlowUpError(
        f"Banach iteration did not reach tol={tol:g} in {max_iter} iterations (gap={gap:.3e})",
        iteration=max_iter,
        history=history,
    )


def solve_semilinear_stepping(
    y0,
    g,
    N: int,
    grid: SpaceTimeGrid,
    theta: float = 0.5,
    coef: float = 1.0,
    diffusivity: float = 1.0,
    newton_tol: float = 1e-14,
    max_newton: int = 30,
) -> Trajectory:
    """Step-by-step oracle: the nonlinear term is taken inside the theta average
    and each step is closed with Newton's method.

    At convergence this is the same discrete system as :func:`solve_semilinear`,
    reached by a different algorithm.
    """
    y0 = _as_profile(y0, grid)
    g = _as_source(g, grid)
    stepper = ThetaStepper(grid, theta, diffusivity)
    y = np.empty_like(g)
    y[0] = y0
    worst = 0.0
    newton_total = 0
    for n in range(1, g.shape[0]):
        base = stepper.rhs(y[n - 1], g[n], g[n - 1]) + (1 - theta) * coef * y[n - 1] ** N
        z = stepper._lu.solve(base + theta * coef * y[n - 1] ** N)
        for _ in range(max_newton):
            res = stepper.B1 @ z - theta * coef * z**N - base
            jac = stepper.B1 - sp.diags(theta * coef * N * z ** (N - 1))
            dz = splu(jac.tocsc()).solve(res)
            z -= dz
            newton_total += 1
            if np.max(np.abs(dz)) <= newton_tol * (1 + np.max(np.abs(z))):
                break
        worst = max(worst, float(np.max(np.abs(stepper.B1 @ z - theta * coef * z**N - base))))
        y[n] = z
    return Trajectory(y, g, y0, grid, f"stepping(theta={theta:g})", theta, newton_total, worst)


@dataclass(frozen=True)
class MidtimeProfile:
    profile: np.ndarray
    linf: float
    t: float


def smooth_to_midtime(y0, N: int, grid: SpaceTimeGrid, coef: float = 1.0, theta: float = 0.5, **kwargs) -> MidtimeProfile:
    """Uncontrolled semilinear flow evaluated at ``T/2`` (``nt`` must be even)."""
    if grid.nt % 2:
        raise ParameterError(f"T/2 must be a time node; nt={grid.nt} is odd")
    traj = solve_semilinear(y0, None, N, grid, theta=theta, coef=coef, **kwargs)
    prof = traj.y[grid.nt // 2].copy()
    return MidtimeProfile(prof, float(np.max(np.abs(prof))), grid.T / 2)
