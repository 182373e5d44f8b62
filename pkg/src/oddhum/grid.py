"""Uniform space-time lattice on (0, T) x (0, L) and discrete operators.

Fields are plain numpy arrays of shape ``(nt + 1, nx)``: one row per time
node ``t_n = n * dt`` (n = 0..nt) and one column per interior space node
``x_i = i * dx`` (i = 1..nx).  Homogeneous Dirichlet values at x = 0 and
x = L are never stored; every stencil treats them as zero ghost values.

Quadrature is the same everywhere: trapezoid rule in time, one node per cell
(``dx`` per interior node) in space.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError, WeightSingularityError


@dataclass(frozen=True)
class SpaceTimeGrid:
    L: float
    T: float
    nx: int
    nt: int

    @property
    def dx(self) -> float:
        return self.L / (self.nx + 1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nt + 1, self.nx)

    @cached_property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(1, self.nx + 1)

    @cached_property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)

    @cached_property
    def time_weights(self) -> np.ndarray:
        """Trapezoid weights over the time nodes."""
        w = np.full(self.nt + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def zeros(self, dtype=float) -> np.ndarray:
        return np.zeros(self.shape, dtype=dtype)

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(t, x)`` on the lattice (broadcast over a meshgrid)."""
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        return np.broadcast_to(np.asarray(fn(tt, xx), dtype=float), self.shape).copy()

    def check(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape != self.shape:
            raise ShapeError(f"field shape {f.shape} does not match grid {self.shape}")
        return f

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        """Grid whose nodes contain this grid's nodes (dx / factor, dt / factor)."""
        return SpaceTimeGrid(self.L, self.T, factor * (self.nx + 1) - 1, factor * self.nt)

    def to_dict(self) -> dict:
        return {"L": self.L, "T": self.T, "nx": self.nx, "nt": self.nt}


def make_grid(L: float, T: float, nx: int, nt: int) -> SpaceTimeGrid:
    if not (L > 0 and math.isfinite(L)):
        raise ParameterError(f"spatial length must be positive, got L={L}")
    if not (T > 0 and math.isfinite(T)):
        raise ParameterError(f"time horizon must be positive, got T={T}")
    if int(nx) != nx or int(nt) != nt:
        raise ParameterError("node counts must be integers")
    if nx < 3 or nt < 3:
        raise ParameterError(f"need nx >= 3 and nt >= 3, got nx={nx}, nt={nt}")
    return SpaceTimeGrid(float(L), float(T), int(nx), int(nt))


def d_dt(f: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Second-order time derivative: central inside, one-sided at t=0 and t=T."""
    f = grid.check(f)
    dt = grid.dt
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * dt)
    out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * dt)
    out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * dt)
    return out


def laplacian(f: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Three-point Laplacian along the last axis with zero Dirichlet ghosts.

    Accepts a full field or a single spatial profile.
    """
    f = np.asarray(f)
    if f.shape[-1] != grid.nx:
        raise ShapeError(f"last axis {f.shape[-1]} does not match nx={grid.nx}")
    out = -2.0 * f
    out[..., 1:] += f[..., :-1]
    out[..., :-1] += f[..., 1:]
    return out / grid.dx**2


def _safe_ratio(f: np.ndarray, w) -> np.ndarray:
    if w is None:
        return f
    w = np.asarray(w)
    if w.ndim == 1:
        w = w[:, None]
    w = np.broadcast_to(w, f.shape)
    zero = w == 0
    if np.any(zero & (f != 0)):
        raise WeightSingularityError("weight vanishes where the field is nonzero")
    out = np.zeros(f.shape, dtype=np.result_type(f, w))
    np.divide(f, w, out=out, where=~zero)
    return out


def lp_norm(f: np.ndarray, grid: SpaceTimeGrid, p: float = 2.0, w=None) -> float:
    """Weighted space-time L^p norm ``|| f / w ||_p``.

    ``w`` may be a time profile (length nt+1) or a full field; 0/0 counts as 0.
    """
    f = grid.check(f)
    if not p >= 1:
        raise ParameterError(f"need p >= 1, got {p}")
    g = np.abs(_safe_ratio(f, w))
    if math.isinf(p):
        return float(g.max()) if g.size else 0.0
    gmax = g.max()
    if gmax == 0:
        return 0.0
    # rescale before powering to keep |g|^p in range
    s = (g / gmax) ** p
    total = np.sum(grid.time_weights[:, None] * s) * grid.dx
    return float(gmax * total ** (1.0 / p))


def profile_norm(v: np.ndarray, grid: SpaceTimeGrid, p: float = 2.0) -> float:
    """Spatial L^p norm of a profile on the interior nodes."""
    v = np.abs(np.asarray(v, dtype=float))
    if math.isinf(p):
        return float(v.max())
    vmax = v.max()
    if vmax == 0:
        return 0.0
    return float(vmax * (np.sum((v / vmax) ** p) * grid.dx) ** (1.0 / p))


def xp_norm(f: np.ndarray, grid: SpaceTimeGrid, p: float = 2.0) -> float:
    """Surrogate of the maximal-regularity norm: ||f|| + ||d_t f|| + ||Lap f||."""
    if math.isinf(p):
        raise ParameterError("xp_norm needs finite p")
    f = grid.check(f)
    return lp_norm(f, grid, p) + lp_norm(d_dt(f, grid), grid, p) + lp_norm(laplacian(f, grid), grid, p)


def write_field_csv(path, f: np.ndarray, grid: SpaceTimeGrid) -> None:
    """Write ``t,x,value`` rows, time-outer, with round-trip float precision."""
    f = grid.check(f)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "value"])
        for n, tn in enumerate(grid.t):
            for i, xi in enumerate(grid.x):
                w.writerow([repr(float(tn)), repr(float(xi)), repr(float(f[n, i]))])


def read_field_csv(path, grid: SpaceTimeGrid) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != grid.shape[0] * grid.shape[1]:
        raise ShapeError(f"{path}: {len(rows)} rows, expected {grid.shape[0] * grid.shape[1]}")
    return np.array([float(r["value"]) for r in rows]).reshape(grid.shape)
