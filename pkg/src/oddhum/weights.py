"""Time weights, exponent bookkeeping and Carleman inspection fields.

The two time weights are

    rho0(t) = exp(-1 / (t (T - t)))            vanishing at both ends,
    rho(t)  = exp(-4 / T^2)   for t < T/2,     flat plateau,
            = rho0(t)         for t >= T/2,    vanishing at T only.

Powers of the weights are formed in log space and exponentiated once; values
below ``CLIP_FLOOR`` are flushed to zero and counted.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConstraintError, DomainError, GeometryError, ParameterError
from .grid import SpaceTimeGrid

CLIP_FLOOR = 1e-300
_LOG_CLIP = math.log(CLIP_FLOOR)
_T_SLACK = 1e-12


class WeightUnderflowWarning(RuntimeWarning):
    pass


def _as_time(t, T: float) -> np.ndarray:
    if not T > 0:
        raise DomainError(f"horizon must be positive, got T={T}")
    arr = np.asarray(t, dtype=float)
    if np.any(arr < -_T_SLACK * T) or np.any(arr > T * (1 + _T_SLACK)):
        raise DomainError(f"time outside [0, {T}]")
    return np.clip(arr, 0.0, T)


def log_rho0(t, T: float) -> np.ndarray:
    """log rho0; ``-inf`` at t = 0 and t = T."""
    t = _as_time(t, T)
    out = np.full(t.shape, -np.inf)
    inside = (t > 0) & (t < T)
    out[inside] = -1.0 / (t[inside] * (T - t[inside]))
    return out


def log_rho(t, T: float) -> np.ndarray:
    t = _as_time(t, T)
    out = log_rho0(t, T)
    out[t < T / 2] = -4.0 / T**2
    return out


def rho0(t, T: float):
    out = np.exp(log_rho0(t, T))
    return float(out) if np.ndim(t) == 0 else out


def rho(t, T: float):
    out = np.exp(log_rho(t, T))
    return float(out) if np.ndim(t) == 0 else out


def weight_power(log_w: np.ndarray, exponent: float) -> tuple[np.ndarray, int]:
    """``exp(exponent * log_w)`` flushed to 0 below the clip floor.

    Returns the values and the number of entries that were nonzero in exact
    arithmetic but fell below the floor.
    """
    lw = exponent * np.asarray(log_w, dtype=float)
    finite = np.isfinite(lw)
    clipped = finite & (lw < _LOG_CLIP)
    out = np.zeros(lw.shape)
    keep = finite & ~clipped
    out[keep] = np.exp(lw[keep])
    return out, int(clipped.sum())


# --------------------------------------------------------------------------- exponents


@dataclass(frozen=True)
class ExponentSet:
    """Scalar exponents of the weighted duality.

    ``p = (2n+1)(2k+1) + 1`` is the duality exponent, ``q`` the regularity
    exponent of the fixed point, ``r`` the ratio bounding the weight exponents
    ``m0 < M0 < m1 < r * m0`` and ``m`` the solution weight exponent.
    """

    d: int
    n: int
    k: int
    N: int
    p: int
    p_dual: float
    q: float
    r: float
    m0: float
    M0: float
    m1: float
    m: float

    def violations(self) -> list[str]:
        return _violations(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ExponentSet":
        exps = cls(**{f: data[f] for f in cls.__dataclass_fields__})
        bad = exps.violations()
        if bad:
            raise ConstraintError(bad)
        return exps


def _violations(e: ExponentSet) -> list[str]:
    out = []
    tol = 1e-12

    def need(ok: bool, name: str, text: str):
        if not ok:
            out.append(f"{name}: {text} violated")

    need(e.d >= 1, "dimension", "d >= 1")
    need(e.n >= 0 and e.k >= 0, "oddness integers", "n >= 0 and k >= 0")
    need(e.N >= 2, "nonlinearity", "N >= 2")
    need(e.p == (2 * e.n + 1) * (2 * e.k + 1) + 1, "odd duality exponent", "p = (2n+1)(2k+1)+1")
    need(e.p % 2 == 0, "even duality exponent", "p even")
    need(e.p > (e.d + 2) / 2, "algebra threshold", "p > (d+2)/2")
    need(abs(1 / e.p + 1 / e.p_dual - 1) < tol, "conjugate exponent", "1/p + 1/p' = 1")
    need(e.q >= e.p_dual - tol, "regularity exponent", "q >= p'")
    need((1 / e.q) * (1 - 1 / e.N) < 2 / (2 + e.d), "compact embedding", "(1/q)(1-1/N) < 2/(2+d)")
    need(abs(e.r - e.p / (e.p - 1 + 1 / e.N)) < tol, "ratio definition", "r = p/(p-1+1/N)")
    need(1 < e.r < e.p_dual, "ratio range", "1 < r < p'")
    need(e.m0 > 0, "base weight", "m0 > 0")
    need(e.m0 < e.m1, "weight order lower", "m0 < m1")
    need(e.m1 < e.r * e.m0, "weight order upper", "m1 < r*m0")
    need(e.m0 < e.M0 < e.r * e.m0, "L2 weight order", "m0 < M0 < r*m0")
    gap = e.m0 * e.p - e.m1 * (e.p - 1)
    need(0 <= e.m < gap, "solution weight", "0 <= m < m0*p - m1*(p-1)")
    need(e.m1 / e.N < gap, "nonlinear weight", "m1/N < m0*p - m1*(p-1)")
    return out


def select_exponents(n: int, d: int, N: int, overrides: dict | None = None) -> ExponentSet:
    """Smallest admissible exponent set, optionally with user overrides.

    Overridable keys: ``k, q, m0, m1, M0, m``.  Derived quantities (``p``,
    ``p_dual``, ``r``) follow from the overrides; every constraint is checked
    and all violations are reported together.
    """
    if n < 0 or d < 1 or N < 2:
        raise ParameterError(f"need n >= 0, d >= 1, N >= 2; got n={n}, d={d}, N={N}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"k", "q", "m0", "m1", "M0", "m"}
    if unknown:
        raise ParameterError(f"unknown exponent override(s): {sorted(unknown)}")

    if "k" in overrides:
        k = int(overrides["k"])
    else:
        k = 0
        while (2 * n + 1) * (2 * k + 1) + 1 <= (d + 2) / 2:
            k += 1
    p = (2 * n + 1) * (2 * k + 1) + 1
    p_dual = p / (p - 1)
    r = p / (p - 1 + 1 / N)

    if "q" in overrides:
        q = float(overrides["q"])
    else:
        q_even = 2
        while not (1 / q_even) * (1 - 1 / N) < 2 / (2 + d):
            q_even += 2
        q = float(max(p_dual, q_even))

    m0 = float(overrides.get("m0", 1.0))
    if "m1" in overrides:
        m1 = float(overrides["m1"])
    else:
        m1 = 0.5 * (1 + r) * m0
    M0 = float(overrides.get("M0", 0.5 * (m0 + m1)))
    m = float(overrides.get("m", m1 / N))

    exps = ExponentSet(d=d, n=n, k=k, N=N, p=p, p_dual=p_dual, q=q, r=r, m0=m0, M0=M0, m1=m1, m=m)
    bad = exps.violations()
    if bad:
        raise ConstraintError(bad, overrides=overrides)
    return exps


# --------------------------------------------------------------------------- sampled weights


@dataclass(frozen=True)
class WeightFamily:
    """``rho0`` and ``rho`` sampled on the time nodes of a grid, with exponents."""

    grid: SpaceTimeGrid
    exponents: ExponentSet
    log_rho0: np.ndarray = field(repr=False)
    log_rho: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, grid: SpaceTimeGrid, exponents: ExponentSet) -> "WeightFamily":
        return cls(grid, exponents, log_rho0(grid.t, grid.T), log_rho(grid.t, grid.T))

    @property
    def rho0(self) -> np.ndarray:
        return np.exp(self.log_rho0)

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    def power(self, which: str, exponent: float, warn: bool = True) -> tuple[np.ndarray, int]:
        base = {"rho0": self.log_rho0, "rho": self.log_rho}[which]
        vals, clipped = weight_power(base, exponent)
        if clipped and warn:
            warnings.warn(
                f"{which}^{exponent:g}: {clipped} node(s) below {CLIP_FLOOR:g} flushed to zero",
                WeightUnderflowWarning,
                stacklevel=2,
            )
        return vals, clipped

    def with_exponents(self, exponents: ExponentSet) -> "WeightFamily":
        return replace(self, exponents=exponents)


# --------------------------------------------------------------------------- Carleman fields


@dataclass(frozen=True)
class CarlemanParams:
    lam: float
    s: float
    omega0: tuple[float, float]
    center: float
    eta0: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)


def eta0_profile(x, L: float, center: float) -> np.ndarray:
    """Smooth profile, zero at 0 and L, maximum 1 attained only at ``center``.

    ``x (L - x) exp(kappa x)`` is log-concave with a single critical point,
    placed at ``center`` by the choice of ``kappa``.
    """
    kappa = 1.0 / (L - center) - 1.0 / center
    x = np.asarray(x, dtype=float)

    def psi(z):
        return z * (L - z) * np.exp(kappa * (z - center))

    return psi(x) / psi(center)


def carleman_fields(lam: float, s: float, grid: SpaceTimeGrid, omega0: tuple[float, float]) -> CarlemanParams:
    """Sample the singular Carleman weights alpha and xi (inspection only).

    Both are ``+inf`` at t = 0 and t = T.
    """
    if not (lam > 0 and s > 0):
        raise ParameterError(f"need lambda > 0 and s > 0, got {lam}, {s}")
    a, b = map(float, omega0)
    if not (0 < a < b < grid.L):
        raise GeometryError(f"omega0=({a}, {b}) must lie strictly inside (0, {grid.L})")
    center = 0.5 * (a + b)
    eta = eta0_profile(grid.x, grid.L, center)
    tt = grid.t[:, None]
    with np.errstate(divide="ignore"):
        denom = tt * (grid.T - tt)
        grow = np.exp(lam * (2 + eta))[None, :]
        alpha = np.where(denom > 0, (math.exp(4 * lam) - grow) / np.where(denom > 0, denom, 1), np.inf)
        xi = np.where(denom > 0, grow / np.where(denom > 0, denom, 1), np.inf)
    return CarlemanParams(lam, s, (a, b), center, eta, alpha, xi)
