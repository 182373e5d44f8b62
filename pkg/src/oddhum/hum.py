"""Weighted L^p duality: the functional J, its minimizer and the derived fields.

Discretization
--------------
Let ``S`` be the theta-scheme of :mod:`oddhum.heat`, written as one linear
system ``E y = M s + e_0 y0 / dt`` over all time levels.  With trapezoid
weights ``w_n`` we set

    A = diag(dt / w) E^T     (discrete  -d/dt - Lap  acting on zeta),
    P = diag(dt / w) M^T     (zeta seen at the source nodes),

so that for every zeta and every pair (y, s) solving the scheme

    <A zeta, y>_W = <P zeta, s>_W + dx <zeta_0, y0>,

where ``<., .>_W`` is the trapezoid x node quadrature.  The discrete functional

    J(zeta) = 1/p <a, (A zeta)^p>_W + 1/p <c, (P zeta)^p>_W
              - <F, P zeta>_W - dx <y0, zeta_0>

with ``a = rho^{m0 p}`` and ``c = rho0^{m0 p} chi^p`` then has a gradient
equal to ``dt dx`` times the residual of the scheme for
``y = a (A zeta)^{p-1}`` driven by ``F + h chi``, ``h = -rho0^{m0 p}
chi^{p-1} (P zeta)^{p-1}``.  A stationary point therefore yields a state that
solves the forward scheme exactly and vanishes at ``T`` because ``a(T) = 0``.

Entries of zeta span many orders of magnitude while ``A zeta`` stays of
order one, so J, its gradient and the line search run in extended precision.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import OptimizationError, ParameterError
from .grid import SpaceTimeGrid, lp_norm, write_field_csv, xp_norm
from .weights import WeightFamily

XP = np.longdouble


def _check_p(p: int) -> int:
    if int(p) != p or p < 2 or int(p) % 2:
        raise ParameterError(f"duality exponent must be an even integer >= 2, got {p}")
    return int(p)


def _lap(f: np.ndarray, dx: float) -> np.ndarray:
    out = -2 * f
    out[..., 1:] += f[..., :-1]
    out[..., :-1] += f[..., 1:]
    return out / (dx * dx)


def _floored(s: np.ndarray, floor: float) -> np.ndarray:
    if not floor:
        return s
    rms = np.sqrt(np.mean(s * s, axis=1, keepdims=True))
    return np.maximum(np.abs(s), floor * rms)


@dataclass
class DualProblem:
    """Discrete operators and weights for one duality solve.

    Args:
        weights: sampled time weights and exponents (``m0`` is read from it).
        chi: spatial cutoff on the interior nodes; ``None`` means 1 everywhere.
        p: even duality exponent; defaults to ``weights.exponents.p``.
        theta: theta of the forward scheme the duality is adjoint to.
        diffusivity: diffusion coefficient of the forward scheme.
    """

    weights: WeightFamily
    chi: np.ndarray | None = None
    p: int | None = None
    theta: float = 0.5
    diffusivity: float = 1.0
    warn: bool = True
    clip_count: int = field(init=False, default=0)

    def __post_init__(self):
        g = self.grid
        self.p = _check_p(self.weights.exponents.p if self.p is None else self.p)
        if not 0.5 <= self.theta <= 1:
            raise ParameterError(f"theta must lie in [1/2, 1], got {self.theta}")
        chi = np.ones(g.nx) if self.chi is None else np.asarray(self.chi, dtype=float)
        if chi.shape != (g.nx,):
            raise ParameterError(f"cutoff has shape {chi.shape}, expected ({g.nx},)")
        self.chi = chi
        m0p = self.weights.exponents.m0 * self.p
        a_t, ca = self.weights.power("rho", m0p, warn=self.warn)
        c_t, cc = self.weights.power("rho0", m0p, warn=self.warn)
        self.clip_count = ca + cc
        self.a_t, self.c_t = a_t, c_t
        self.a = np.broadcast_to(a_t[:, None], g.shape).astype(XP)
        self.c = (c_t[:, None] * chi[None, :] ** self.p).astype(XP)
        self.W = np.broadcast_to((g.time_weights * g.dx)[:, None], g.shape).astype(XP)
        self._scale = (g.dt / g.time_weights)[:, None]

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.weights.grid

    # ----------------------------------------------------------------- stencils
    def A(self, z: np.ndarray) -> np.ndarray:
        """Discrete ``-d/dt zeta - nu Lap zeta`` (adjoint of the forward scheme)."""
        g, th, nu = self.grid, self.theta, self.diffusivity
        zn = np.zeros_like(z)
        zn[:-1] = z[1:]
        out = np.empty_like(z)
        out[1:] = (z[1:] - zn[1:]) / g.dt - nu * (th * _lap(z[1:], g.dx) + (1 - th) * _lap(zn[1:], g.dx))
        out[0] = (z[0] - zn[0]) / g.dt - nu * (1 - th) * _lap(zn[0], g.dx)
        return out * self._scale.astype(z.dtype)

    def AT(self, v: np.ndarray) -> np.ndarray:
        g, th, nu = self.grid, self.theta, self.diffusivity
        u = v * self._scale.astype(v.dtype)
        out = np.empty_like(u)
        out[0] = u[0] / g.dt
        out[1:] = (u[1:] - u[:-1]) / g.dt - nu * (th * _lap(u[1:], g.dx) + (1 - th) * _lap(u[:-1], g.dx))
        return out

    def P(self, z: np.ndarray) -> np.ndarray:
        """zeta seen at the source nodes."""
        th = self.theta
        out = np.zeros_like(z)
        out[1:] += th * z[1:]
        out[:-1] += (1 - th) * z[1:]
        return out * self._scale.astype(z.dtype)

    def PT(self, v: np.ndarray) -> np.ndarray:
        th = self.theta
        u = v * self._scale.astype(v.dtype)
        out = np.zeros_like(u)
        out[1:] = th * u[1:] + (1 - th) * u[:-1]
        return out

    @cached_property
    def _A_mat(self) -> sp.csr_matrix:
        g, th = self.grid, self.theta
        n, nx = g.nt + 1, g.nx
        K = self.diffusivity * sp.diags([np.ones(nx - 1), -2 * np.ones(nx), np.ones(nx - 1)], [-1, 0, 1]) / g.dx**2
        eye = sp.identity(nx)
        B1, B0 = eye / g.dt - th * K, -eye / g.dt - (1 - th) * K
        first = sp.csr_matrix(([1.0], ([0], [0])), shape=(n, n))
        E = (
            sp.kron(sp.diags(np.r_[0.0, np.ones(g.nt)]), B1)
            + sp.kron(sp.diags(np.ones(g.nt), -1), B0)
            + sp.kron(first, eye / g.dt)
        )
        S = sp.kron(sp.diags(g.dt / g.time_weights), eye)
        return (S @ E.T).tocsr()

    @cached_property
    def _P_mat(self) -> sp.csr_matrix:
        g, th = self.grid, self.theta
        Mt = sp.diags(np.r_[0.0, np.full(g.nt, th)]) + sp.diags(np.full(g.nt, 1 - th), -1)
        S = sp.kron(sp.diags(g.dt / g.time_weights), sp.identity(g.nx))
        return (S @ sp.kron(Mt, sp.identity(g.nx)).T).tocsr()

    # ----------------------------------------------------------------- functional
    def data_vector(self, y0, F) -> np.ndarray:
        g = self.grid
        y0 = np.zeros(g.nx) if y0 is None else np.asarray(y0, dtype=float)
        F = g.zeros() if F is None else np.asarray(g.check(F), dtype=float)
        b = self.PT(self.W * F.astype(XP))
        b[0] += XP(g.dx) * y0.astype(XP)
        return b

    def J(self, z, b) -> XP:
        z = np.asarray(z, dtype=XP)
        u, v, p = self.A(z), self.P(z), self.p
        return (np.sum(self.W * self.a * u**p) + np.sum(self.W * self.c * v**p)) / p - np.sum(b * z)

    def grad(self, z, b) -> np.ndarray:
        z = np.asarray(z, dtype=XP)
        u, v, p = self.A(z), self.P(z), self.p
        return self.AT(self.W * self.a * u ** (p - 1)) + self.PT(self.W * self.c * v ** (p - 1)) - b

    def hessian(self, z, power: int | None = None, floor: float = 0.0) -> sp.csr_matrix:
        """Hessian of J at z (float64).

        ``power=2`` gives the quadratic surrogate.  ``floor > 0`` bounds the
        curvature factor ``s^(p-2)`` below by ``(floor * rms_n)^(p-2)``, where
        ``rms_n`` is the root mean square of ``s`` over the time level; this keeps
        the matrix definite at nodes where the state changes sign.
        """
        Am, Pm = self._A_mat, self._P_mat
        W = np.asarray(self.W, float).ravel()
        if power == 2:
            da = W * np.asarray(self.a, float).ravel() ** (2 / self.p)
            dc = W * np.asarray(self.c, float).ravel() ** (2 / self.p)
        else:
            z = np.asarray(z, dtype=XP)
            k = self.p - 2
            da = np.asarray((self.p - 1) * self.W * self.a * _floored(self.A(z), floor) ** k, float).ravel()
            dc = np.asarray((self.p - 1) * self.W * self.c * _floored(self.P(z), floor) ** k, float).ravel()
        return (Am.T @ sp.diags(da) @ Am + Pm.T @ sp.diags(dc) @ Pm).tocsr()

    @cached_property
    def active(self) -> np.ndarray:
        """Unknowns that the weighted terms see at all (boolean, flattened)."""
        return self.hessian(None, power=2).diagonal() > 0

    def state(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=XP)
        return np.asarray(self.a * self.A(z) ** (self.p - 1), dtype=float)

    def control(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=XP)
        c_t = np.asarray(self.c_t, dtype=XP)[:, None]
        chi = self.chi.astype(XP)[None, :] ** (self.p - 1)
        return np.asarray(-c_t * chi * self.P(z) ** (self.p - 1), dtype=float)


# --------------------------------------------------------------------------- public functional API


def _problem(weights, grid, p, chi=None, theta=0.5, diffusivity=1.0) -> DualProblem:
    if grid is not None and grid != weights.grid:
        raise ParameterError("weights were sampled on a different grid")
    return DualProblem(weights, chi=chi, p=p, theta=theta, diffusivity=diffusivity, warn=False)


def eval_J(zeta, y0, F, weights: WeightFamily, grid: SpaceTimeGrid | None = None, p: int | None = None, chi=None, theta=0.5) -> float:
    """Value of the discrete functional (computed in extended precision)."""
    prob = _problem(weights, grid, p, chi, theta)
    return float(prob.J(zeta, prob.data_vector(y0, F)))


def grad_J(zeta, y0, F, weights: WeightFamily, grid: SpaceTimeGrid | None = None, p: int | None = None, chi=None, theta=0.5) -> np.ndarray:
    """Exact gradient of :func:`eval_J` with respect to the entries of zeta."""
    prob = _problem(weights, grid, p, chi, theta)
    return prob.grad(zeta, prob.data_vector(y0, F))


# --------------------------------------------------------------------------- minimization


@dataclass
class MinimizeOptions:
    """Newton settings.

    The relative gradient is ``|g| / |b|`` with ``b`` the linear part of J.
    Iteration stops when it drops below ``tol``, after ``max_iter`` steps,
    or after ``patience`` steps without a new best iterate once the best is
    within a factor 100 of ``accept``.  The best iterate counts as converged
    when its relative gradient is at most ``accept``.  ``adapt`` halves the
    curvature floor after overlong steps and doubles it after short ones.
    """

    tol: float = 1e-10
    accept: float = 1e-8
    max_iter: int = 200
    patience: int = 15
    zeta0: np.ndarray | None = None
    raise_on_fail: bool = True
    shift: float = 1e-12
    cg_iters: int = 20
    floor: float = 1e-2
    adapt: bool = False
    floor_min: float = 1e-6
    floor_max: float = 1.0


@dataclass
class OptimizerReport:
    iterations: int
    J: float
    grad_norm: float
    rel_grad: float
    clip_count: int
    converged: bool
    inactive_data: float = 0.0
    certificate: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "J": self.J,
            "grad_norm": self.grad_norm,
            "rel_grad": self.rel_grad,
            "certificate": self.certificate,
            "clip_count": self.clip_count,
            "converged": self.converged,
            "inactive_data": self.inactive_data,
        }


def _scaled_solve(H: sp.csr_matrix, r: np.ndarray, shift: float = 1e-12, cg_iters: int = 20) -> np.ndarray:
    """Approximate solve of ``H x = r`` for symmetric positive semidefinite H.

    The Hessian of a p-th power functional loses rank wherever the state is
    close to zero, so a direct factorization alone is unreliable.  After
    Jacobi scaling, conjugate gradients run on the exact matrix, preconditioned
    by a factorization of the slightly shifted matrix.
    """
    d = np.sqrt(np.abs(H.diagonal()))
    d[d == 0] = 1.0
    Dinv = sp.diags(1.0 / d)
    Hs = (Dinv @ H @ Dinv).tocsc()
    rs = r / d
    lu = splu((Hs + shift * sp.identity(Hs.shape[0], format="csc")).tocsc())
    x = lu.solve(rs)
    if cg_iters:
        M = LinearOperator(Hs.shape, matvec=lu.solve, dtype=float)
        x, _ = cg(Hs, rs, x0=x, M=M, rtol=1e-12, maxiter=cg_iters)
    return x / d


def _poly_linesearch(prob: DualProblem, z, d, b) -> XP:
    """Exact minimizer of the convex polynomial t -> J(z + t d)."""
    p = prob.p
    u, du = prob.A(z), prob.A(d)
    v, dv = prob.P(z), prob.P(d)
    Wa, Wc = prob.W * prob.a, prob.W * prob.c
    # phi'(t) = sum_k binom(p-1, k) t^k S_k - <b, d>
    coef = []
    for k in range(p):
        s = np.sum(Wa * u ** (p - 1 - k) * du ** (k + 1)) + np.sum(Wc * v ** (p - 1 - k) * dv ** (k + 1))
        coef.append(XP(math.comb(p - 1, k)) * s)
    coef[0] -= np.sum(b * d)

    def dphi(t):
        return sum(c * t**k for k, c in enumerate(coef))

    def d2phi(t):
        return sum(k * c * t ** (k - 1) for k, c in enumerate(coef) if k)

    lo, hi = XP(0), XP(1)
    if dphi(lo) >= 0:
        return XP(0)
    while dphi(hi) < 0:
        lo, hi = hi, 2 * hi
        if hi > 1e30:
            return lo
    t = hi
    for _ in range(200):
        f, f2 = dphi(t), d2phi(t)
        if f < 0:
            lo = t
        else:
            hi = t
        step = f / f2 if f2 > 0 else XP(np.inf)
        t_new = t - step
        if not (lo < t_new < hi):
            t_new = (lo + hi) / 2
        if abs(t_new - t) <= 1e-17 * abs(t_new) or hi - lo <= 1e-18 * abs(hi):
            t = t_new
            break
        t = t_new
    return t


def _norm(x) -> float:
    return float(np.sqrt(np.sum(np.asarray(x, dtype=XP) ** 2)))


def minimize_J(y0, F, weights: WeightFamily, grid=None, p=None, opts: MinimizeOptions | None = None, *, chi=None, theta=0.5, diffusivity=1.0, problem: DualProblem | None = None):
    """Minimize J by damped Newton with exact line search.

    From ``zeta = 0`` the first direction solves the quadratic surrogate
    (``p = 2`` weights) and is rescaled exactly along its ray, since the
    Hessian of J vanishes at the origin.  Returns ``(zeta, report)``.
    """
    opts = opts or MinimizeOptions()
    prob = problem or DualProblem(weights, chi=chi, p=p, theta=theta, diffusivity=diffusivity)
    g_ = prob.grid
    b = prob.data_vector(y0, F)
    active = prob.active.reshape(g_.shape)
    inactive_data = _norm(b[~active])
    b = np.where(active, b, XP(0))
    g0 = _norm(b)
    z = np.zeros(g_.shape, dtype=XP)
    if opts.zeta0 is not None:
        z = np.where(active, np.asarray(g_.check(opts.zeta0), dtype=XP), XP(0))
    if g0 == 0:
        gn = _norm(prob.grad(z, b))
        if gn == 0:
            return z, OptimizerReport(0, float(prob.J(z, b)), 0.0, 0.0, prob.clip_count, True, inactive_data)
        g0 = gn
    idx = np.flatnonzero(active.ravel())

    def masked_grad(zz):
        return np.where(active, prob.grad(zz, b), XP(0))

    if not np.any(z):
        H2 = prob.hessian(None, power=2)[idx][:, idx]
        d = np.zeros(g_.shape, dtype=XP)
        d.ravel()[idx] = _scaled_solve(H2, np.asarray(b, float).ravel()[idx], opts.shift, opts.cg_iters)
        Q = np.sum(prob.W * prob.a * prob.A(d) ** prob.p) + np.sum(prob.W * prob.c * prob.P(d) ** prob.p)
        bd = np.sum(b * d)
        if Q > 0 and bd != 0:
            ratio = bd / Q
            z = np.sign(ratio) * np.abs(ratio) ** (XP(1) / (prob.p - 1)) * d

    history = []
    fl = opts.floor
    best_rel, best_z, since_best = math.inf, z, 0
    it = 0
    for it in range(opts.max_iter + 1):
        g = masked_grad(z)
        rel = _norm(g) / g0
        history.append(rel)
        if rel < best_rel:
            best_rel, best_z, since_best = rel, z, 0
        else:
            since_best += 1
        stalled = since_best >= opts.patience and best_rel <= 100 * opts.accept
        if rel <= opts.tol or it == opts.max_iter or stalled:
            break
        H = prob.hessian(z, floor=fl)[idx][:, idx]
        gf = np.asarray(g, float).ravel()[idx]
        step = _scaled_solve(H, -gf, opts.shift, opts.cg_iters)
        if not np.all(np.isfinite(step)) or np.dot(step, gf) >= 0:
            diag = np.abs(H.diagonal())
            diag[diag == 0] = 1.0
            step = -gf / diag
        d = np.zeros(g_.shape, dtype=XP)
        d.ravel()[idx] = step
        t = _poly_linesearch(prob, z, d, b)
        if t == 0:
            break
        if opts.adapt:
            if t > 1.3:
                fl = max(fl / 2, opts.floor_min)
            elif t < 0.5:
                fl = min(fl * 2, opts.floor_max)
        z = z + t * d
    # near the rounding floor the gradient norm is not monotone; keep the best iterate
    z = best_z
    gn = _norm(masked_grad(z))
    Jv = float(prob.J(z, b))
    # absolute certificate |g| / (1 + |J|), reported alongside
    cert = gn / (1.0 + abs(Jv))
    converged = best_rel <= opts.accept
    rep = OptimizerReport(it, Jv, gn, best_rel, prob.clip_count, converged, inactive_data, cert, history)
    if not converged and opts.raise_on_fail:
        raise OptimizationError(
            f"minimize_J stopped after {it} iterations with relative gradient {best_rel:.3e} > {opts.accept:g}",
            report=rep.to_dict(),
        )
    return z, rep


def state_from_adjoint(zeta, weights: WeightFamily, grid=None, p=None, theta=0.5, diffusivity=1.0) -> np.ndarray:
    """Controlled state ``rho^{m0 p} (A zeta)^{p-1}``."""
    return _problem(weights, grid, p, None, theta, diffusivity).state(zeta)


def control_from_adjoint(zeta, weights: WeightFamily, grid=None, p=None, chi=None, theta=0.5) -> np.ndarray:
    """Control ``-rho0^{m0 p} chi^{p-1} (P zeta)^{p-1}``; the forcing is ``h * chi``."""
    return _problem(weights, grid, p, chi, theta).control(zeta)


def odd_root(x, odd_exponent: int):
    """Real ``odd_exponent``-th root, ``sign(x) |x|^(1/odd_exponent)``."""
    if int(odd_exponent) != odd_exponent or odd_exponent < 1 or int(odd_exponent) % 2 == 0:
        raise ParameterError(f"root exponent must be an odd positive integer, got {odd_exponent}")
    arr = np.asarray(x, dtype=float)
    out = np.sign(arr) * np.abs(arr) ** (1.0 / int(odd_exponent))
    return float(out) if np.ndim(x) == 0 else out


@dataclass
class OddnessReport:
    xp_root_p1: float
    xp_weighted_root: float
    endpoint_root_max: float
    weighted_linf: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def oddness_diagnostics(h, weights: WeightFamily, grid=None, p=None, n: int = 1) -> OddnessReport:
    """Regularity and endpoint checks of the odd roots of a control."""
    grid = weights.grid if grid is None else grid
    p = _check_p(weights.exponents.p if p is None else p)
    odd = 2 * n + 1
    if (p - 1) % odd:
        raise ParameterError(f"p-1={p - 1} is not divisible by 2n+1={odd}")
    h = np.asarray(grid.check(h), dtype=float)
    m = weights.exponents.m
    w_m, _ = weights.power("rho0", m, warn=False)
    ratio = np.zeros_like(h)
    nz = w_m > 0
    ratio[nz] = h[nz] / w_m[nz, None]
    root_n = odd_root(h, odd)
    return OddnessReport(
        xp_root_p1=xp_norm(odd_root(h, p - 1), grid, 2),
        xp_weighted_root=xp_norm(odd_root(ratio, odd), grid, 2),
        endpoint_root_max=float(max(np.abs(root_n[0]).max(), np.abs(root_n[-1]).max())),
        weighted_linf=lp_norm(h, grid, math.inf, w=w_m),
    )


@dataclass
class DualityResult:
    zeta: np.ndarray
    y: np.ndarray
    h: np.ndarray
    chi: np.ndarray
    report: OptimizerReport
    grid: SpaceTimeGrid

    @property
    def forcing(self) -> np.ndarray:
        """Control as it enters the state equation, ``h * chi``."""
        return self.h * self.chi[None, :]

    def export(self, directory, prefix: str = "") -> None:
        directory = Path(directory)
        for name, f in (("zeta", np.asarray(self.zeta, float)), ("y", self.y), ("h", self.h)):
            write_field_csv(directory / f"{prefix}{name}.csv", f, self.grid)
        (directory / f"{prefix}optimizer.json").write_text(json.dumps(self.report.to_dict(), indent=2))


def solve_duality(y0, F, weights: WeightFamily, chi=None, opts=None, theta=0.5, diffusivity=1.0, problem=None) -> DualityResult:
    """Minimize J and extract state and control in one call."""
    prob = problem or DualProblem(weights, chi=chi, theta=theta, diffusivity=diffusivity)
    z, rep = minimize_J(y0, F, weights, opts=opts, problem=prob)
    return DualityResult(z, prob.state(z), prob.control(z), prob.chi, rep, prob.grid)
