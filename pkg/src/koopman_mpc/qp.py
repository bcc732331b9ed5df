"""Dense convex QP solver: ``min 1/2 x'Hx + f'x  s.t.  Gx <= d``.

The solver is an operator-splitting (ADMM) scheme in the style of OSQP:
Ruiz equilibration, over-relaxation, adaptive penalty, warm starts and
infeasibility certificates. Once the iterates have settled, the active set
they suggest is used to solve the equality-constrained KKT system
directly ("polishing"), which gives solutions accurate to rounding.

An exhaustive active-set enumeration, :func:`solve_qp_enumeration`, is
provided as an independent reference for small problems.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np
from scipy import linalg

OPTIMAL = "optimal"
MAX_ITER = "max-iterations"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class QuadraticProgram:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray = None
    d: np.ndarray = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.H = 0.5 * (H + H.T)
        n = self.H.shape[0]
        self.f = np.asarray(self.f, dtype=float).reshape(n)
        if self.G is None:
            self.G = np.zeros((0, n))
            self.d = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        if self.G.shape[0] != self.d.shape[0]:
            raise ValueError(f"G has {self.G.shape[0]} rows but d has {self.d.shape[0]}")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeasible: float = 1e-7
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_interval: int = 50
    check_interval: int = 10
    scaling_iter: int = 10
    polish: bool = True
    polish_refine_iter: int = 3
    polish_swaps: int = 5


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float
    y: np.ndarray = field(default=None, repr=False)
    polished: bool = False

    @property
    def u_star(self):
        return self.x


def kkt_residuals(p: QuadraticProgram, x, y):
    """``(primal, dual, complementarity)`` infinity-norm residuals at ``(x, y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slack = p.G @ x - p.d
    primal = float(np.max(np.maximum(slack, 0.0), initial=0.0))
    dual = float(np.max(np.abs(p.H @ x + p.f + p.G.T @ y), initial=0.0))
    comp = float(np.max(np.abs(y * slack), initial=0.0))
    return primal, dual, comp


def _tolerances(p: QuadraticProgram, x, y, s: QpSettings):
    Gx = p.G @ x
    tp = s.eps_abs + s.eps_rel * max(np.max(np.abs(Gx), initial=0.0),
                                     np.max(np.abs(p.d), initial=0.0))
    td = s.eps_abs + s.eps_rel * max(np.max(np.abs(p.H @ x), initial=0.0),
                                     np.max(np.abs(p.f), initial=0.0),
                                     np.max(np.abs(p.G.T @ y), initial=0.0))
    tc = s.eps_abs + s.eps_rel * np.max(np.abs(y), initial=0.0) * max(tp / s.eps_rel, 1.0)
    return tp, td, tc


def _certified(p, x, y, s):
    r = kkt_residuals(p, x, y)
    t = _tolerances(p, x, y, s)
    return all(ri <= ti for ri, ti in zip(r, t)), r


def _ruiz(H, G, iters):
    n, m = H.shape[0], G.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    # positive diagonal scaling commutes with abs, so iterate on |H| and |G|
    aH, aG = np.abs(H), np.abs(G)
    for _ in range(iters):
        cH = (aH * D[:, None]).max(axis=0) * D
        cG = (aG * E[:, None]).max(axis=0, initial=0.0) * D
        dx = 1.0 / np.sqrt(np.clip(np.maximum(cH, cG), 1e-4, 1e4))
        D *= dx
        if m:
            rG = (aG * D[None, :]).max(axis=1) * E
            E *= 1.0 / np.sqrt(np.clip(rG, 1e-4, 1e4))
    return D, E, D[:, None] * H * D[None, :], E[:, None] * G * D[None, :]


class _Workspace:
    """Scaled problem data and the factorized ADMM linear system."""

    def __init__(self, p: QuadraticProgram, s: QpSettings):
        self.p = p
        self.s = s
        self.D, self.E, self.Hs, self.Gs = _ruiz(p.H, p.G, s.scaling_iter)
        fs = self.D * p.f
        cs = max(np.abs(self.Hs).max(axis=0).mean(), np.max(np.abs(fs), initial=0.0))
        self.c = 1.0 / np.clip(cs, 1e-4, 1e4)
        self.Hs *= self.c
        self.fs = self.c * fs
        self.ds = self.E * p.d
        self.rho = s.rho
        self.failed_polish = None
        self._factor()

    def _factor(self):
        n = self.Hs.shape[0]
        K = self.Hs + self.s.sigma * np.eye(n) + self.rho * self.Gs.T @ self.Gs
        self.Kinv = linalg.cho_solve(linalg.cho_factor(K, lower=True), np.eye(n))

    def unscale(self, x, z, y):
        return self.D * x, z / self.E, self.E * y / self.c

    def unscale_dual(self, y):
        return self.E * y / self.c


def _polish(ws: _Workspace, x, z, y):
    """Solve the KKT system of the active set guessed from ``(z, y)``.

    A wrong guess is corrected for up to ``polish_swaps`` rounds by dropping
    rows with negative multipliers and adding violated rows.
    """
    p, s = ws.p, ws.s
    active = np.flatnonzero(ws.ds - z < y)
    key = active.tobytes()
    if key == ws.failed_polish:
        return None
    n = ws.Hs.shape[0]
    seen = set()
    for _ in range(s.polish_swaps + 1):
        seen.add(active.tobytes())
        sol = _kkt_solve(ws, active)
        if sol is None:
            break
        ys = np.zeros(ws.ds.size)
        ys[active] = np.maximum(sol[n:], 0.0)
        xu, yu = ws.D * sol[:n], ws.unscale_dual(ys)
        ok, res = _certified(p, xu, yu, s)
        if ok:
            return xu, yu, res
        viol = ws.Gs @ sol[:n] - ws.ds
        keep = active[sol[n:] >= 0.0]
        add = np.flatnonzero(viol > s.eps_abs * np.maximum(1.0, np.abs(ws.ds)))
        active = np.union1d(keep, add)
        if active.tobytes() in seen:
            break
    ws.failed_polish = key
    return None


def _kkt_solve(ws: _Workspace, active):
    Hs, Gs = ws.Hs, ws.Gs[active]
    n, k = Hs.shape[0], active.size
    delta = 1e-9
    kkt = np.block([[Hs, Gs.T], [Gs, np.zeros((k, k))]])
    reg = kkt + np.diag(np.r_[np.full(n, delta), np.full(k, -delta)])
    rhs = np.r_[-ws.fs, ws.ds[active]]
    try:
        lu = linalg.lu_factor(reg)
    except (linalg.LinAlgError, ValueError):
        return None
    sol = linalg.lu_solve(lu, rhs)
    for _ in range(ws.s.polish_refine_iter):
        sol = sol + linalg.lu_solve(lu, rhs - kkt @ sol)
    return sol if np.all(np.isfinite(sol)) else None


def solve_qp(p: QuadraticProgram, settings: QpSettings | None = None, x0=None, y0=None) -> QpSolution:
    """Solve a convex QP; ``x0``/``y0`` warm-start the primal and dual iterates."""
    s = settings or QpSettings()
    n, m = p.n, p.m
    if m == 0:
        return _solve_unconstrained(p, s)

    ws = _Workspace(p, s)
    Gs, ds = ws.Gs, ws.ds
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / ws.D
    z = np.minimum(Gs @ x, ds)
    y = np.zeros(m) if y0 is None else np.maximum(np.asarray(y0, dtype=float), 0) * ws.c / ws.E
    best = None
    y_prev, x_prev = y.copy(), x.copy()
    last_polish_res = np.inf
    alpha, sigma = s.alpha, s.sigma

    for it in range(1, s.max_iter + 1):
        rho = ws.rho
        xt = ws.Kinv @ (sigma * x - ws.fs + Gs.T @ (rho * z - y))
        zt = Gs @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z = np.minimum(zr + y / rho, ds)
        y = y + rho * (zr - z)

        if it % s.check_interval and it != s.max_iter:
            continue

        # residuals in the original coordinates
        xu, zu, yu = ws.unscale(x, z, y)
        Gx = p.G @ xu
        r_p = np.max(np.abs(Gx - zu))
        Hx, Gty = p.H @ xu, p.G.T @ yu
        r_d = np.max(np.abs(Hx + p.f + Gty))
        e_p = s.eps_abs + s.eps_rel * max(np.max(np.abs(Gx)), np.max(np.abs(zu)))
        e_d = s.eps_abs + s.eps_rel * max(np.max(np.abs(Hx)), np.max(np.abs(Gty)),
                                          np.max(np.abs(p.f)))
        score = max(r_p / e_p, r_d / e_d)
        if best is None or score < best[0]:
            best = (score, xu, yu)

        admm_done = r_p <= e_p and r_d <= e_d
        if s.polish and (admm_done or score < 0.5 * last_polish_res and score < 1e4):
            last_polish_res = score
            pol = _polish(ws, x, z, y)
            if pol is not None:
                xp, yp, res = pol
                return QpSolution(xp, p.objective(xp), OPTIMAL, it, *res, y=yp, polished=True)
        if admm_done:
            ok, res = _certified(p, xu, np.maximum(yu, 0), s)
            if ok:
                return QpSolution(xu, p.objective(xu), OPTIMAL, it, *res, y=np.maximum(yu, 0))

        status = _infeasibility(p, ws, x - x_prev, y - y_prev)
        if status is not None:
            res = kkt_residuals(p, xu, np.maximum(yu, 0))
            return QpSolution(xu, p.objective(xu), status, it, *res, y=np.maximum(yu, 0))
        x_prev, y_prev = x.copy(), y.copy()

        if it % s.adapt_interval == 0:
            nrm_p = r_p / max(np.max(np.abs(Gx)), np.max(np.abs(zu)), 1e-30)
            nrm_d = r_d / max(np.max(np.abs(Hx)), np.max(np.abs(Gty)), np.max(np.abs(p.f)), 1e-30)
            new_rho = float(np.clip(ws.rho * np.sqrt(nrm_p / max(nrm_d, 1e-30)), 1e-6, 1e6))
            if new_rho > 5 * ws.rho or new_rho < 0.2 * ws.rho:
                ws.rho = new_rho
                ws._factor()

    _, xu, yu = best
    yu = np.maximum(yu, 0)
    res = kkt_residuals(p, xu, yu)
    return QpSolution(xu, p.objective(xu), MAX_ITER, s.max_iter, *res, y=yu)


def _infeasibility(p, ws, dx_s, dy_s):
    eps = ws.s.eps_infeasible
    dy = ws.unscale_dual(dy_s)
    ny = np.max(np.abs(dy), initial=0.0)
    if ny > 1e-30 and np.all(dy >= -eps * ny):
        if (np.max(np.abs(p.G.T @ dy)) <= eps * ny
                and p.d @ np.maximum(dy, 0.0) < -eps * ny):
            return INFEASIBLE
    dx = ws.D * dx_s
    nx = np.max(np.abs(dx), initial=0.0)
    if nx > 1e-30:
        if (np.max(np.abs(p.H @ dx)) <= eps * nx and p.f @ dx < -eps * nx
                and np.all(p.G @ dx <= eps * nx)):
            return UNBOUNDED
    return None


def _solve_unconstrained(p, s):
    try:
        x = linalg.solve(p.H, -p.f, assume_a="sym")
    except linalg.LinAlgError:
        x = np.linalg.lstsq(p.H, -p.f, rcond=None)[0]
    y = np.zeros(0)
    ok, res = _certified(p, x, y, s)
    return QpSolution(x, p.objective(x), OPTIMAL if ok else UNBOUNDED, 0, *res, y=y)


def solve_qp_enumeration(p: QuadraticProgram, max_size: int | None = None,
                         max_subsets: int = 500_000, tol: float = 1e-9):
    """Reference solver: enumerate active sets of a strictly convex QP.

    For every candidate active set ``S`` the equality-constrained minimizer
    (constraints ``S`` held as equalities) is computed; the best primal
    feasible one is kept. Sets are visited in order of increasing size and
    the search stops once the best candidate also has nonnegative
    multipliers, which certifies the unique global optimum. Returns
    ``(x, objective, active, y)``; ``x`` is None if the budget of subsets
    runs out before a certificate is found.
    """
    H, f, G, d = p.H, p.f, p.G, p.d
    n, m = p.n, p.m
    Hinv = linalg.inv(H)
    x_unc = -Hinv @ f
    HiGt = Hinv @ G.T
    M = G @ HiGt
    w = G @ x_unc - d
    kmax = min(n, m) if max_size is None else min(max_size, n, m)
    best = None
    visited = 0
    for k in range(0, kmax + 1):
        visited += comb(m, k)
        if visited > max_subsets:
            break
        if k == 0:
            lam = np.zeros((1, 0))
            C = np.zeros((1, 0), dtype=int)
        else:
            C = np.array(list(combinations(range(m), k)), dtype=int)
            Msub = M[C[:, :, None], C[:, None, :]]
            wsub = w[C]
            lam = _batched_solve(Msub, wsub)
        ok_rows = np.all(np.isfinite(lam), axis=1)
        X = x_unc[None, :] - np.einsum("nbk,bk->bn", HiGt[:, C], lam) if k else x_unc[None, :]
        feas = ok_rows & np.all(X @ G.T <= d + tol * (1 + np.abs(d)), axis=1)
        if np.any(feas):
            idx = np.flatnonzero(feas)
            objs = 0.5 * np.einsum("bi,ij,bj->b", X[idx], H, X[idx]) + X[idx] @ f
            j = idx[np.argmin(objs)]
            if best is None or objs.min() < best[1]:
                y = np.zeros(m)
                y[C[j]] = lam[j]
                best = (X[j], float(objs.min()), tuple(C[j]), y)
        if best is not None and np.all(best[3] >= -tol * (1 + np.abs(best[3]).max())):
            return best
    return (None, None, None, None)


def _batched_solve(Msub, wsub):
    try:
        lam = np.linalg.solve(Msub, wsub[..., None])[..., 0]
    except np.linalg.LinAlgError:
        lam = np.full(wsub.shape, np.nan)
        for i in range(Msub.shape[0]):
            try:
                if np.linalg.cond(Msub[i]) < 1e12:
                    lam[i] = np.linalg.solve(Msub[i], wsub[i])
            except np.linalg.LinAlgError:
                pass
        return lam
    # near-singular subsystems come from dependent rows; their solutions are meaningless
    scale = np.abs(Msub).max(axis=(1, 2)) + 1e-300
    lam[np.abs(np.linalg.det(Msub / scale[:, None, None])) < 1e-12] = np.nan
    return lam


def random_qp_instances(count: int, seed: int = 0, n_max: int = 20, m_max: int = 40,
                        max_subsets: int = 200_000):
    """Reproducible random strictly convex, feasible QPs with their reference optimum.

    Instances whose optimum cannot be certified by :func:`solve_qp_enumeration`
    within ``max_subsets`` candidate sets are redrawn, so the collection leans
    toward small active sets.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(1, n_max + 1))
        m = int(rng.integers(1, m_max + 1))
        L = rng.standard_normal((n, n))
        H = L @ L.T / n + 0.1 * np.eye(n)
        f = rng.standard_normal(n) * 2.0
        G = rng.standard_normal((m, n))
        x_feas = rng.standard_normal(n) * 0.5
        d = G @ x_feas + rng.uniform(0.0, 2.0, m)
        p = QuadraticProgram(H, f, G, d)
        ref = solve_qp_enumeration(p, max_subsets=max_subsets)
        if ref[0] is None:
            continue
        out.append((p, ref))
    return out
