"""Nonlinear MPC baseline on the exact RK4 unicycle model.

Single-shooting transcription over the stacked inputs, solved by SQP with
a Gauss-Newton Hessian, linearized keep-out constraints, central
finite-difference sensitivities and a backtracking line search on an
exact-penalty merit function. Subproblems go through :func:`qp.solve_qp`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import N_INPUT, N_STATE, simulate_rollout
from .planner import MpcConfig, StepDiagnostics, horizon_centers
from .qp import OPTIMAL, QpSettings, QuadraticProgram, solve_qp

CONVERGED = "optimal"
MAX_ITER = "max-iterations"
STALLED = "stalled"
FAILED = "failed"


@dataclass
class NmpcSettings:
    """SQP options.

    An iterate is ``"optimal"`` once it is feasible within ``tol_viol`` and
    either the stationarity residual is below ``tol_kkt`` relative to the
    uncancelled magnitude of the cost gradient or the step is below ``tol_step``. A feasible iterate whose
    merit decreases by less than ``tol_fun`` (relative) for ``stall_iter``
    consecutive iterations ends the solve as
    ``"stalled"``; its input is still applied.
    """

    max_iter: int = 100
    tol_kkt: float = 1e-6
    tol_step: float = 1e-10
    tol_fun: float = 1e-10
    stall_iter: int = 3
    tol_viol: float = 1e-6
    fd_step: float = 1e-6
    damping: float = 1e-8
    ls_max: int = 12
    armijo: float = 1e-4

    def __post_init__(self):
        if not (self.tol_kkt > 0 and self.tol_step > 0 and self.tol_viol > 0
                and self.tol_fun > 0):
            raise ValueError("tolerances must be positive")
        if not 1e-8 <= self.fd_step <= 1e-4:
            raise ValueError("finite-difference step must lie in [1e-8, 1e-4]")
        if self.max_iter < 1 or self.stall_iter < 1 or self.damping < 0:
            raise ValueError("invalid SQP settings")


def rollout_sensitivities(s0, U, ts, N_h, h=1e-6):
    """States along the rollout and their central-difference Jacobians.

    Returns
    -------
    states : ndarray, shape (N_h + 1, 4)
    jac : ndarray, shape (N_h, 4, N_h * 2)
        ``jac[k]`` is the derivative of the state at step ``k + 1``.
    """
    U = np.asarray(U, dtype=float).reshape(N_h * N_INPUT)
    nu = U.size
    pert = np.concatenate([U + h * np.eye(nu), U - h * np.eye(nu), U[None, :]])
    s0b = np.broadcast_to(np.asarray(s0, dtype=float), (pert.shape[0], N_STATE))
    traj = simulate_rollout(s0b, pert.reshape(-1, N_h, N_INPUT), ts)
    states = traj[-1]
    jac = (traj[:nu, 1:] - traj[nu:2 * nu, 1:]) / (2.0 * h)  # (nu, N_h, 4)
    return states, jac.transpose(1, 2, 0)


def _psd_sqrt(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


class NonlinearMPC:
    """SQP-based nonlinear MPC sharing the planner's cost and constraint data."""

    def __init__(self, config: MpcConfig | None = None, settings: NmpcSettings | None = None,
                 qp_settings: QpSettings | None = None):
        self.config = config or MpcConfig()
        self.settings = settings or NmpcSettings()
        self.qp_settings = qp_settings or QpSettings()
        self._Lq = _psd_sqrt(self.config.Q)
        self._Lr = _psd_sqrt(self.config.R)
        self.reset()

    def reset(self):
        self._warm = None

    def _evaluate(self, s0, U, centers, obstacles, with_jac=True):
        cfg = self.config
        N_h = cfg.N_h
        if with_jac:
            states, jac = rollout_sensitivities(s0, U, cfg.ts, N_h, self.settings.fd_step)
        else:
            states = simulate_rollout(s0, U.reshape(N_h, N_INPUT), cfg.ts)
            jac = None
        err = states[1:] - cfg.target
        r = np.concatenate([(err @ self._Lq.T).ravel(), (U.reshape(N_h, N_INPUT) @ self._Lr.T).ravel()])
        cost = float(r @ r)
        # keep-out margins c_k = ellipse - (1 + eps) >= 0, one row per step and obstacle
        cons, cjac = [], []
        for i, o in enumerate(obstacles):
            dx = states[1:, 0] - centers[i, :, 0]
            dy = states[1:, 1] - centers[i, :, 1]
            cons.append(dx**2 / o.rx**2 + dy**2 / o.ry**2 - 1.0 - o.eps)
            if with_jac:
                cjac.append(2 * dx[:, None] / o.rx**2 * jac[:, 0, :]
                            + 2 * dy[:, None] / o.ry**2 * jac[:, 1, :])
        c = np.concatenate(cons) if cons else np.zeros(0)
        out = {"states": states, "r": r, "cost": cost, "c": c}
        if with_jac:
            nu = U.size
            Jr = np.vstack([np.einsum("ij,kjn->kin", self._Lq, jac).reshape(-1, nu),
                            np.kron(np.eye(N_h), self._Lr)])
            out["Jr"] = Jr
            out["cjac"] = np.vstack(cjac) if cjac else np.zeros((0, nu))
        return out

    def _merit(self, ev):
        return ev["cost"] + self.config.slack_weight * float(np.sum(np.maximum(-ev["c"], 0.0)))

    def solve(self, state, t=0.0, obstacles=(), U0=None):
        """Run SQP from ``U0``; returns ``(U, info)``."""
        cfg, st = self.config, self.settings
        obstacles = list(obstacles)
        N_h = cfg.N_h
        nu = N_h * N_INPUT
        s0 = np.asarray(state, dtype=float)
        centers = horizon_centers(obstacles, t, N_h, cfg.ts)
        lo = np.tile(cfg.u_min, N_h)
        hi = np.tile(cfg.u_max, N_h)
        U = np.zeros(nu) if U0 is None else np.clip(np.asarray(U0, dtype=float), lo, hi)
        ev = self._evaluate(s0, U, centers, obstacles)
        status = MAX_ITER
        max_slack = 0.0
        kkt = (np.inf, np.inf, np.inf)
        stat_tol = np.inf
        stagnant = 0
        it = 0
        for it in range(1, st.max_iter + 1):
            g = 2.0 * ev["Jr"].T @ ev["r"]
            Hgn = 2.0 * ev["Jr"].T @ ev["Jr"] + st.damping * np.eye(nu)
            nc = ev["c"].size
            H = np.zeros((nu + nc, nu + nc))
            H[:nu, :nu] = Hgn
            H[nu:, nu:] = 2.0 * cfg.slack_weight * np.eye(nc)
            f = np.concatenate([g, np.full(nc, cfg.slack_weight)])
            G = np.zeros((2 * nu + 2 * nc, nu + nc))
            G[:nu, :nu] = np.eye(nu)
            G[nu:2 * nu, :nu] = -np.eye(nu)
            G[2 * nu:2 * nu + nc, :nu] = -ev["cjac"]
            G[2 * nu:2 * nu + nc, nu:] = -np.eye(nc)
            G[2 * nu + nc:, nu:] = -np.eye(nc)
            d = np.concatenate([hi - U, U - lo, ev["c"], np.zeros(nc)])
            sol = solve_qp(QuadraticProgram(H, f, G, d), self.qp_settings)
            if sol.status != OPTIMAL:
                status = FAILED
                break
            step = sol.x[:nu]
            max_slack = float(np.max(sol.x[nu:], initial=0.0))
            y = sol.y
            # stationarity of the linearized problem at the current iterate
            grad_l = g + y[:nu] - y[nu:2 * nu] - ev["cjac"].T @ y[2 * nu:2 * nu + nc]
            viol = float(np.max(np.maximum(-ev["c"], 0.0), initial=0.0))
            kkt = (viol, float(np.max(np.abs(grad_l))),
                   float(np.max(np.abs(y[2 * nu:2 * nu + nc] * ev["c"]), initial=0.0)))
            # scale by the gradient terms before cancellation, which also bounds
            # the finite-difference noise carried into g
            g_scale = 2.0 * float(np.max(np.abs(ev["Jr"]).T @ np.abs(ev["r"])))
            stat_tol = st.tol_kkt * max(1.0, g_scale)
            if viol <= st.tol_viol and (kkt[1] <= stat_tol or np.max(np.abs(step)) <= st.tol_step):
                status = CONVERGED
                break
            # backtracking on the exact-penalty merit
            m0 = self._merit(ev)
            pred = g @ step - cfg.slack_weight * float(np.sum(np.maximum(-ev["c"], 0.0)))
            alpha = 1.0
            accepted = False
            for _ in range(st.ls_max):
                Un = np.clip(U + alpha * step, lo, hi)
                trial = self._evaluate(s0, Un, centers, obstacles, with_jac=False)
                if self._merit(trial) <= m0 + st.armijo * alpha * min(pred, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                Un = np.clip(U + alpha * step, lo, hi)
            U = Un
            ev = self._evaluate(s0, U, centers, obstacles)
            m1 = self._merit(ev)
            # stagnation: the Gauss-Newton model ignores constraint curvature,
            # so iterates can creep along an active keep-out boundary
            flat = (viol <= st.tol_viol and m0 - m1 <= st.tol_fun * max(1.0, abs(m0))
                    and float(np.max(np.maximum(-ev["c"], 0.0), initial=0.0)) <= st.tol_viol)
            stagnant = stagnant + 1 if flat else 0
            if stagnant >= st.stall_iter:
                status = STALLED
                break
        info = {"status": status, "iterations": it, "max_slack": max_slack,
                "states": ev["states"], "kkt": kkt, "cost": ev["cost"],
                "kkt_tol": (st.tol_viol, stat_tol, st.tol_viol)}
        return U, info

    def step(self, state, t: float = 0.0, obstacles=()):
        """One receding-horizon step, mirroring :meth:`KoopmanMPC.step`."""
        cfg = self.config
        t0 = time.perf_counter()
        U, info = self.solve(state, t, obstacles, self._warm)
        elapsed = time.perf_counter() - t0
        ok = info["status"] != FAILED
        if ok:
            u0 = np.clip(U[:N_INPUT], cfg.u_min, cfg.u_max)
            Us = U.reshape(cfg.N_h, N_INPUT)
            self._warm = np.vstack([Us[1:], Us[-1:]]).ravel()
        else:
            u0 = cfg.braking_input(float(np.asarray(state)[2]))
            self._warm = None
        diag = StepDiagnostics(
            t=float(t), u0=u0, status=info["status"], solve_time_s=elapsed,
            max_slack=info["max_slack"], iterations=info["iterations"],
            predicted_xy=info["states"][1:, :2].copy(), error=not ok, kkt=info["kkt"])
        return u0, diag
