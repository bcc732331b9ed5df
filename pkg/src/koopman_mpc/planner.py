"""Receding-horizon QP controller on the bilinear Koopman predictor.

At each step the robot frame is shifted so that the robot sits at the
origin (the identification data all start there), the current state is
lifted, the bilinear input coupling is frozen at that lifted state, and
the resulting linear prediction is condensed into a dense QP over the
stacked input sequence. Elliptical keep-out regions become linear rows
because ``X^2`` and ``Y^2`` are themselves predicted observables.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import N_INPUT, TS_DEFAULT, Obstacle, obstacle_center_at
from .edmd import KoopmanModel
from .lifting import DEFAULT_DICTIONARY, lift
from .qp import OPTIMAL, QpSettings, QuadraticProgram, solve_qp

N_OUT = 4  # X, Y, v, theta
N_OUT_EXT = 6  # plus X^2, Y^2


@dataclass
class MpcConfig:
    N_h: int = 40
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.0, 0.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([4.0, 10.0]))
    ts: float = TS_DEFAULT
    u_min: np.ndarray = field(default_factory=lambda: np.array([-2.0, -np.pi]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([2.0, np.pi]))
    slack_weight: float = 1e5
    target: np.ndarray = field(default_factory=lambda: np.array([10.0, 8.0, 0.0, 0.0]))

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(N_INPUT)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(N_INPUT)
        self.target = np.asarray(self.target, dtype=float).reshape(N_OUT)
        if int(self.N_h) < 1:
            raise ValueError("N_h must be at least 1")
        self.N_h = int(self.N_h)
        if self.Q.shape != (N_OUT, N_OUT) or self.R.shape != (N_INPUT, N_INPUT):
            raise ValueError("Q must be 4x4 and R 2x2")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))[0] < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T))[0] <= 0:
            raise ValueError("R must be positive definite")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be below u_max")
        if not (self.slack_weight > 0 and self.ts > 0):
            raise ValueError("slack_weight and ts must be positive")

    def to_dict(self) -> dict:
        return {"N_h": self.N_h, "Q": self.Q.tolist(), "R": self.R.tolist(), "ts": self.ts,
                "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
                "slack_weight": self.slack_weight, "target": self.target.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MpcConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown MPC config fields: {sorted(unknown)}")
        return cls(**d)

    def braking_input(self, v: float) -> np.ndarray:
        """Strongest deceleration toward zero speed, no turning."""
        a = np.clip(-v / self.ts, self.u_min[0], self.u_max[0])
        return np.array([a, np.clip(0.0, self.u_min[1], self.u_max[1])])


@dataclass
class StepDiagnostics:
    t: float
    u0: np.ndarray
    status: str
    solve_time_s: float
    max_slack: float
    iterations: int = 0
    predicted_xy: np.ndarray = field(default=None, repr=False)
    error: bool = False
    kkt: tuple = (0.0, 0.0, 0.0)


def horizon_centers(obstacles, t: float, N_h: int, ts: float) -> np.ndarray:
    """Obstacle centers at ``t + k ts``, ``k = 1..N_h``: shape ``(n_obs, N_h, 2)``."""
    times = t + ts * np.arange(1, N_h + 1)
    out = np.empty((len(obstacles), N_h, 2))
    for i, o in enumerate(obstacles):
        xc, yc = obstacle_center_at(o, times)
        out[i, :, 0], out[i, :, 1] = xc, yc
    return out


def shift_frame(state, target, centers):
    """Translate so the robot sits at the origin; heading is left as is.

    Returns ``(state, target, centers, offset)`` in the shifted frame.
    """
    state = np.asarray(state, dtype=float)
    offset = state[:2].copy()
    s = state.copy()
    s[:2] = 0.0
    tg = np.asarray(target, dtype=float).copy()
    tg[:2] -= offset
    c = np.asarray(centers, dtype=float) - offset
    return s, tg, c, offset


def linearize_input_matrix(model: KoopmanModel, z0) -> np.ndarray:
    """Input matrix with the bilinear terms frozen at ``z0``."""
    if model.kind != "bilinear":
        raise ValueError("linearization needs a bilinear model")
    return model.input_matrix_at(z0)


def build_prediction(A, Bt, N_h: int):
    """Stacked free and forced response maps over the horizon.

    Returns ``PhiStack`` with block ``k`` equal to ``A^(k+1)`` and the
    block lower-triangular ``Gamma`` with block ``(i, j) = A^(i-j) Bt``.
    """
    n, m = Bt.shape
    powers = [np.eye(n)]
    for _ in range(N_h):
        powers.append(A @ powers[-1])
    phi = np.vstack(powers[1:])
    AkB = [P @ Bt for P in powers[:N_h]]
    gamma = np.zeros((N_h * n, N_h * m))
    for i in range(N_h):
        for j in range(i + 1):
            gamma[i * n:(i + 1) * n, j * m:(j + 1) * m] = AkB[i - j]
    return phi, gamma


def _block_toeplitz(blocks, N_h):
    """Lower block-triangular Toeplitz matrix from ``blocks[k]`` on sub-diagonal ``k``."""
    p, m = blocks.shape[1:]
    out = np.zeros((N_h * p, N_h * m))
    for i in range(N_h):
        # row block i holds blocks[i], blocks[i-1], ..., blocks[0]
        out[i * p:(i + 1) * p, :(i + 1) * m] = blocks[i::-1].transpose(1, 0, 2).reshape(p, -1)
    return out


def output_selector(n_out: int, N_h: int, n_lift: int) -> np.ndarray:
    C = np.zeros((n_out, n_lift))
    C[:, :n_out] = np.eye(n_out)
    return np.kron(np.eye(N_h), C)


def build_cost(phi, gamma, z0, target, Q, R):
    """Dense cost ``1/2 U'HqU + fq'U`` of the tracking objective."""
    n_lift = phi.shape[1]
    m = R.shape[0]
    N_h = gamma.shape[1] // m
    Cb = output_selector(N_OUT, N_h, n_lift)
    CG = Cb @ gamma
    free = Cb @ (phi @ z0)
    Qb = np.kron(np.eye(N_h), Q)
    Rb = np.kron(np.eye(N_h), R)
    Hq = 2.0 * (CG.T @ Qb @ CG + Rb)
    fq = 2.0 * CG.T @ Qb @ (free - np.tile(target, N_h))
    return 0.5 * (Hq + Hq.T), fq


def build_input_bounds(N_h: int, u_min, u_max):
    m = len(u_min)
    Gu = np.vstack([np.eye(N_h * m), -np.eye(N_h * m)])
    du = np.concatenate([np.tile(u_max, N_h), -np.tile(u_min, N_h)])
    return Gu, du


def obstacle_rows(centers, rx, ry, eps):
    """Per-step row ``s_k`` over ``[X, Y, v, theta, X^2, Y^2]`` and bound ``beta_k``.

    ``s_k . y_k <= beta_k`` is the keep-out inequality rearranged so that it
    is affine in the positions and their squares.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    xc, yc = centers[:, 0], centers[:, 1]
    S = np.zeros((len(centers), N_OUT_EXT))
    S[:, 0] = 2.0 * xc / rx**2
    S[:, 1] = 2.0 * yc / ry**2
    S[:, 4] = -1.0 / rx**2
    S[:, 5] = -1.0 / ry**2
    beta = xc**2 / rx**2 + yc**2 / ry**2 - 1.0 - eps
    return S, beta


def build_obstacle_constraints(centers, rx, ry, eps, phi, gamma, z0):
    """Rows ``Gobs U <= dobs``, one per horizon step, for one obstacle."""
    n_lift = phi.shape[1]
    N_h = phi.shape[0] // n_lift
    S, beta = obstacle_rows(centers, rx, ry, eps)
    Ct = output_selector(N_OUT_EXT, N_h, n_lift)
    Sb = np.zeros((N_h, N_h * N_OUT_EXT))
    for k in range(N_h):
        Sb[k, k * N_OUT_EXT:(k + 1) * N_OUT_EXT] = S[k]
    Gobs = Sb @ Ct @ gamma
    dobs = beta - Sb @ Ct @ (phi @ z0)
    return Gobs, dobs


class KoopmanMPC:
    """Bilinear Koopman MPC planner; one instance per closed-loop run.

    The instance keeps the previous solution for warm starting, so it is
    not meant to be shared between concurrent scenarios.
    """

    def __init__(self, model: KoopmanModel, config: MpcConfig | None = None,
                 qp_settings: QpSettings | None = None, spec=DEFAULT_DICTIONARY):
        if model.kind != "bilinear":
            raise ValueError("KoopmanMPC needs a bilinear model")
        self.model = model
        self.config = config or MpcConfig()
        if abs(model.ts - self.config.ts) > 1e-12:
            raise ValueError(f"model ts {model.ts} does not match controller ts {self.config.ts}")
        self.qp_settings = qp_settings or QpSettings()
        self.spec = spec
        N_h = self.config.N_h
        n = model.n_lift
        # C~ A^k for k = 0..N_h: everything the condensed problem needs from A
        rows = np.empty((N_h + 1, N_OUT_EXT, n))
        P = np.eye(n)
        for k in range(N_h + 1):
            rows[k] = P[:N_OUT_EXT]
            P = model.A @ P
        self._CA = rows
        self._Gu, self._du = build_input_bounds(N_h, self.config.u_min, self.config.u_max)
        self.reset()

    def reset(self):
        self._warm = None

    def condensed(self, z0):
        """Projected free response ``(N_h, 6)`` and forced response ``(N_h*6, N_h*m)``."""
        Bt = self.model.input_matrix_at(z0)
        N_h = self.config.N_h
        free = np.einsum("kij,j->ki", self._CA[1:], z0)
        blocks = self._CA[:N_h] @ Bt
        return free, _block_toeplitz(blocks, N_h)

    def build_qp(self, z0, target, centers, obstacles):
        cfg = self.config
        N_h, m = cfg.N_h, N_INPUT
        nu = N_h * m
        free, G6 = self.condensed(z0)
        sel = np.zeros(N_h * N_OUT_EXT, dtype=bool).reshape(N_h, N_OUT_EXT)
        sel[:, :N_OUT] = True
        sel = sel.ravel()
        CG = G6[sel]
        Qb = np.kron(np.eye(N_h), cfg.Q)
        Rb = np.kron(np.eye(N_h), cfg.R)
        err = free[:, :N_OUT].ravel() - np.tile(target, N_h)
        QCG = Qb @ CG
        Hu = 2.0 * (CG.T @ QCG + Rb)
        fu = 2.0 * QCG.T @ err

        n_rows = N_h * len(obstacles)
        Gobs = np.zeros((n_rows, nu))
        dobs = np.zeros(n_rows)
        for i, o in enumerate(obstacles):
            S, beta = obstacle_rows(centers[i], o.rx, o.ry, o.eps)
            r = slice(i * N_h, (i + 1) * N_h)
            Gobs[r] = np.einsum("kj,kjn->kn", S, G6.reshape(N_h, N_OUT_EXT, nu))
            dobs[r] = beta - np.einsum("kj,kj->k", S, free)

        ns = n_rows
        H = np.zeros((nu + ns, nu + ns))
        H[:nu, :nu] = Hu
        H[nu:, nu:] = 2.0 * cfg.slack_weight * np.eye(ns)
        # the linear term makes the penalty exact: slack stays zero whenever the hard
        # rows are feasible with multipliers below slack_weight
        f = np.concatenate([fu, np.full(ns, cfg.slack_weight)])
        G = np.zeros((self._Gu.shape[0] + 2 * ns, nu + ns))
        G[:self._Gu.shape[0], :nu] = self._Gu
        G[self._Gu.shape[0]:self._Gu.shape[0] + ns, :nu] = Gobs
        G[self._Gu.shape[0]:self._Gu.shape[0] + ns, nu:] = -np.eye(ns)
        G[self._Gu.shape[0] + ns:, nu:] = -np.eye(ns)
        d = np.concatenate([self._du, dobs, np.zeros(ns)])
        return QuadraticProgram(H, f, G, d), free, G6

    def step(self, state, t: float = 0.0, obstacles=()):
        """Solve one MPC problem and return ``(u0, StepDiagnostics)``."""
        cfg = self.config
        obstacles = list(obstacles)
        t0 = time.perf_counter()
        centers = horizon_centers(obstacles, t, cfg.N_h, cfg.ts)
        s_sh, tg_sh, c_sh, offset = shift_frame(state, cfg.target, centers)
        z0 = lift(s_sh, self.spec)
        p, free, G6 = self.build_qp(z0, tg_sh, c_sh, obstacles)
        nu = cfg.N_h * N_INPUT
        x0 = None
        if self._warm is not None and self._warm.size == p.n:
            x0 = self._warm
        sol = solve_qp(p, self.qp_settings, x0=x0)
        elapsed = time.perf_counter() - t0

        U = sol.x[:nu]
        slack = sol.x[nu:]
        ok = sol.status == OPTIMAL
        if ok:
            u0 = np.clip(U[:N_INPUT], cfg.u_min, cfg.u_max)
            warm = sol.x.reshape(-1).copy()
            Us = U.reshape(cfg.N_h, N_INPUT)
            warm[:nu] = np.vstack([Us[1:], Us[-1:]]).ravel()
            self._warm = warm
        else:
            u0 = cfg.braking_input(float(np.asarray(state)[2]))
            self._warm = None
        pred = (free + (G6 @ U).reshape(cfg.N_h, N_OUT_EXT))[:, :2] + offset
        diag = StepDiagnostics(
            t=float(t), u0=u0, status=sol.status, solve_time_s=elapsed,
            max_slack=float(np.max(slack, initial=0.0)), iterations=sol.iterations,
            predicted_xy=pred, error=not ok,
            kkt=(sol.primal_residual, sol.dual_residual, sol.complementarity))
        return u0, diag
