"""Dataset generation, closed-loop simulation and Monte Carlo benchmarking.

All randomness flows from ``numpy.random.SeedSequence`` children keyed by a
fixed chunk or scenario index, so results do not depend on the number of
worker threads (``KOOPMAN_THREADS``).
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    N_INPUT, N_STATE, Obstacle, ellipse_value, obstacle_center_at, rk4_step, simulate_rollout,
)
from .edmd import KoopmanModel, SnapshotAccumulator, solve_model
from .lifting import DEFAULT_DICTIONARY, lift
from .nmpc import NonlinearMPC
from .planner import KoopmanMPC, MpcConfig

CONTROLLERS = ("bkmpc", "nmpc")
LOG_HEADER = ("t", "X", "Y", "v", "theta", "a", "omega", "solve_time_s", "status",
              "max_slack", "min_ellipse_value")
METRIC_KEYS = ("avg_s", "max_s", "p95_s", "arrival_t_s", "min_ellipse", "success")

CHUNK_TRAJ = 500
V0_RANGE = (0.0, 5.0)
A_RANGE = (-2.0, 2.0)
OMEGA_RANGE = (-math.pi, math.pi)

ARRIVAL_THRESHOLD = 0.5
STOP_RADIUS = 0.25
STOP_SPEED = 0.1
STOP_STEPS = 5


class ConfigError(ValueError):
    """Malformed scenario configuration."""


def worker_count(default: int = 1) -> int:
    """Worker cap from ``KOOPMAN_THREADS`` (at least 1)."""
    raw = os.environ.get("KOOPMAN_THREADS")
    if raw is None or raw.strip() == "":
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"KOOPMAN_THREADS must be an integer, got {raw!r}") from None


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- data

def sample_trajectories(n_traj: int, steps: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Random initial states at the origin and random piecewise-constant inputs.

    Returns
    -------
    states : ndarray, shape (n_traj, steps + 1, 4)
    inputs : ndarray, shape (n_traj, steps, 2)
    """
    s0 = np.zeros((n_traj, N_STATE))
    s0[:, 2] = rng.uniform(*V0_RANGE, n_traj)
    s0[:, 3] = rng.uniform(-math.pi, math.pi, n_traj)
    inputs = np.stack([rng.uniform(*A_RANGE, (n_traj, steps)),
                       rng.uniform(*OMEGA_RANGE, (n_traj, steps))], axis=-1)
    return simulate_rollout(s0, inputs), inputs


def generate_trajectories(n_traj: int, steps: int = 40, seed: int = 0):
    """Deterministic trajectory set built from fixed-size chunks."""
    if n_traj < 1 or steps < 1:
        raise ValueError("n_traj and steps must be at least 1")
    n_chunks = -(-n_traj // CHUNK_TRAJ)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    parts = []
    for c, ss in enumerate(children):
        size = min(CHUNK_TRAJ, n_traj - c * CHUNK_TRAJ)
        parts.append(sample_trajectories(size, steps, np.random.default_rng(ss)))
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


@dataclass
class Dataset:
    """Training accumulator plus held-out trajectories."""

    accumulator: SnapshotAccumulator
    test_states: np.ndarray
    test_inputs: np.ndarray
    seed: int
    steps: int


def _accumulate_chunk(args):
    ss, size, steps, n_keep = args
    states, inputs = sample_trajectories(size, steps, np.random.default_rng(ss))
    acc = SnapshotAccumulator("bilinear")
    if n_keep:
        z = lift(states[:n_keep, :-1].reshape(-1, N_STATE))
        zn = lift(states[:n_keep, 1:].reshape(-1, N_STATE))
        acc.accumulate(z, inputs[:n_keep].reshape(-1, N_INPUT), zn)
    return acc, states[n_keep:], inputs[n_keep:]


def generate_dataset(n_traj: int, steps: int = 40, seed: int = 0, n_test: int = 0,
                     workers: int | None = None) -> Dataset:
    """Simulate ``n_traj`` random trajectories and stream them into an accumulator.

    The last ``n_test`` trajectories (by global index) are held out and
    returned raw instead of being accumulated. The bilinear accumulator
    also serves the linear fit through :meth:`SnapshotAccumulator.to_linear`.
    """
    if n_traj < 1 or steps < 1:
        raise ValueError("n_traj and steps must be at least 1")
    if not 0 <= n_test < n_traj:
        raise ValueError("n_test must lie in [0, n_traj)")
    n_train = n_traj - n_test
    n_chunks = -(-n_traj // CHUNK_TRAJ)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    jobs = []
    for c, ss in enumerate(children):
        lo = c * CHUNK_TRAJ
        size = min(CHUNK_TRAJ, n_traj - lo)
        jobs.append((ss, size, steps, int(np.clip(n_train - lo, 0, size))))
    results = _map(_accumulate_chunk, jobs, worker_count() if workers is None else workers)
    acc = SnapshotAccumulator("bilinear")
    for part, _, _ in results:  # fixed merge order keeps sums bitwise reproducible
        acc = acc.merge(part)
    test_s = np.concatenate([r[1] for r in results])
    test_u = np.concatenate([r[2] for r in results])
    return Dataset(acc, test_s, test_u, seed, steps)


def train_models(n_traj: int = 5000, steps: int = 40, seed: int = 0, lam: float = 1e-9,
                 ts: float = 0.1) -> dict[str, KoopmanModel]:
    """Fit linear and bilinear models on one freshly generated dataset."""
    ds = generate_dataset(n_traj, steps, seed)
    return {"bilinear": solve_model(ds.accumulator, lam, ts),
            "linear": solve_model(ds.accumulator.to_linear(), lam, ts)}


# ---------------------------------------------------------------- scenarios

def default_obstacle() -> Obstacle:
    return Obstacle(9.0, 4.0, 2.5, 2.5, eps=0.5, v_obs=1.5, theta_obs=8 * math.pi / 9)


def _obstacle_to_dict(o: Obstacle) -> dict:
    return {"Xc0": o.Xc0, "Yc0": o.Yc0, "rx": o.rx, "ry": o.ry, "eps": o.eps,
            "v_obs": o.v_obs, "theta_obs": o.theta_obs}


@dataclass
class ScenarioConfig:
    """One closed-loop experiment.

    ``target`` overrides ``mpc.target`` so the two cannot disagree.
    """

    initial_state: np.ndarray = field(default_factory=lambda: np.zeros(N_STATE))
    target: np.ndarray = field(default_factory=lambda: np.array([10.0, 8.0, 0.0, 0.0]))
    obstacles: list = field(default_factory=lambda: [default_obstacle()])
    mpc: MpcConfig = field(default_factory=MpcConfig)
    duration: float = 15.0
    controller: str = "bkmpc"
    seed: int = 0

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float).reshape(N_STATE)
        self.target = np.asarray(self.target, dtype=float).reshape(N_STATE)
        if not (np.all(np.isfinite(self.initial_state)) and np.all(np.isfinite(self.target))):
            raise ConfigError("initial state and target must be finite")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        self.obstacles = list(self.obstacles)
        self.mpc = replace(self.mpc, target=self.target.copy())

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.mpc.ts))

    def to_dict(self) -> dict:
        mpc = self.mpc.to_dict()
        mpc.pop("target")
        return {"initial_state": self.initial_state.tolist(), "target": self.target.tolist(),
                "obstacles": [_obstacle_to_dict(o) for o in self.obstacles], "mpc": mpc,
                "duration": self.duration, "controller": self.controller, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("scenario config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "obstacles" in kw:
                kw["obstacles"] = [Obstacle(**o) for o in kw["obstacles"]]
            if "mpc" in kw:
                kw["mpc"] = MpcConfig.from_dict(kw["mpc"])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def save_scenario(sc: ScenarioConfig, path):
    with open(path, "w") as fh:
        json.dump(sc.to_dict(), fh, indent=2)


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ScenarioConfig.from_dict(data)


# ---------------------------------------------------------------- logs and metrics

@dataclass
class Metrics:
    avg_s: float
    max_s: float
    p95_s: float
    arrival_t_s: float | None
    min_ellipse: float
    success: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}


def nearest_rank(values, q: float) -> float:
    """Percentile ``q`` in (0, 100] by the nearest-rank rule."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("no values")
    if not 0 < q <= 100:
        raise ValueError("q must lie in (0, 100]")
    return float(v[max(1, math.ceil(q / 100.0 * v.size)) - 1])


def min_ellipse_at(state, obstacles, t) -> float:
    """Smallest true keep-out value over all obstacles (``inf`` without obstacles)."""
    vals = [ellipse_value(state[0], state[1], *obstacle_center_at(o, t), o.rx, o.ry)
            for o in obstacles]
    return float(min(vals)) if vals else math.inf


@dataclass
class ClosedLoopLog:
    """Per-step records; row ``k`` holds the state at ``t[k]`` and the input applied there."""

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    solve_time_s: np.ndarray
    status: list
    max_slack: np.ndarray
    min_ellipse_value: np.ndarray
    final_state: np.ndarray
    final_min_ellipse: float
    target: np.ndarray
    failures: int = 0
    controller: str = "bkmpc"

    def __len__(self):
        return len(self.t)

    def metrics(self, arrival_threshold: float = ARRIVAL_THRESHOLD) -> Metrics:
        pos = np.vstack([self.states, self.final_state[None]])[:, :2]
        times = np.append(self.t, self.t[-1] + (self.t[-1] - self.t[-2] if len(self) > 1 else 0.0))
        err = np.linalg.norm(pos - self.target[:2], axis=1)
        hit = np.flatnonzero(err < arrival_threshold)
        arrival = float(times[hit[0]]) if hit.size else None
        min_ell = float(min(np.min(self.min_ellipse_value), self.final_min_ellipse))
        st = self.solve_time_s
        return Metrics(avg_s=float(np.mean(st)), max_s=float(np.max(st)),
                       p95_s=nearest_rank(st, 95), arrival_t_s=arrival, min_ellipse=min_ell,
                       success=bool(self.failures == 0 and arrival is not None and min_ell >= 1.0))

    def rows(self, with_timing: bool = True):
        for k in range(len(self)):
            s, u = self.states[k], self.inputs[k]
            yield [repr(float(self.t[k])), *(repr(float(x)) for x in s),
                   *(repr(float(x)) for x in u),
                   repr(float(self.solve_time_s[k])) if with_timing else "",
                   self.status[k], repr(float(self.max_slack[k])),
                   repr(float(self.min_ellipse_value[k]))]

    def to_csv(self, path, with_timing: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            w.writerows(self.rows(with_timing))


def read_log_csv(path) -> dict[str, np.ndarray]:
    """Parse a log CSV into columns; ``status`` stays a string array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_HEADER:
            raise ValueError(f"unexpected log header {header}")
        rows = list(reader)
    cols = {}
    for j, name in enumerate(LOG_HEADER):
        raw = [r[j] for r in rows]
        if name == "status":
            cols[name] = np.array(raw, dtype=str)
        else:
            cols[name] = np.array([float(x) if x else np.nan for x in raw])
    return cols


def write_metrics(metrics: Metrics | dict, path):
    data = metrics.to_dict() if isinstance(metrics, Metrics) else metrics
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)


# ---------------------------------------------------------------- closed loop

def make_controller(sc: ScenarioConfig, model: KoopmanModel | None = None):
    if sc.controller == "bkmpc":
        if model is None or model.kind != "bilinear":
            raise ValueError("bkmpc requires a bilinear Koopman model")
        return KoopmanMPC(model, sc.mpc)
    return NonlinearMPC(sc.mpc)


def run_closed_loop(sc: ScenarioConfig, model: KoopmanModel | None = None,
                    controller=None) -> ClosedLoopLog:
    """Simulate the receding-horizon loop on the true RK4 dynamics.

    Only the controller step is timed. A controller exception or a failed
    solve counts as a hard failure; the controller's braking input (or
    :meth:`MpcConfig.braking_input`) is applied and the run continues.
    """
    ctrl = controller if controller is not None else make_controller(sc, model)
    cfg = sc.mpc
    ts = cfg.ts
    n = sc.n_steps
    if n < 1:
        raise ConfigError("duration shorter than one control step")
    s = sc.initial_state.copy()
    t_log, s_log, u_log, st_log, stat, slack, ell = [], [], [], [], [], [], []
    failures = 0
    calm = 0
    for k in range(n):
        t = k * ts
        try:
            u, diag = ctrl.step(s, t, sc.obstacles)
            status, solve_t, max_slack = diag.status, diag.solve_time_s, diag.max_slack
            if diag.error:
                failures += 1
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            u = cfg.braking_input(float(s[2]))
            status, solve_t, max_slack = "error", math.nan, math.nan
            failures += 1
        u = np.asarray(u, dtype=float)
        t_log.append(t)
        s_log.append(s)
        u_log.append(u)
        st_log.append(solve_t)
        stat.append(status)
        slack.append(max_slack)
        ell.append(min_ellipse_at(s, sc.obstacles, t))
        s = rk4_step(s, u, ts)
        close = np.hypot(*(s[:2] - sc.target[:2])) < STOP_RADIUS and abs(s[2]) < STOP_SPEED
        calm = calm + 1 if close else 0
        if calm >= STOP_STEPS:
            break
    t_end = len(t_log) * ts
    return ClosedLoopLog(
        t=np.array(t_log), states=np.array(s_log), inputs=np.array(u_log),
        solve_time_s=np.array(st_log), status=stat, max_slack=np.array(slack),
        min_ellipse_value=np.array(ell), final_state=s,
        final_min_ellipse=min_ellipse_at(s, sc.obstacles, t_end), target=sc.target.copy(),
        failures=failures, controller=sc.controller)


# ---------------------------------------------------------------- Monte Carlo

@dataclass
class ScenarioRanges:
    """Randomization box for :func:`random_scenarios`."""

    target_x: tuple = (5.0, 12.0)
    target_y: tuple = (4.0, 10.0)
    obstacle_speed: tuple = (0.5, 2.0)
    obstacle_radius: tuple = (1.0, 2.0)
    obstacle_eps: float = 0.3
    crossing_fraction: tuple = (0.3, 0.6)
    crossing_time: tuple = (1.5, 4.0)
    heading_jitter: float = math.pi / 6
    clearance: float = 1.5

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _crossing_obstacle(rng, target, r: ScenarioRanges, duration):
    L = float(np.hypot(target[0], target[1]))
    path_dir = np.array(target[:2]) / L
    for _ in range(1000):
        lam = rng.uniform(*r.crossing_fraction)
        tc = rng.uniform(*r.crossing_time)
        speed = rng.uniform(*r.obstacle_speed)
        rad = rng.uniform(*r.obstacle_radius)
        side = rng.choice([-1.0, 1.0])
        heading = math.atan2(path_dir[1], path_dir[0]) + side * math.pi / 2 \
            + rng.uniform(-r.heading_jitter, r.heading_jitter)
        p = lam * L * path_dir
        c0 = p - speed * tc * np.array([math.cos(heading), math.sin(heading)])
        o = Obstacle(float(c0[0]), float(c0[1]), rad, rad, eps=r.obstacle_eps,
                     v_obs=float(speed), theta_obs=float(heading))
        # neither the start nor the goal may be swept by the keep-out region
        grid = np.linspace(0.0, duration, int(duration / 0.1) + 1)
        cx, cy = obstacle_center_at(o, grid)
        lim = (1.0 + r.obstacle_eps) * r.clearance
        if (ellipse_value(0.0, 0.0, cx[0], cy[0], rad, rad) >= lim
                and np.min(ellipse_value(target[0], target[1], cx, cy, rad, rad)) >= lim):
            return o
    raise RuntimeError("could not place a crossing obstacle")


def random_scenarios(n: int, seed: int = 0, ranges: ScenarioRanges | None = None,
                     duration: float = 15.0, mpc: MpcConfig | None = None) -> list[ScenarioConfig]:
    """Targets uniform in a box; one obstacle crossing the start-to-target segment."""
    if n < 1:
        raise ValueError("n must be at least 1")
    r = ranges or ScenarioRanges()
    mpc = mpc or MpcConfig()
    out = []
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(ss)
        target = np.array([rng.uniform(*r.target_x), rng.uniform(*r.target_y), 0.0, 0.0])
        obs = _crossing_obstacle(rng, target, r, duration)
        out.append(ScenarioConfig(target=target, obstacles=[obs], mpc=mpc,
                                  duration=duration, seed=int(seed) * 100003 + i))
    return out


def aggregate_metrics(logs: list[ClosedLoopLog]) -> dict:
    """Pooled solve-time statistics plus success counts over several runs."""
    times = np.concatenate([lg.solve_time_s for lg in logs])
    times = times[np.isfinite(times)]
    per_run = [lg.metrics() for lg in logs]
    arrivals = [m.arrival_t_s for m in per_run if m.arrival_t_s is not None]
    return {"avg_s": float(np.mean(times)), "max_s": float(np.max(times)),
            "p95_s": nearest_rank(times, 95),
            "arrival_t_s": float(np.mean(arrivals)) if arrivals else None,
            "min_ellipse": float(min(m.min_ellipse for m in per_run)),
            "success": int(sum(m.success for m in per_run)), "n_runs": len(logs)}


@dataclass
class MonteCarloResult:
    scenarios: list
    logs: dict
    metrics: dict
    ranges: ScenarioRanges

    def summary(self) -> dict:
        return {"controllers": self.metrics, "ranges": self.ranges.to_dict(),
                "scenarios": [sc.to_dict() for sc in self.scenarios]}


def monte_carlo(n_scenarios: int, seed: int = 0, kinds=CONTROLLERS,
                model: KoopmanModel | None = None, ranges: ScenarioRanges | None = None,
                duration: float = 15.0, mpc: MpcConfig | None = None,
                workers: int | None = None) -> MonteCarloResult:
    """Run every controller kind on the same randomized scenario list."""
    r = ranges or ScenarioRanges()
    scenarios = random_scenarios(n_scenarios, seed, r, duration, mpc)
    workers = worker_count() if workers is None else workers
    logs, metrics = {}, {}
    for kind in kinds:
        runs = [replace(sc, controller=kind) for sc in scenarios]
        logs[kind] = _map(lambda sc: run_closed_loop(sc, model), runs, workers)
        metrics[kind] = aggregate_metrics(logs[kind])
    return MonteCarloResult(scenarios, logs, metrics, r)
