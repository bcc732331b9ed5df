"""Linear and bilinear EDMD with control from streamed snapshot pairs.

Regression is done through normal equations accumulated one chunk at a
time, so memory stays ``O(d^2)`` in the regressor length ``d`` no matter how
many snapshot pairs are seen. Bilinear regressors are laid out
``[z, u, u_1 * z, u_2 * z]`` (input-major Kronecker product).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import N_INPUT, TS_DEFAULT
from .lifting import DICTIONARY_ID, DEFAULT_DICTIONARY, DictionarySpec, group_of, index_of, lift

FORMAT_VERSION = 1
KINDS = ("linear", "bilinear")
RMSE_OBSERVABLES = ("X", "Y", "v", "theta", "X2", "Y2")


class ModelFormatError(ValueError):
    """Malformed or dimensionally inconsistent model file."""


class DictionaryMismatchError(ValueError):
    """Model was identified with a different observable dictionary."""


class IllConditionedError(np.linalg.LinAlgError):
    pass


def regressor_length(kind: str, n_lift: int, m: int = N_INPUT) -> int:
    if kind == "linear":
        return n_lift + m
    if kind == "bilinear":
        return n_lift + m + m * n_lift
    raise ValueError(f"unknown model kind {kind!r}")


def regressors(z, u, kind: str) -> np.ndarray:
    """Stack regressors row-wise: ``(n, n_lift)`` and ``(n, m)`` -> ``(n, d)``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if kind == "linear":
        return np.hstack([z, u])
    if kind == "bilinear":
        return np.hstack([z, u] + [u[:, i:i + 1] * z for i in range(u.shape[1])])
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class SnapshotAccumulator:
    """Running sums ``gram = sum phi phi^T`` and ``cross = sum z' phi^T``."""

    kind: str = "bilinear"
    n_lift: int = DEFAULT_DICTIONARY.n_lift
    m: int = N_INPUT
    gram: np.ndarray = field(default=None, repr=False)
    cross: np.ndarray = field(default=None, repr=False)
    count: int = 0

    def __post_init__(self):
        d = regressor_length(self.kind, self.n_lift, self.m)
        if self.gram is None:
            self.gram = np.zeros((d, d))
        if self.cross is None:
            self.cross = np.zeros((self.n_lift, d))
        if self.gram.shape != (d, d) or self.cross.shape != (self.n_lift, d):
            raise ValueError("accumulator arrays do not match the regressor layout")

    @property
    def d(self) -> int:
        return self.gram.shape[0]

    def accumulate(self, z, u, z_next) -> "SnapshotAccumulator":
        """Add one pair or a batch of pairs (rows) in place; returns ``self``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        z_next = np.atleast_2d(np.asarray(z_next, dtype=float))
        if z.shape[1] != self.n_lift or z_next.shape[1] != self.n_lift or u.shape[1] != self.m:
            raise ValueError(
                f"dimension mismatch: z {z.shape}, u {u.shape}, z_next {z_next.shape}")
        if not (z.shape[0] == u.shape[0] == z_next.shape[0]):
            raise ValueError("z, u, z_next must have the same number of rows")
        phi = regressors(z, u, self.kind)
        self.gram += phi.T @ phi
        self.cross += z_next.T @ phi
        self.count += z.shape[0]
        return self

    def merge(self, other: "SnapshotAccumulator") -> "SnapshotAccumulator":
        if (other.kind, other.n_lift, other.m) != (self.kind, self.n_lift, self.m):
            raise ValueError("cannot merge accumulators with different layouts")
        return SnapshotAccumulator(self.kind, self.n_lift, self.m,
                                   self.gram + other.gram, self.cross + other.cross,
                                   self.count + other.count)

    __add__ = merge

    def to_linear(self) -> "SnapshotAccumulator":
        """Linear-mode accumulator; its regressors are a prefix of the bilinear ones."""
        if self.kind == "linear":
            return self
        d = regressor_length("linear", self.n_lift, self.m)
        return SnapshotAccumulator("linear", self.n_lift, self.m,
                                   self.gram[:d, :d].copy(), self.cross[:, :d].copy(),
                                   self.count)

    def save(self, path):
        np.savez(path, kind=self.kind, n_lift=self.n_lift, m=self.m,
                 gram=self.gram, cross=self.cross, count=self.count,
                 dictionary=DICTIONARY_ID)

    @classmethod
    def load(cls, path) -> "SnapshotAccumulator":
        with np.load(path, allow_pickle=False) as f:
            try:
                if str(f["dictionary"]) != DICTIONARY_ID:
                    raise DictionaryMismatchError(str(f["dictionary"]))
                return cls(str(f["kind"]), int(f["n_lift"]), int(f["m"]),
                           f["gram"].copy(), f["cross"].copy(), int(f["count"]))
            except KeyError as exc:
                raise ModelFormatError(f"{path}: missing field {exc}") from exc
            except DictionaryMismatchError:
                raise
            except ValueError as exc:
                raise ModelFormatError(f"{path}: {exc}") from exc


@dataclass
class KoopmanModel:
    kind: str
    A: np.ndarray
    B: np.ndarray
    H: list = field(default_factory=list)
    ts: float = TS_DEFAULT
    dictionary: str = DICTIONARY_ID
    lam: float = 0.0
    count: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelFormatError(f"unknown model kind {self.kind!r}")
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.H = [np.asarray(h, dtype=float) for h in self.H]
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelFormatError(f"A must be square, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != n:
            raise ModelFormatError(f"B has shape {self.B.shape}, expected ({n}, m)")
        expected_h = 0 if self.kind == "linear" else self.B.shape[1]
        if len(self.H) != expected_h:
            raise ModelFormatError(f"{self.kind} model needs {expected_h} coupling matrices")
        for h in self.H:
            if h.shape != (n, n):
                raise ModelFormatError(f"coupling matrix shape {h.shape} != ({n}, {n})")

    @property
    def n_lift(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, z, u) -> np.ndarray:
        """One-step lifted prediction, row-batched."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        out = z @ self.A.T + u @ self.B.T
        for i, h in enumerate(self.H):
            out = out + (u[..., i:i + 1] * z) @ h.T
        return out

    def input_matrix_at(self, z0) -> np.ndarray:
        """``B + [H_1 z0, ..., H_m z0]``; equals ``B`` for a linear model."""
        z0 = np.asarray(z0, dtype=float)
        Bt = self.B.copy()
        for i, h in enumerate(self.H):
            Bt[:, i] += h @ z0
        return Bt

    def simulate(self, z0, inputs) -> np.ndarray:
        """Open-loop lifted trajectory, ``(..., N + 1, n_lift)`` including ``z0``."""
        z = np.asarray(z0, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        n = inputs.shape[-2]
        out = np.empty(z.shape[:-1] + (n + 1, self.n_lift))
        out[..., 0, :] = z
        for k in range(n):
            z = self.step(z, inputs[..., k, :])
            out[..., k + 1, :] = z
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "dictionary": self.dictionary,
            "n_lift": self.n_lift,
            "m": self.m,
            "ts": self.ts,
            "lambda": self.lam,
            "count": self.count,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "H": [h.tolist() for h in self.H],
        }

    @classmethod
    def from_dict(cls, d: dict, spec: DictionarySpec = DEFAULT_DICTIONARY) -> "KoopmanModel":
        try:
            if d["format_version"] != FORMAT_VERSION:
                raise ModelFormatError(f"unsupported format_version {d['format_version']}")
            if d["dictionary"] != spec.identity:
                raise DictionaryMismatchError(
                    f"model dictionary {d['dictionary']!r} != {spec.identity!r}")
            n, m = int(d["n_lift"]), int(d["m"])
            A = np.array(d["A"], dtype=float)
            B = np.array(d["B"], dtype=float)
            H = [np.array(h, dtype=float) for h in d["H"]]
            kind, ts, lam, count = d["kind"], float(d["ts"]), float(d["lambda"]), int(d["count"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, (ModelFormatError, DictionaryMismatchError)):
                raise
            raise ModelFormatError(f"malformed model: {exc}") from exc
        if n != spec.n_lift or A.shape != (n, n) or B.shape != (n, m):
            raise ModelFormatError(
                f"dimension error: n_lift={n}, A {A.shape}, B {B.shape}, expected {spec.n_lift}")
        return cls(kind, A, B, H, ts=ts, dictionary=d["dictionary"], lam=lam, count=count)


def save_model(model: KoopmanModel, path):
    # json writes floats via repr(), which round-trips IEEE-754 doubles exactly
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path, spec: DictionarySpec = DEFAULT_DICTIONARY) -> KoopmanModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ModelFormatError(f"{path}: expected a JSON object")
    return KoopmanModel.from_dict(d, spec)


def _solve_normal_equations(gram, cross, lam):
    """Ridge solve of ``K gram = cross`` after symmetric Jacobi scaling.

    The ridge is applied to unit-diagonal scaled regressors and scaled by
    their mean diagonal, so ``lam`` is relative and independent of the
    (widely varying) observable magnitudes.
    """
    d = gram.shape[0]
    diag = np.diag(gram)
    scale = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
    gs = gram * scale[:, None] * scale[None, :]
    if lam == 0:
        w = np.linalg.eigvalsh(gs)
        if w[0] <= 1e-12 * w[-1]:
            raise IllConditionedError(
                f"normal equations are singular to working precision "
                f"(eigenvalue ratio {w[0] / w[-1]:.2e}); use lam > 0")
    gs = gs + lam * (np.trace(gs) / d) * np.eye(d)
    rhs = (cross * scale[None, :]).T
    try:
        y = linalg.cho_solve(linalg.cho_factor(gs, lower=True), rhs)
    except linalg.LinAlgError:
        y = linalg.solve(gs, rhs, assume_a="sym")
    return (y * scale[:, None]).T


def solve_model(acc: SnapshotAccumulator, lam: float = 1e-9, ts: float = TS_DEFAULT) -> KoopmanModel:
    """Identify ``A, B`` (and ``H_i`` in bilinear mode) from accumulated sums."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if acc.count < acc.d and lam == 0:
        raise IllConditionedError(f"{acc.count} pairs cannot determine {acc.d} regressors")
    K = _solve_normal_equations(acc.gram, acc.cross, lam)
    n, m = acc.n_lift, acc.m
    A, B = K[:, :n], K[:, n:n + m]
    H = [K[:, n + m + i * n:n + m + (i + 1) * n] for i in range(m)] if acc.kind == "bilinear" else []
    return KoopmanModel(acc.kind, A.copy(), B.copy(), [h.copy() for h in H],
                        ts=ts, lam=lam, count=acc.count)


def predict_linear(model: KoopmanModel, z0, inputs) -> np.ndarray:
    if model.kind != "linear":
        raise ValueError(f"predict_linear needs a linear model, got {model.kind}")
    return model.simulate(z0, inputs)


def predict_bilinear(model: KoopmanModel, z0, inputs) -> np.ndarray:
    if model.kind != "bilinear":
        raise ValueError(f"predict_bilinear needs a bilinear model, got {model.kind}")
    return model.simulate(z0, inputs)


def rmse_table(model: KoopmanModel, states, inputs, spec: DictionarySpec = DEFAULT_DICTIONARY) -> dict:
    """Open-loop RMSE per observable, averaged over trajectories.

    Parameters
    ----------
    states : array_like, shape (n_traj, N + 1, 4)
        True trajectories; each is predicted from the lift of its first state.
    inputs : array_like, shape (n_traj, N, 2)
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if states.ndim != 3 or states.shape[0] == 0:
        raise ValueError("need a nonempty (n_traj, N + 1, 4) test set")
    pred = model.simulate(lift(states[:, 0, :], spec), inputs)[:, 1:, :]
    truth = lift(states[:, 1:, :], spec)
    out = {}
    for name in RMSE_OBSERVABLES:
        k = index_of(name, spec)
        per_traj = np.sqrt(np.mean((pred[..., k] - truth[..., k]) ** 2, axis=1))
        out[name] = float(np.mean(per_traj))
    return out


@dataclass(frozen=True)
class Coupling:
    """One Taylor-predicted coefficient of the identified model."""

    matrix: str
    row: str
    column: str
    taylor: float

    def label(self) -> str:
        return f"{self.matrix}[{self.row} <- {self.column}]"


def taylor_couplings(ts: float = TS_DEFAULT) -> list[Coupling]:
    """Coefficients of the second-order expansion of the position updates.

    ``X' ~ X + ts v cos + ts^2/2 (a cos - v omega sin)`` and its square, plus
    the mirrored ``Y`` expressions (``sin``/``cos`` swapped, ``+`` on the
    ``omega`` terms).
    """
    h2 = 0.5 * ts**2
    return [
        Coupling("A", "X", "v_cos_theta", ts),
        Coupling("H1", "X", "cos_theta", h2),
        Coupling("H2", "X", "v_sin_theta", -h2),
        Coupling("H1", "X2", "X*cos_theta", ts**2),
        Coupling("H2", "X2", "X*v_sin_theta", -ts**2),
        Coupling("A", "Y", "v_sin_theta", ts),
        Coupling("H1", "Y", "sin_theta", h2),
        Coupling("H2", "Y", "v_cos_theta", h2),
        Coupling("H1", "Y2", "Y*sin_theta", ts**2),
        Coupling("H2", "Y2", "Y*v_cos_theta", ts**2),
    ]


def coupling_report(model: KoopmanModel, spec: DictionarySpec = DEFAULT_DICTIONARY) -> list[dict]:
    """Learned coefficients next to their Taylor values.

    Each learned value is summed over the duplicate group of its source
    column, since identical columns share weight arbitrarily.
    """
    if model.kind != "bilinear":
        raise ValueError("coupling_report needs a bilinear model")
    mats = {"A": model.A, "H1": model.H[0], "H2": model.H[1]}
    rows = []
    for c in taylor_couplings(model.ts):
        r = index_of(c.row, spec)
        cols = group_of(index_of(c.column, spec), spec)
        learned = float(mats[c.matrix][r, cols].sum())
        rows.append({
            "coefficient": c.label(),
            "matrix": c.matrix,
            "row": c.row,
            "column": c.column,
            "group_size": len(cols),
            "learned": learned,
            "taylor": c.taylor,
            "rel_error": abs(learned - c.taylor) / abs(c.taylor),
        })
    return rows


class KoopmanRegressor(RegressorMixin, BaseEstimator):
    """Estimator front end to EDMD with control.

    ``X`` rows are ``[z_k, u_k]`` (lifted state then input) and ``y`` rows
    are ``z_{k+1}``. Supports :meth:`partial_fit` for streaming data.

    Parameters
    ----------
    kind : {"bilinear", "linear"}
    lam : float, default=1e-9
        Relative ridge coefficient.
    ts : float, default=0.1
    n_inputs : int, default=2
    """

    def __init__(self, kind="bilinear", lam=1e-9, ts=TS_DEFAULT, n_inputs=N_INPUT):
        self.kind = kind
        self.lam = lam
        self.ts = ts
        self.n_inputs = n_inputs

    def _split(self, X, y=None):
        X = check_array(X, dtype=float)
        n_lift = X.shape[1] - self.n_inputs
        if n_lift <= 0:
            raise ValueError("X must hold the lifted state followed by the inputs")
        z, u = X[:, :n_lift], X[:, n_lift:]
        if y is None:
            return z, u
        y = check_array(y, dtype=float)
        if y.shape != z.shape:
            raise ValueError(f"y has shape {y.shape}, expected {z.shape}")
        return z, u, y

    def partial_fit(self, X, y):
        z, u, zn = self._split(X, y)
        if not hasattr(self, "accumulator_"):
            self.accumulator_ = SnapshotAccumulator(self.kind, z.shape[1], self.n_inputs)
            self.n_features_in_ = X.shape[1]
        self.accumulator_.accumulate(z, u, zn)
        self.model_ = solve_model(self.accumulator_, self.lam, self.ts)
        return self

    def fit(self, X, y):
        if hasattr(self, "accumulator_"):
            del self.accumulator_
        return self.partial_fit(X, y)

    def fit_accumulator(self, acc: SnapshotAccumulator):
        if acc.kind != self.kind:
            acc = acc.to_linear() if self.kind == "linear" else None
            if acc is None:
                raise ValueError("a linear accumulator cannot fit a bilinear model")
        self.accumulator_ = acc
        self.n_features_in_ = acc.n_lift + acc.m
        self.model_ = solve_model(acc, self.lam, self.ts)
        return self

    @property
    def A_(self):
        check_is_fitted(self, "model_")
        return self.model_.A

    @property
    def B_(self):
        check_is_fitted(self, "model_")
        return self.model_.B

    @property
    def H_(self):
        check_is_fitted(self, "model_")
        return self.model_.H

    def predict(self, X):
        check_is_fitted(self, "model_")
        z, u = self._split(X)
        return self.model_.step(z, u)

    def simulate(self, z0, inputs):
        check_is_fitted(self, "model_")
        return self.model_.simulate(z0, inputs)
