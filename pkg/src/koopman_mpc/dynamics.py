"""Unicycle kinematics, RK4 discretization, obstacle motion and keep-out geometry.

State layout is ``[X, Y, v, theta]`` and input layout is ``[a, omega]``.
Every array function broadcasts over leading dimensions so whole batches of
trajectories can be propagated in one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TS_DEFAULT = 0.1

N_STATE = 4
N_INPUT = 2


@dataclass(frozen=True)
class RobotState:
    X: float
    Y: float
    v: float
    theta: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.to_array())):
            raise ValueError(f"non-finite robot state: {self}")

    def to_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.v, self.theta], dtype=float)

    @classmethod
    def from_array(cls, s) -> "RobotState":
        s = np.asarray(s, dtype=float).reshape(N_STATE)
        return cls(float(s[0]), float(s[1]), float(s[2]), float(s[3]))


@dataclass(frozen=True)
class ControlInput:
    a: float
    omega: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.omega)):
            raise ValueError(f"non-finite control input: {self}")

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.omega], dtype=float)

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(N_INPUT)
        return cls(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned elliptical keep-out region moving at constant velocity.

    Attributes
    ----------
    Xc0, Yc0 : float
        Center at ``t = 0`` in meters.
    rx, ry : float
        Semi-axes in meters.
    eps : float
        Safety margin; admissible positions satisfy ``ellipse_value >= 1 + eps``.
    v_obs, theta_obs : float
        Speed (m/s) and heading (rad) of the center. ``v_obs = 0`` is static.
    """

    Xc0: float
    Yc0: float
    rx: float
    ry: float
    eps: float = 0.0
    v_obs: float = 0.0
    theta_obs: float = 0.0

    def __post_init__(self):
        if not (self.rx > 0 and self.ry > 0):
            raise ValueError("obstacle semi-axes must be positive")
        if self.eps < 0:
            raise ValueError("obstacle safety margin must be nonnegative")

    def center_at(self, t):
        return obstacle_center_at(self, t)


def unicycle_derivative(s, u) -> np.ndarray:
    """Continuous-time right-hand side ``(v cos(theta), v sin(theta), a, omega)``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    v = s[..., 2]
    th = s[..., 3]
    return np.stack(
        [v * np.cos(th), v * np.sin(th), u[..., 0] * np.ones_like(v), u[..., 1] * np.ones_like(v)],
        axis=-1,
    )


def rk4_step(s, u, ts: float = TS_DEFAULT) -> np.ndarray:
    """Advance the unicycle one zero-order-hold step with classical RK4.

    The speed and heading sub-dynamics are linear in time, on which RK4 is
    exact, so those two components are written in closed form. This keeps
    ``v' = v + a*ts`` and ``theta' = theta + omega*ts`` bitwise.
    """
    if not ts > 0:
        raise ValueError("ts must be positive")
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = unicycle_derivative(s, u)
    k2 = unicycle_derivative(s + 0.5 * ts * k1, u)
    k3 = unicycle_derivative(s + 0.5 * ts * k2, u)
    k4 = unicycle_derivative(s + ts * k3, u)
    out = s + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 2] = s[..., 2] + u[..., 0] * ts
    out[..., 3] = s[..., 3] + u[..., 1] * ts
    return out


def simulate_rollout(s0, inputs, ts: float = TS_DEFAULT) -> np.ndarray:
    """Roll the true dynamics forward under an input sequence.

    Parameters
    ----------
    s0 : array_like, shape (..., 4)
    inputs : array_like, shape (..., N, 2)
        Batch dimensions must match those of ``s0``.

    Returns
    -------
    ndarray, shape (..., N + 1, 4)
        Element 0 is ``s0``.
    """
    s0 = np.asarray(s0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim < 2 or inputs.shape[-2] == 0:
        raise ValueError("input sequence must be nonempty")
    n = inputs.shape[-2]
    out = np.empty(s0.shape[:-1] + (n + 1, N_STATE))
    out[..., 0, :] = s0
    s = s0
    for k in range(n):
        s = rk4_step(s, inputs[..., k, :], ts)
        out[..., k + 1, :] = s
    return out


def obstacle_center_at(o: Obstacle, t):
    """Straight-line constant-velocity center ``(Xc, Yc)`` at time ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("obstacle time must be nonnegative")
    xc = o.Xc0 + o.v_obs * np.cos(o.theta_obs) * t
    yc = o.Yc0 + o.v_obs * np.sin(o.theta_obs) * t
    return xc, yc


def ellipse_value(X, Y, Xc, Yc, rx, ry):
    """Normalized squared distance to an ellipse center; 1 on the boundary."""
    if not (np.all(np.asarray(rx) > 0) and np.all(np.asarray(ry) > 0)):
        raise ValueError("semi-axes must be positive")
    return (np.asarray(X) - Xc) ** 2 / rx**2 + (np.asarray(Y) - Yc) ** 2 / ry**2


def is_safe(X, Y, o: Obstacle, t) -> bool:
    xc, yc = obstacle_center_at(o, t)
    return bool(ellipse_value(X, Y, xc, yc, o.rx, o.ry) >= 1.0 + o.eps)
