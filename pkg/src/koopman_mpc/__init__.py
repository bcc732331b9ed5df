"""Bilinear Koopman model predictive control for a unicycle robot.

Subpackages
-----------
dynamics : unicycle model, RK4 integrator, moving elliptical obstacles
lifting : polynomial observable dictionary and :class:`PolynomialLifter`
edmd : streamed EDMD regression and :class:`KoopmanRegressor`
qp : dense ADMM quadratic-program solver and an enumeration oracle
planner : condensed bilinear Koopman MPC (:class:`KoopmanMPC`)
nmpc : SQP nonlinear MPC baseline (:class:`NonlinearMPC`)
harness : data generation, closed-loop runs and Monte Carlo comparison
"""
from .dynamics import ControlInput, Obstacle, RobotState, rk4_step, simulate_rollout
from .edmd import KoopmanModel, KoopmanRegressor, SnapshotAccumulator, load_model, save_model, solve_model
from .lifting import DEFAULT_DICTIONARY, DictionarySpec, PolynomialLifter, lift
from .nmpc import NmpcSettings, NonlinearMPC
from .planner import KoopmanMPC, MpcConfig
from .qp import QpSettings, QuadraticProgram, solve_qp

__version__ = "0.1.0"

__all__ = [
    "ControlInput", "Obstacle", "RobotState", "rk4_step", "simulate_rollout",
    "KoopmanModel", "KoopmanRegressor", "SnapshotAccumulator", "load_model", "save_model",
    "solve_model", "DEFAULT_DICTIONARY", "DictionarySpec", "PolynomialLifter", "lift",
    "NmpcSettings", "NonlinearMPC", "KoopmanMPC", "MpcConfig", "QpSettings",
    "QuadraticProgram", "solve_qp",
]
