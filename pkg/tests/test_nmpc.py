import math

import numpy as np
import pytest

from koopman_mpc.dynamics import Obstacle, simulate_rollout
from koopman_mpc.harness import ScenarioConfig, run_closed_loop
from koopman_mpc.nmpc import NmpcSettings, NonlinearMPC, rollout_sensitivities
from koopman_mpc.planner import KoopmanMPC, MpcConfig
from koopman_mpc.qp import QpSettings

DEMO_OBSTACLE = Obstacle(9, 4, 2.5, 2.5, eps=0.5, v_obs=1.5, theta_obs=8 * math.pi / 9)


def test_settings_validation():
    NmpcSettings(fd_step=1e-8)
    NmpcSettings(fd_step=1e-4)
    for bad in ({"fd_step": 1e-3}, {"fd_step": 1e-9}, {"tol_step": 0.0}, {"tol_kkt": -1.0},
                {"max_iter": 0}, {"damping": -1.0}):
        with pytest.raises(ValueError):
            NmpcSettings(**bad)


def test_sensitivity_rollout_is_the_true_rollout(rng):
    s0 = np.array([0.5, -0.2, 1.0, 0.3])
    states, jac = rollout_sensitivities(s0, np.zeros(20), 0.1, 10)
    np.testing.assert_array_equal(states, simulate_rollout(s0, np.zeros((10, 2))))
    assert jac.shape == (10, 4, 20)
    U = rng.uniform(-1, 1, 20)
    states, _ = rollout_sensitivities(s0, U, 0.1, 10)
    np.testing.assert_array_equal(states, simulate_rollout(s0, U.reshape(10, 2)))


def test_central_difference_richardson_ratio(rng):
    s0 = np.array([0.0, 0.0, 1.5, 0.2])
    U = rng.uniform(-1, 1, 16)
    d = [rollout_sensitivities(s0, U, 0.1, 8, h)[1] for h in (0.2, 0.1, 0.05)]
    e1 = np.abs(d[0] - d[1])
    e2 = np.abs(d[1] - d[2])
    mask = e2 > 1e-9
    ratio = np.median(e1[mask] / e2[mask])
    assert 3.5 < ratio < 4.5


def test_speed_sensitivity_is_ts(rng):
    ts = 0.1
    _, jac = rollout_sensitivities(np.array([0, 0, 1.0, 0.4]), rng.uniform(-1, 1, 20), ts, 10)
    for k in range(10):
        a_cols = jac[k, 2, 0::2]
        np.testing.assert_allclose(a_cols[:k + 1], ts, atol=1e-9)
        assert np.all(a_cols[k + 1:] == 0.0)
        assert np.all(jac[k, 2, 1::2] == 0.0)


def test_idle_at_target_converges_fast():
    s = np.array([2.0, 1.0, 0.0, 0.7])
    ctrl = NonlinearMPC(MpcConfig(target=s))
    u0, diag = ctrl.step(s, 0.0, [])
    assert diag.status == "optimal" and diag.iterations <= 2
    np.testing.assert_allclose(u0, 0.0, atol=1e-6)


def test_converged_solution_satisfies_kkt():
    from koopman_mpc.dynamics import rk4_step
    ctrl = NonlinearMPC()
    lo, hi = np.tile(ctrl.config.u_min, 40), np.tile(ctrl.config.u_max, 40)
    s = np.zeros(4)
    statuses = []
    for k in range(30):
        U, info = ctrl.solve(s, k * 0.1, [DEMO_OBSTACLE], ctrl._warm)
        statuses.append(info["status"])
        if info["status"] == "optimal":
            for r, tol in zip(info["kkt"], info["kkt_tol"]):
                assert r <= 10 * tol
        assert np.all(U >= lo) and np.all(U <= hi)
        Us = U.reshape(40, 2)
        ctrl._warm = np.vstack([Us[1:], Us[-1:]]).ravel()
        s = rk4_step(s, U[:2])
    assert statuses.count("optimal") >= 20
    assert "failed" not in statuses


@pytest.mark.parametrize("speed", [1.0, 2.0, 3.0])
def test_agrees_with_bkmpc_without_obstacles(bilinear_model, speed):
    # heading at the target: both approximate the same smooth optimum
    s = np.array([0.0, 0.0, speed, math.atan2(8.0, 10.0)])
    ub, _ = KoopmanMPC(bilinear_model).step(s, 0.0, [])
    un, _ = NonlinearMPC().step(s, 0.0, [])
    np.testing.assert_allclose(un, ub, atol=0.05)


def test_braking_on_failure():
    ctrl = NonlinearMPC(qp_settings=QpSettings(max_iter=1, polish=False))
    u0, diag = ctrl.step(np.array([0, 0, 1.0, 0]), 0.0, [DEMO_OBSTACLE])
    assert diag.error and diag.status == "failed"
    np.testing.assert_allclose(u0, [-2.0, 0.0])


def test_warm_start_shifts_previous_plan():
    ctrl = NonlinearMPC(MpcConfig(N_h=10))
    s = np.array([0, 0, 1.0, 0.5])
    U, _ = ctrl.solve(s, 0.0, [])
    ctrl.step(s, 0.0, [])
    Us = ctrl._warm.reshape(10, 2)
    np.testing.assert_array_equal(Us[-1], Us[-2])


def test_closed_loop_default_scenario_is_safe():
    sc = ScenarioConfig(controller="nmpc", duration=6.0)
    log = run_closed_loop(sc)
    m = log.metrics()
    assert log.failures == 0
    assert m.min_ellipse >= 1.0
    assert np.all(log.max_slack <= 1e-3)
