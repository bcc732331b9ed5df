import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_mpc import planner
from koopman_mpc.dynamics import Obstacle, ellipse_value
from koopman_mpc.edmd import KoopmanModel
from koopman_mpc.lifting import lift
from koopman_mpc.planner import (
    KoopmanMPC, MpcConfig, build_cost, build_input_bounds, build_obstacle_constraints,
    build_prediction, horizon_centers, linearize_input_matrix, obstacle_rows, output_selector,
    shift_frame,
)
from koopman_mpc.qp import OPTIMAL, QpSettings, _certified

DEMO_OBSTACLE = Obstacle(9, 4, 2.5, 2.5, eps=0.5, v_obs=1.5, theta_obs=8 * math.pi / 9)


def _small_model(rng, n=65, m=2, scale=0.05):
    A = np.eye(n) + scale * rng.normal(size=(n, n)) / np.sqrt(n)
    return KoopmanModel("bilinear", A, rng.normal(size=(n, m)),
                        [scale * rng.normal(size=(n, n)) for _ in range(m)])


def _rollout(A, Bt, z0, U):
    z, out = z0, []
    for u in U:
        z = A @ z + Bt @ u
        out.append(z)
    return np.array(out)


def test_config_validation_and_roundtrip():
    cfg = MpcConfig()
    assert cfg.N_h == 40 and cfg.ts == 0.1 and cfg.slack_weight == 1e5
    np.testing.assert_array_equal(cfg.u_max, [2, math.pi])
    back = MpcConfig.from_dict(cfg.to_dict())
    np.testing.assert_array_equal(back.Q, cfg.Q)
    np.testing.assert_array_equal(back.target, [10, 8, 0, 0])
    for bad in ({"N_h": 0}, {"R": np.zeros((2, 2))}, {"Q": -np.eye(4)},
                {"u_min": [3, 0], "u_max": [2, 1]}, {"slack_weight": 0}):
        with pytest.raises(ValueError):
            MpcConfig(**bad)
    with pytest.raises(ValueError):
        MpcConfig.from_dict({"horizon": 3})


def test_braking_input():
    cfg = MpcConfig()
    np.testing.assert_allclose(cfg.braking_input(1.0), [-2.0, 0.0])
    np.testing.assert_allclose(cfg.braking_input(0.05), [-0.5, 0.0])
    np.testing.assert_allclose(cfg.braking_input(-0.5), [2.0, 0.0])


def test_shift_frame_examples():
    c = np.array([[[9.0, 4.0], [8.5, 4.2]]])
    s, tg, cs, off = shift_frame([0, 0, 1, 0.3], [10, 8, 0, 0], c)
    np.testing.assert_array_equal(s, [0, 0, 1, 0.3])
    np.testing.assert_array_equal(cs, c)
    s, tg, cs, off = shift_frame([3, 2, 1, 0.3], [10, 8, 0.5, 1.0], c)
    np.testing.assert_array_equal(tg, [7, 6, 0.5, 1.0])
    np.testing.assert_array_equal(s, [0, 0, 1, 0.3])
    np.testing.assert_array_equal(off, [3, 2])
    before = ellipse_value(3, 2, c[0, :, 0], c[0, :, 1], 2.5, 2.5)
    after = ellipse_value(0, 0, cs[0, :, 0], cs[0, :, 1], 2.5, 2.5)
    np.testing.assert_allclose(after, before, rtol=1e-14)


def test_horizon_centers_start_one_step_ahead():
    c = horizon_centers([DEMO_OBSTACLE], 1.0, 3, 0.1)
    assert c.shape == (1, 3, 2)
    np.testing.assert_allclose(c[0, 0], DEMO_OBSTACLE.center_at(1.1))
    assert horizon_centers([], 0.0, 5, 0.1).shape == (0, 5, 2)


def test_linearize_input_matrix(rng):
    m = _small_model(rng)
    zero_h = KoopmanModel("bilinear", m.A, m.B, [np.zeros_like(m.A)] * 2)
    z0 = rng.normal(size=65)
    np.testing.assert_array_equal(linearize_input_matrix(zero_h, z0), m.B)
    np.testing.assert_array_equal(linearize_input_matrix(m, np.zeros(65)), m.B)
    u = np.array([0.7, -1.3])
    Bt = linearize_input_matrix(m, z0)
    one = m.A @ z0 + Bt @ u
    ref = m.step(z0, u)
    assert np.abs(one - ref).max() <= 1e-12 * np.abs(ref).max()
    with pytest.raises(ValueError):
        linearize_input_matrix(KoopmanModel("linear", m.A, m.B), z0)


def test_build_prediction_structure(rng):
    A = rng.normal(size=(3, 3)) * 0.5
    Bt = rng.normal(size=(3, 2))
    phi, gamma = build_prediction(A, Bt, 1)
    np.testing.assert_array_equal(phi, A)
    np.testing.assert_array_equal(gamma, Bt)
    phi, gamma = build_prediction(A, Bt, 2)
    np.testing.assert_allclose(gamma, np.block([[Bt, np.zeros((3, 2))], [A @ Bt, Bt]]))
    np.testing.assert_allclose(phi, np.vstack([A, A @ A]))
    # impulse response of input column j
    N_h = 5
    phi, gamma = build_prediction(A, Bt, N_h)
    for j in range(N_h * 2):
        U = np.zeros((N_h, 2))
        U.flat[j] = 1.0
        np.testing.assert_allclose(gamma[:, j], _rollout(A, Bt, np.zeros(3), U).ravel(),
                                   atol=1e-13)


def test_condensation_matches_rollout(rng, bilinear_model):
    mpc = KoopmanMPC(bilinear_model)
    for trial in range(5):
        s = np.array([0.0, 0.0, rng.uniform(0, 4), rng.uniform(-3, 3)])
        z0 = lift(s)
        U = rng.uniform(-2, 2, (40, 2))
        free, G6 = mpc.condensed(z0)
        cond = free + (G6 @ U.ravel()).reshape(40, 6)
        Bt = bilinear_model.input_matrix_at(z0)
        roll = _rollout(bilinear_model.A, Bt, z0, U)[:, :6]
        assert np.abs(cond - roll).max() <= 1e-10 * max(1.0, np.abs(roll).max())
        # the general builder agrees with the specialized one
        phi, gamma = build_prediction(bilinear_model.A, Bt, 40)
        C6 = output_selector(6, 40, 65)
        np.testing.assert_allclose(C6 @ gamma, G6, rtol=1e-9, atol=1e-12)


def test_build_cost_properties(rng):
    A = np.eye(8) + 0.05 * rng.normal(size=(8, 8))
    Bt = rng.normal(size=(8, 2))
    z0 = rng.normal(size=8)
    N_h = 6
    phi, gamma = build_prediction(A, Bt, N_h)
    target = np.array([1.0, -2.0, 0.5, 0.1])
    Q = np.diag([1.0, 1.0, 0.0, 0.0])
    R = np.diag([4.0, 10.0])
    Hq, fq = build_cost(phi, gamma, z0, target, np.zeros((4, 4)), R)
    np.testing.assert_allclose(Hq, 2 * np.kron(np.eye(N_h), R))
    np.testing.assert_array_equal(fq, 0)
    Hq, fq = build_cost(phi, gamma, z0, target, Q, R)
    C = output_selector(4, N_h, 8)

    def J(U):
        y = (C @ (phi @ z0 + gamma @ U)).reshape(N_h, 4) - target
        return float(np.einsum("ki,ij,kj->", y, Q, y) + np.einsum("ki,ij,kj->", U.reshape(N_h, 2), R,
                                                                   U.reshape(N_h, 2)))

    h = 1e-5
    grad = np.array([(J(h * e) - J(-h * e)) / (2 * h) for e in np.eye(N_h * 2)])
    np.testing.assert_allclose(grad, fq, rtol=1e-6, atol=1e-6 * np.abs(fq).max())
    const = J(np.zeros(N_h * 2))
    for _ in range(5):
        U = rng.normal(size=N_h * 2)
        assert J(U) == pytest.approx(0.5 * U @ Hq @ U + fq @ U + const, rel=1e-10)
    assert np.linalg.eigvalsh(Hq)[0] >= 2 * 4.0 - 1e-9


def test_input_bounds():
    Gu, du = build_input_bounds(1, [-2, -math.pi], [2, math.pi])
    assert Gu.shape == (4, 2)
    np.testing.assert_allclose(du, [2, math.pi, 2, math.pi])
    Gu, du = build_input_bounds(3, [-2, -math.pi], [2, math.pi])
    vertex = np.tile([2, -math.pi], 3)
    act = Gu @ vertex - du
    assert np.count_nonzero(np.isclose(act, 0)) == 6 and np.all(act <= 1e-15)
    assert np.all(Gu @ np.tile([0.5, 0.1], 3) < du)


def test_obstacle_row_example():
    S, beta = obstacle_rows([[9.0, 4.0]], 2.5, 2.5, 0.5)
    np.testing.assert_allclose(S[0], [2.88, 1.28, 0, 0, -0.16, -0.16], atol=1e-15)
    assert beta[0] == pytest.approx(14.02, abs=1e-12)


def test_margin_boundary_state_is_on_the_row():
    rx, ry, eps = 2.5, 1.5, 0.5
    xc, yc = 9.0, 4.0
    for ang in np.linspace(0, 2 * math.pi, 7):
        X = xc + rx * math.sqrt(1 + eps) * math.cos(ang)
        Y = yc + ry * math.sqrt(1 + eps) * math.sin(ang)
        S, beta = obstacle_rows([[xc, yc]], rx, ry, eps)
        y6 = lift(np.array([X, Y, 0.3, 0.2]))[:6]
        assert S[0] @ y6 == pytest.approx(beta[0], abs=1e-11)


def test_constraint_rows_match_prediction(rng, bilinear_model):
    z0 = lift(np.array([0.0, 0.0, 1.0, 0.5]))
    Bt = bilinear_model.input_matrix_at(z0)
    N_h = 10
    phi, gamma = build_prediction(bilinear_model.A, Bt, N_h)
    centers = np.column_stack([np.linspace(2, 1, N_h), np.linspace(1, 0.5, N_h)])
    Gobs, dobs = build_obstacle_constraints(centers, 1.0, 0.8, 0.2, phi, gamma, z0)
    S, beta = obstacle_rows(centers, 1.0, 0.8, 0.2)
    for _ in range(20):
        U = rng.uniform(-2, 2, N_h * 2)
        y6 = _rollout(bilinear_model.A, Bt, z0, U.reshape(N_h, 2))[:, :6]
        lhs = Gobs @ U - dobs
        rhs = np.einsum("kj,kj->k", S, y6) - beta
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)
        assert np.array_equal(lhs <= 0, rhs <= 0) or np.abs(rhs).min() < 1e-9
    far = np.full((N_h, 2), 1e4)
    Gobs, dobs = build_obstacle_constraints(far, 1.0, 1.0, 0.5, phi, gamma, z0)
    assert np.all(Gobs @ np.tile([2.0, math.pi], N_h) < dobs)
    assert np.all(Gobs @ np.tile([-2.0, -math.pi], N_h) < dobs)


def test_step_at_target_is_idle(bilinear_model):
    # with a stationary free response the target is already optimal
    s = np.array([3.0, 2.0, 0.0, 0.4])
    still = KoopmanModel("bilinear", np.eye(65), bilinear_model.B, bilinear_model.H)
    u0, diag = KoopmanMPC(still, MpcConfig(target=s)).step(s, 0.0, [])
    assert diag.status == OPTIMAL
    np.testing.assert_allclose(u0, 0.0, atol=1e-6)
    # the identified model drifts slightly at rest, so only a small correction
    u0, diag = KoopmanMPC(bilinear_model, MpcConfig(target=s)).step(s, 0.0, [])
    assert diag.status == OPTIMAL
    assert np.abs(u0).max() < 1e-2


def test_first_step_default_scenario(bilinear_model):
    mpc = KoopmanMPC(bilinear_model)
    s = np.zeros(4)
    u0, diag = mpc.step(s, 0.0, [DEMO_OBSTACLE])
    cfg = mpc.config
    assert np.all(u0 >= cfg.u_min) and np.all(u0 <= cfg.u_max)
    assert diag.status == OPTIMAL and diag.solve_time_s > 0
    assert diag.predicted_xy.shape == (40, 2)
    assert diag.max_slack <= 1e-6
    # first predicted state is the exact bilinear step at (z0, u0)
    z1 = bilinear_model.step(lift(s), u0)
    np.testing.assert_allclose(diag.predicted_xy[0], z1[:2], atol=1e-9)


def test_model_ts_must_match(bilinear_model):
    with pytest.raises(ValueError):
        KoopmanMPC(bilinear_model, MpcConfig(ts=0.05))
    with pytest.raises(ValueError):
        KoopmanMPC(KoopmanModel("linear", np.eye(65), np.zeros((65, 2))))


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0, 4), st.floats(-4, 4))
@settings(max_examples=15, deadline=None)
def test_u0_within_bounds(bilinear_model, X, Y, v, th):
    mpc = KoopmanMPC(bilinear_model, MpcConfig(N_h=15))
    u0, _ = mpc.step(np.array([X, Y, v, th]), 0.3, [DEMO_OBSTACLE])
    assert np.all(u0 >= mpc.config.u_min) and np.all(u0 <= mpc.config.u_max)


def test_translation_invariance_single_step_bitwise(bilinear_model):
    # integer offsets and a static obstacle keep every shifted quantity exact
    base = np.array([0.0, 0.0, 1.0, 0.3])
    obs = Obstacle(5.0, 3.0, 1.5, 1.5, eps=0.5)
    u_a, _ = KoopmanMPC(bilinear_model, MpcConfig(target=[10, 8, 0, 0])).step(base, 0.0, [obs])
    moved = base + np.array([7.0, -3.0, 0, 0])
    obs_m = Obstacle(12.0, 0.0, 1.5, 1.5, eps=0.5)
    u_b, _ = KoopmanMPC(bilinear_model, MpcConfig(target=[17, 5, 0, 0])).step(moved, 0.0, [obs_m])
    np.testing.assert_array_equal(u_a, u_b)


def test_translation_invariance_closed_loop(bilinear_model):
    from koopman_mpc.dynamics import rk4_step
    off = np.array([3.3, -1.7])
    runs = []
    for o in (np.zeros(2), off):
        obs = Obstacle(9 + o[0], 4 + o[1], 2.5, 2.5, 0.5, 1.5, 8 * math.pi / 9)
        mpc = KoopmanMPC(bilinear_model, MpcConfig(target=[10 + o[0], 8 + o[1], 0, 0]))
        s = np.array([o[0], o[1], 0.0, 0.0])
        us = []
        for k in range(25):
            u, _ = mpc.step(s, k * 0.1, [obs])
            us.append(u)
            s = rk4_step(s, u)
        runs.append(np.array(us))
    np.testing.assert_allclose(runs[1], runs[0], atol=1e-6)


def test_every_mpc_qp_is_certified(bilinear_model, monkeypatch):
    from koopman_mpc.dynamics import rk4_step
    seen = []
    real = planner.solve_qp

    def spy(p, settings=None, **kw):
        sol = real(p, settings, **kw)
        seen.append((p, sol))
        return sol

    monkeypatch.setattr(planner, "solve_qp", spy)
    mpc = KoopmanMPC(bilinear_model)
    s = np.zeros(4)
    for k in range(40):
        u, d = mpc.step(s, k * 0.1, [DEMO_OBSTACLE])
        s = rk4_step(s, u)
    assert len(seen) == 40
    for p, sol in seen:
        assert sol.status == OPTIMAL
        ok, _ = _certified(p, sol.x, sol.y, QpSettings())
        assert ok


def test_soft_constraints_keep_qp_feasible(bilinear_model):
    # start inside the keep-out region: the hard rows are infeasible
    obs = Obstacle(0.5, 0.0, 2.0, 2.0, eps=0.5)
    mpc = KoopmanMPC(bilinear_model, MpcConfig(N_h=10))
    u0, diag = mpc.step(np.array([0.0, 0.0, 0.5, 0.0]), 0.0, [obs])
    assert diag.status == OPTIMAL and not diag.error
    assert diag.max_slack > 1e-3


def test_braking_when_solver_fails(bilinear_model):
    mpc = KoopmanMPC(bilinear_model, qp_settings=QpSettings(max_iter=1, polish=False))
    u0, diag = mpc.step(np.array([0.0, 0.0, 1.0, 0.0]), 0.0, [DEMO_OBSTACLE])
    assert diag.error and diag.status != OPTIMAL
    np.testing.assert_allclose(u0, [-2.0, 0.0])
