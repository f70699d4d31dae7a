import itertools

import numpy as np
import pytest

from flowmpc._csv import SchemaError
from flowmpc.flowfield import DoubleGyre, Uniform
from flowmpc.mpc import (
    ControlSequence, MpcConfig, SolverConfig, cost, cost_gradient, read_trajectory_csv, rollout,
    run_mpc, solve_horizon, write_trajectory_csv,
)

NULL = DoubleGyre(A=0.0)
GOAL = (0.5, 0.5)


def test_config_validation():
    assert MpcConfig().N == 40
    for kw in (dict(T_H=0.25, dt=0.1), dict(dt=0.0), dict(R=-1.0), dict(u_max=-0.1),
               dict(Q=0.0, R=0.0)):
        with pytest.raises(ValueError):
            MpcConfig(**kw)


def test_rollout_examples():
    cfg = MpcConfig(T_H=1.0, dt=0.5)
    X = rollout(Uniform(0.0, 0.0), (0.0, 0.0), np.tile([0.1, 0.0], (2, 1)), cfg)
    np.testing.assert_allclose(X, [[0, 0], [0.05, 0], [0.1, 0]], atol=1e-15)

    X = rollout(Uniform(1.0, 0.0), (0.0, 0.0), np.zeros((2, 2)), cfg)
    np.testing.assert_allclose(X[-1], [1.0, 0.0], atol=1e-14)

    X = rollout(NULL, (0.3, 0.2), np.tile([0.1, -0.1], (2, 1)), cfg)
    np.testing.assert_allclose(X[-1], [0.4, 0.1], atol=1e-14)


def test_cost_examples():
    cfg = MpcConfig(T_H=1.0, dt=1.0, Q=1.0, R=0.0)
    assert cost(NULL, GOAL, np.zeros((1, 2)), cfg) == (0.0, 0.0, 0.0)
    J, je, ju = cost(NULL, (1.0, 0.5), np.zeros((1, 2)), cfg)
    assert J == pytest.approx(0.25) and je == pytest.approx(0.25) and ju == 0.0

    cfg = MpcConfig(T_H=1.0, dt=1.0, Q=0.0, R=1.0)
    J, je, ju = cost(NULL, GOAL, [[0.1, 0.0]], cfg)
    assert J == pytest.approx(0.01, abs=1e-15) and ju == pytest.approx(0.01, abs=1e-15)


def test_cost_sums_post_step_states():
    # the start state is fixed and does not enter J_e
    cfg = MpcConfig(T_H=0.2, dt=0.1, Q=1.0, R=0.0)
    _, je, _ = cost(NULL, (1.5, 0.5), np.zeros((2, 2)), cfg)
    assert je == pytest.approx(2 * 1.0 * 0.1)


def test_terminal_weight():
    cfg = MpcConfig(T_H=0.2, dt=0.1, Q=1.0, R=0.0, Q2=3.0)
    J, je, _ = cost(NULL, (1.5, 0.5), np.zeros((2, 2)), cfg)
    assert J == pytest.approx(je + 3.0)


def test_gradient_control_only():
    cfg = MpcConfig(T_H=0.4, dt=0.1, Q=0.0, R=2.0)
    u = np.random.default_rng(0).uniform(-0.1, 0.1, (4, 2))
    G = cost_gradient(DoubleGyre(), (0.7, 0.4), u, cfg)
    np.testing.assert_allclose(G, 2 * 2.0 * u * 0.1, rtol=0, atol=1e-17)


def test_gradient_null_field_closed_form():
    # x_k = x0 + dt * sum_{m<k} u_m, so dJe/du_m = 2 Q dt^2 sum_{k>m} e_k
    cfg = MpcConfig(T_H=0.3, dt=0.1, Q=1.0, R=0.5)
    u = np.array([[0.1, 0.0], [-0.05, 0.02], [0.03, 0.1]])
    x0 = np.array([0.9, 0.2])
    G = cost_gradient(NULL, x0, u, cfg)
    X = x0 + 0.1 * np.cumsum(u, axis=0)
    e = X - GOAL
    tail = np.cumsum(e[::-1], axis=0)[::-1]
    expected = 2 * 0.1 ** 2 * tail + 2 * 0.5 * u * 0.1
    np.testing.assert_allclose(G, expected, atol=1e-15)


def test_gradient_matches_finite_differences():
    cfg = MpcConfig(T_H=1.0, dt=0.1, Q2=0.5)
    f = DoubleGyre()
    u = np.random.default_rng(3).uniform(-0.1, 0.1, (10, 2))
    G = cost_gradient(f, (1.4, 0.3), u, cfg, t0=2.3)
    h = 1e-6
    fd = np.empty_like(u)
    for k in range(10):
        for c in range(2):
            up, um = u.copy(), u.copy()
            up[k, c] += h
            um[k, c] -= h
            fd[k, c] = (cost(f, (1.4, 0.3), up, cfg, t0=2.3)[0]
                        - cost(f, (1.4, 0.3), um, cfg, t0=2.3)[0]) / (2 * h)
    np.testing.assert_allclose(G, fd, rtol=1e-5, atol=1e-9)


def test_solve_at_goal_is_zero():
    sol = solve_horizon(NULL, GOAL, 0.0, MpcConfig(T_H=1.0))
    assert sol.converged
    np.testing.assert_array_equal(sol.controls.u, 0.0)
    assert sol.J == 0.0


def test_solve_drives_toward_goal_at_bound():
    sol = solve_horizon(NULL, (1.5, 0.5), 0.0, MpcConfig(T_H=1.0))
    assert sol.converged
    u = sol.controls.u
    np.testing.assert_allclose(u[:8, 0], -0.1, atol=1e-9)
    np.testing.assert_allclose(u[:, 1], 0.0, atol=1e-9)
    # the last control only sees the final error: 2 R u dt + 2 Q dt^2 e_N = 0
    e_N = sol.predicted[-1, 0] - 0.5
    assert u[-1, 0] == pytest.approx(-0.1 * e_N / 2.0, abs=1e-7)


def test_solve_beats_exhaustive_grid():
    cfg = MpcConfig(T_H=2.0, dt=1.0, Q=1.0, R=2.0)
    x0 = (0.65, 0.42)
    levels = (-0.1, 0.0, 0.1)
    best = min(cost(NULL, x0, np.reshape(c, (2, 2)), cfg)[0]
               for c in itertools.product(levels, repeat=4))
    sol = solve_horizon(NULL, x0, 0.0, cfg)
    assert sol.converged
    assert sol.J <= best + 1e-12


def test_history_is_monotone_and_feasible():
    cfg = MpcConfig(T_H=4.0)
    sol = solve_horizon(DoubleGyre(), (2.0, 1.0), 0.0, cfg)
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 1e-15)
    assert np.all(np.abs(sol.controls.u) <= cfg.u_max)
    assert sol.converged
    assert sol.predicted.shape == (41, 2)


def test_warm_and_cold_agree_on_convex_problem():
    cfg = MpcConfig(T_H=2.0)
    x0 = (1.0, 0.8)
    cold = solve_horizon(NULL, x0, 0.0, cfg)
    guess = np.random.default_rng(1).uniform(-0.1, 0.1, (cfg.N, 2))
    warm = solve_horizon(NULL, x0, 0.0, cfg, warm=ControlSequence(guess))
    assert abs(cold.J - warm.J) <= 1e-8


def test_warm_start_length_checked():
    with pytest.raises(ValueError):
        solve_horizon(NULL, GOAL, 0.0, MpcConfig(T_H=1.0), warm=np.zeros((3, 2)))


def test_passive_limit():
    sol = solve_horizon(DoubleGyre(), (1.5, 0.2), 0.0, MpcConfig(R=1e6))
    assert np.max(np.abs(sol.controls.u)) < 1e-3


def test_max_iter_reported_not_raised():
    cfg = MpcConfig(solver=SolverConfig(max_iter=2))
    sol = solve_horizon(DoubleGyre(), (2.0, 1.0), 0.0, cfg)
    assert not sol.converged
    assert sol.iterations == 2


def test_run_from_goal_in_still_water():
    traj = run_mpc(NULL, GOAL, 0.0, MpcConfig(T_H=1.0), 1.0)
    assert len(traj) == 11 and len(traj.controls) == 10
    np.testing.assert_array_equal(traj.states, np.tile(GOAL, (11, 1)))
    assert traj.integrated_energy() == 0.0
    np.testing.assert_allclose(traj.times, np.linspace(0, 1, 11), atol=1e-12)


def test_zero_control_budget_is_a_drifter():
    f = DoubleGyre()
    cfg = MpcConfig(T_H=1.0, u_max=0.0)
    traj = run_mpc(f, (1.2, 0.3), 0.0, cfg, 2.0)
    assert np.all(traj.controls == 0.0)
    passive = rollout(f, (1.2, 0.3), np.zeros((20, 2)), MpcConfig(T_H=2.0))
    np.testing.assert_allclose(traj.states, passive, atol=1e-12)


def test_trajectory_csv_round_trip(tmp_path):
    traj = run_mpc(DoubleGyre(), (1.6, 0.8), 0.0, MpcConfig(T_H=1.0), 1.0)
    p = tmp_path / "trajectory.csv"
    write_trajectory_csv(traj, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,x,y,ux,uy,inst_energy,J_pred,Je_pred,Ju_pred,converged"
    assert len(lines) == 12
    assert lines[-1].endswith(",,,,,,,")
    back = read_trajectory_csv(p)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.controls, traj.controls)
    np.testing.assert_array_equal(back.inst_energy, traj.inst_energy)
    np.testing.assert_array_equal(back.converged, traj.converged)


def test_trajectory_csv_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,x,y\n0,1,2\n0.1,1,2\n")
    with pytest.raises(SchemaError):
        read_trajectory_csv(p)
