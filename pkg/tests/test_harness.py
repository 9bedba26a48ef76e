import csv

import numpy as np
import pytest
from nets import random_nets

from adaptive_ampc.config import CartpoleParams
from adaptive_ampc.dataset import Dataset
from adaptive_ampc.harness import (ProbeConfig, SimConfig, SuccessCriterion, approximation_errors, in_region, judge,
                                   simulate, simulate_many, stability_estimates, sweep, sweep_grid, sweep_states,
                                   theta_radius, write_sweep_csv)
from adaptive_ampc.policy import AmpcPolicy

RANGE = np.array([0.04, 1.0, 9.0, 1.0, 0.06])


@pytest.fixture(scope="module")
def policy(theta_nom):
    return AmpcPolicy(*random_nets(0), theta_nom=theta_nom)


def constant_policy(theta_nom, value):
    pi, grad = random_nets(0)
    for net in (pi, grad):
        net.set_flat(np.zeros(net.flat().size))
    pi.out_mean = np.array([value])
    grad.out_mean = np.zeros(5)
    return AmpcPolicy(pi, grad, theta_nom)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt_control=0.0505)
    with pytest.raises(ValueError):
        SimConfig(T=0)
    assert SimConfig().n_steps == 200 and SimConfig().n_sub == 50
    with pytest.raises(ValueError):
        SuccessCriterion(alpha_tol=0)


def test_judge():
    crit = SuccessCriterion()
    K = 200
    X = np.zeros((4, K + 1, 4))
    X[1, -5, 2] = 0.2  # leaves the upright band inside the settle window
    X[2, :150, 2] = 3.0  # swinging before the window only
    X[3, -1, 3] = 0.6
    ok, upright, violated = judge(X, np.array([0.1, 0.1, 0.1, 0.1]), 10.0, 0.05, crit)
    assert ok.tolist() == [True, False, True, False]
    ok, _, violated = judge(X[:1], np.array([0.41]), 10.0, 0.05, crit)
    assert not ok[0] and violated[0]


def test_upright_rest_holds_with_zero_input(theta_nom, consts):
    p = constant_policy(theta_nom, 0.0)
    ep = simulate("adaptive", SimConfig(x0=(0, 0, 0, 0), T=2.0), consts, p)
    assert ep.report.success and ep.report.max_abs_y == 0.0
    assert ep.X.shape == (41, 4) and ep.U.shape == (40,)


def test_constraint_violation_fails(theta_nom, consts):
    ep = simulate("adaptive", SimConfig(x0=(0, 0, 0, 0), T=2.0), consts, constant_policy(theta_nom, 9.0))
    assert not ep.report.success and ep.report.violated and ep.report.max_abs_y > 0.4


def test_non_finite_reports_step(theta_nom, consts):
    ep = simulate("nominal", SimConfig(x0=(0, 0, 0, 0), T=1.0), consts, constant_policy(theta_nom, np.nan))
    assert not ep.report.success and ep.report.failure_step == 0
    assert ep.report.reason == "non-finite state"


def test_adaptive_equals_nominal_at_theta_nom(policy, theta_nom, consts):
    cfg = SimConfig(x0=(0.1, 0.0, 2.5, 0.0), T=3.0, theta_true=theta_nom, theta_ctrl=theta_nom)
    a = simulate("adaptive", cfg, consts, policy)
    b = simulate("nominal", cfg, consts, policy)
    assert a.X.tobytes() == b.X.tobytes() and a.U.tobytes() == b.U.tobytes()


def test_plant_and_controller_parameters_are_separate(policy, theta_nom, consts):
    th = CartpoleParams.from_array(theta_nom.as_array() + [0, 0.5, 0, 0, 0])
    a = simulate("adaptive", SimConfig(x0=(0.1, 0, 2.5, 0), T=1.0, theta_true=th, theta_ctrl=th), consts, policy)
    b = simulate("nominal", SimConfig(x0=(0.1, 0, 2.5, 0), T=1.0, theta_true=th, theta_ctrl=th), consts, policy)
    assert not np.array_equal(a.U, b.U)


def test_batch_matches_single(policy, theta_nom, consts):
    X0 = sweep_states(4, 0, ((-0.3, 0.3), (-1, 1), (-np.pi, np.pi), (-3, 3)))
    cfg = SimConfig(T=1.0)
    TH = np.tile(theta_nom.as_array(), (4, 1))
    _, X, U, _ = simulate_many(policy, "adaptive", X0, TH, TH, consts, cfg)
    for i in range(4):
        ep = simulate("adaptive", SimConfig(x0=tuple(X0[i]), T=1.0), consts, policy)
        # batched and single-row matrix products round differently
        np.testing.assert_allclose(ep.X, X[i], rtol=0, atol=1e-9)


def test_episode_csv(policy, consts, tmp_path):
    ep = simulate("adaptive", SimConfig(T=0.2), consts, policy)
    ep.to_csv(tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["t", "y", "y_dot", "alpha", "alpha_dot", "u"] and len(rows) == 6


def test_sweep_shape_and_zero_row(policy, consts, tmp_path):
    grid = sweep_grid(0, 5, RANGE)
    np.testing.assert_allclose(grid, [-0.04, -0.02, 0, 0.02, 0.04])
    rows = sweep(policy, 0, grid, 3, seed=0, consts=consts, theta_range=RANGE, cfg=SimConfig(T=1.0))
    assert len(rows) == 5 and rows[2].delta == 0
    assert rows[2].adaptive_frac == rows[2].nominal_frac
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = list(csv.reader(open(tmp_path / "s.csv")))
    assert lines[0] == ["param", "delta", "adaptive_frac", "nominal_frac", "n"] and len(lines) == 6


def test_sweep_bounds(policy, consts):
    with pytest.raises(ValueError):
        sweep(policy, 1, [1.5], 1, 0, consts, RANGE)


def test_theta_radius_formula():
    np.testing.assert_allclose(theta_radius(0.5, 0.0, 2.0, RANGE), 0.25 * RANGE)
    radii = [theta_radius(0.5, e, 2.0, RANGE)[0] for e in (0.0, 0.1, 1.0, 5.0)]
    assert all(a > b for a, b in zip(radii, radii[1:]))
    assert np.all(theta_radius(-0.1, 0.0, 1.0, RANGE) == 0)


def test_approximation_errors_dual_norm():
    X = np.zeros((2, 4))
    sens = np.zeros((2, 5))
    grad = np.array([[1.0, 0, 0, 0, 0], [0, 0, 0, 0, -0.5]])
    e_pi, e_grad = approximation_errors(lambda X: np.array([0.1, -0.3]), lambda X: grad, X, np.zeros(2), sens, RANGE)
    assert e_pi == pytest.approx(0.3)
    assert e_grad == pytest.approx(max(1.0 * 0.04, 0.5 * 0.06))


def test_in_region():
    region = ProbeConfig().region
    X = np.array([[0, 0, 0, 0], [0, 0, 2 * np.pi + 0.1, 0], [0.3, 0, 0, 0]])
    assert in_region(X, region).tolist() == [True, True, False]


def test_perfect_nets(config):
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.1, 0.1, (20, 4))
    u0, sens = rng.normal(size=20), rng.normal(size=(20, 5))
    val = Dataset(X, u0, sens, np.zeros(20, np.uint32))
    lookup = {x.tobytes(): i for i, x in enumerate(X)}
    idx = lambda Xq: [lookup[x.tobytes()] for x in np.asarray(Xq)]
    est = stability_estimates(lambda Xq: u0[idx(Xq)], lambda Xq: sens[idx(Xq)], val, config,
                              eta_hat=1.0, L_hat=4.0)
    assert est.e_pi_sup == 0 and est.e_grad_sup == 0 and est.premise_met
    np.testing.assert_allclose(est.theta_radius, est.epsilon / 4.0 * np.asarray(config.theta_range))


def test_premise_unmet_is_reported(config):
    X = np.zeros((3, 4))
    val = Dataset(X, np.zeros(3), np.zeros((3, 5)), np.zeros(3, np.uint32))
    est = stability_estimates(lambda Xq: np.full(len(Xq), 2.0), lambda Xq: np.zeros((len(Xq), 5)), val, config,
                              eta_hat=1.0, L_hat=1.0)
    assert not est.premise_met and est.epsilon == pytest.approx(-1.0) and np.all(est.theta_radius == 0)


def test_lipschitz_probe(config):
    from adaptive_ampc.harness import lipschitz_estimate
    L, used = lipschitz_estimate([[0.05, 0.1, 0.2, 0.3]], config, ProbeConfig(lipschitz_scales=(0.05, 0.1)))
    assert used > 0 and np.isfinite(L) and L >= 0
