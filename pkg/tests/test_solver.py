import numpy as np
import pytest
from toy import ToyNlp

from adaptive_ampc.ocp import build_nlp
from adaptive_ampc.solver import (MaxIterError, SolverConfig, kkt_parts, kkt_residual, multistart_solve,
                                  shifted_guess, solve, start_points)

CFG = SolverConfig()


@pytest.fixture(scope="module")
def make(config):
    def _make(x0, theta=None):
        return build_nlp(x0, theta or config.theta_nom, config.ocp, config.constants)
    return _make


@pytest.fixture(scope="module")
def hanging(make):
    nlp = make([0.0, 0.0, np.pi, 0.0])
    return nlp, multistart_solve(nlp, CFG, seed=0)


def check_contract(nlp, sol, cfg=CFG):
    assert sol.kkt_residual <= cfg.tol_kkt
    assert kkt_residual(nlp, sol) <= 10 * cfg.tol_kkt  # independent recomputation
    assert np.all(sol.mu_ineq >= 0)
    g = nlp.inequality(sol.z_star)
    assert np.max(np.abs(sol.mu_ineq * g)) <= cfg.tol_kkt
    assert list(sol.active_set) == sorted(np.flatnonzero(g >= -cfg.tol_act))
    assert sol.lambda_eq.shape == (nlp.n_eq,) and sol.mu_ineq.shape == (nlp.n_in,)


def test_equilibrium(make, config):
    nlp = make(np.zeros(4))
    sol = solve(nlp, np.zeros(nlp.nz), CFG)
    c = config.constants
    m = c.m_rod + config.theta_nom.m_add
    np.testing.assert_allclose(sol.z_star, 0, atol=1e-12)
    assert sol.cost == pytest.approx(26 * -m * c.g * c.l, rel=1e-12)
    assert sol.active_set == ()
    assert kkt_residual(nlp, sol) < 1e-12


def test_toy_bound_constraint():
    toy = ToyNlp(theta=[0.0], lo=1.0)  # min u^2 s.t. u >= 1
    sol = solve(toy, np.array([3.0, 0.0]), CFG)
    assert sol.z_star[0] == pytest.approx(1.0, abs=1e-10)
    assert sol.mu_ineq[0] == pytest.approx(2.0, abs=1e-8)
    assert sol.active_set == (0,) and sol.weakly_active == ()
    assert max(kkt_parts(toy.eval(sol.z_star), sol.lambda_eq, sol.mu_ineq).values()) <= 1e-8


def test_toy_weakly_active_detected():
    toy = ToyNlp(theta=[1.0], lo=1.0)  # unconstrained optimum sits on the bound
    sol = solve(toy, np.array([3.0, 0.0]), CFG)
    assert sol.z_star[0] == pytest.approx(1.0) and sol.weakly_active == (0,)


def test_hanging_rest(hanging):
    nlp, sol = hanging
    check_contract(nlp, sol)
    zero = nlp.initial_guess(np.zeros(nlp.n_u))
    assert sol.cost < nlp.eval(zero).V
    assert abs(sol.u0) > 0


def test_single_start_equals_plain_solve(make):
    nlp = make([0.1, 0.0, 2.5, 0.0])
    cfg1 = SolverConfig(n_multistart=1)
    a = multistart_solve(nlp, cfg1, seed=3)
    b = solve(nlp, nlp.initial_guess(np.zeros(nlp.n_u)), cfg1)
    np.testing.assert_array_equal(a.z_star, b.z_star)


def test_more_starts_never_worse(make, hanging):
    nlp, _ = hanging
    costs = {n: multistart_solve(nlp, SolverConfig(n_multistart=n), seed=0).cost for n in (1, 5)}
    assert costs[5] <= costs[1]


def test_start_points_prefix_property(make):
    nlp = make([0.0, 0.0, 2.0, 1.0])
    a = start_points(nlp, 5, seed=1)
    b = start_points(nlp, 15, seed=1)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert len(b) == 15


def test_mirror_candidate_not_better(make):
    x0 = np.array([0.0, 0.0, 0.3, 0.2])
    nlp, mirror = make(x0), make(-x0)
    sol = multistart_solve(nlp, CFG, seed=0)
    msol = multistart_solve(mirror, CFG, seed=0)
    cand = -np.asarray(msol.z_star)
    ev = nlp.eval(cand)
    assert np.max(np.abs(ev.c_eq)) < 1e-8 and np.max(ev.g_in) < 1e-8
    assert sol.cost <= ev.V + 1e-9


def test_mirror_symmetry_of_costs(make):
    x0 = np.array([0.1, -0.2, 2.0, 1.0])
    a = multistart_solve(make(x0), CFG, seed=0)
    b = multistart_solve(make(-x0), CFG, seed=0)
    assert abs(a.cost - b.cost) <= 1e-6


def test_kkt_residual_detects_perturbation(hanging):
    nlp, sol = hanging
    z = np.array(sol.z_star)
    z[nlp.x_index(10) + 2] += 1e-3
    bumped = type(sol)(**{**sol.__dict__, "z_star": z})
    assert kkt_residual(nlp, bumped) > CFG.tol_kkt


def test_determinism(make):
    nlp = make([0.2, 0.3, -2.2, 0.5])
    a = multistart_solve(nlp, CFG, seed=11)
    b = multistart_solve(nlp, CFG, seed=11)
    assert a.z_star.tobytes() == b.z_star.tobytes()
    assert a.mu_ineq.tobytes() == b.mu_ineq.tobytes() and a.cost == b.cost


def test_random_states_meet_contract(make):
    rng = np.random.default_rng(5)
    for _ in range(4):
        x0 = rng.uniform([-0.3, -1, -np.pi, -3], [0.3, 1, np.pi, 3])
        nlp = make(x0)
        check_contract(nlp, multistart_solve(nlp, CFG, seed=0))


def test_trace_rows(hanging):
    _, sol = hanging
    assert len(sol.trace) == sol.iterations + 1
    assert all(len(r) == 6 for r in sol.trace)
    assert sol.trace[-1][2] <= CFG.tol_kkt


def test_iteration_budget():
    with pytest.raises(MaxIterError):
        solve(ToyNlp(theta=[0.0], lo=1.0), np.array([3.0, 0.0]), SolverConfig(max_iter=1))


def test_shifted_guess_is_warm(make, hanging):
    nlp, sol = hanging
    U, X = nlp.split(sol.z_star)
    nxt = make(X[1])
    z = shifted_guess(nxt, nlp, sol.z_star, nlp.cfg.dt_ctrl)
    Us, Xs = nxt.split(z)
    np.testing.assert_allclose(Us[:-1], U[1:])
    np.testing.assert_allclose(Xs[:-1], X[1:])
    warm = solve(nxt, z, CFG)
    assert warm.iterations < 15


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol_kkt=0)
    with pytest.raises(ValueError):
        SolverConfig(n_multistart=0)
