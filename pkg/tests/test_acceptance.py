"""End-to-end acceptance checks.

Needs ``artifacts/dataset.bin`` (the 10^4-state desk dataset, produced by
``adaptive-ampc gen-dataset --n 10000 --seed 0 --out artifacts/dataset.bin``).
The networks are trained inside the session so that the training time is measured.
"""

import json
import time

import numpy as np
import pytest
from conftest import ARTIFACTS, record_criterion

from adaptive_ampc.cli import main as cli_main
from adaptive_ampc.config import PARAM_NAMES, CartpoleParams, FixedConstants
from adaptive_ampc.dataset import SampleSpec, load
from adaptive_ampc.deploy import EmbeddedEvaluator, WeightBlob, export, load_blob, lut_error_scan
from adaptive_ampc.dynamics import accelerations, energies, simulate_batch, step_rk4
from adaptive_ampc.harness import SimConfig, simulate, sweep, sweep_grid
from adaptive_ampc.neural import DEPLOY_TRAIN, POLICY_ARCH, SENSITIVITY_ARCH, backprop_check, forward, init_mlp
from adaptive_ampc.neural import save_nets, train
from adaptive_ampc.ocp import build_nlp
from adaptive_ampc.policy import AmpcPolicy
from adaptive_ampc.sensitivity import SensitivityError, fd_sensitivity, kkt_sensitivity, predictor_residuals
from adaptive_ampc.solver import SolverConfig, SolverFailure, kkt_residual, multistart_solve, solve

pytestmark = pytest.mark.slow

DATASET = ARTIFACTS / "dataset.bin"
CFG = SolverConfig()


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def dataset():
    if not DATASET.exists():
        pytest.fail(f"{DATASET} is missing; generate it with `adaptive-ampc gen-dataset --n 10000 --seed 0 "
                    f"--out {DATASET}`")
    return load(DATASET)


@pytest.fixture(scope="session")
def trained(dataset):
    t0 = time.process_time()
    pi_nn, grad_nn, report = train(dataset, DEPLOY_TRAIN)
    return pi_nn, grad_nn, report, time.process_time() - t0


@pytest.fixture(scope="session")
def policy(trained, config):
    return AmpcPolicy(trained[0], trained[1], config.theta_nom, (config.ocp.u_min, config.ocp.u_max))


# ---------------------------------------------------------------- 1 and 2: sensitivities
def swing_up_states(n, seed):
    spec = SampleSpec()
    lo, hi = np.array(spec.ranges).T
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 4))


def solved_instances(config, states, seed):
    for i, x0 in enumerate(states):
        nlp = build_nlp(x0, config.theta_nom, config.ocp, config.constants)
        try:
            sol = multistart_solve(nlp, CFG, seed=[seed, i])
            S = kkt_sensitivity(nlp, sol, config.theta_range)
        except (SolverFailure, SensitivityError):
            continue
        yield nlp, sol, S


def test_criterion_1_sensitivity_oracle(config):
    t0 = time.time()
    worst, n_stable, n_tried = 0.0, 0, 0
    for nlp, sol, S in solved_instances(config, swing_up_states(150, 101), seed=1):
        n_tried += 1
        fd, stable = fd_sensitivity(nlp, sol, config.theta_range)
        if not stable:
            continue
        n_stable += 1
        # range-scaled units (V over the full sweep range); the floor only matters when u0 sits on a bound
        r = np.asarray(config.theta_range)
        worst = max(worst, float(np.max(np.abs(S.row - fd) * r / np.maximum(np.abs(fd) * r, 1e-6))))
        if n_stable == 50:
            break
    minutes = (time.time() - t0) / 60
    check(1, n_stable >= 50 and worst < 1e-3 and minutes < 10,
          f"{n_stable} stable instances ({n_tried} solved), max relative error {worst:.2e} (< 1e-3), "
          f"{minutes:.1f} min (< 10)")


def test_criterion_2_predictor_order(config):
    rng = np.random.default_rng(202)
    r = np.asarray(config.theta_range)
    logs, slopes, unstable = [], [], 0
    for nlp, sol, S in solved_instances(config, swing_up_states(80, 202), seed=2):
        d = rng.standard_normal(5)
        d = 0.05 * r * d / np.max(np.abs(d))
        scales, res, stable = predictor_residuals(nlp, sol, S, d, n_halvings=5, cfg=CFG)
        if not stable:
            unstable += 1
            continue
        logs.append((np.log(scales), np.log(res)))
        slopes.append(np.polyfit(*logs[-1], 1)[0])
        if len(logs) == 20:
            break
    # one shared slope, one intercept per instance
    xc = np.concatenate([x - x.mean() for x, _ in logs])
    yc = np.concatenate([y - y.mean() for _, y in logs])
    slope = float(xc @ yc / (xc @ xc))
    check(2, len(logs) >= 20 and abs(slope - 2.0) <= 0.3,
          f"pooled log-log slope {slope:.3f} (2.0 +- 0.3) over {len(logs)} active-set-stable instances "
          f"({unstable} unstable skipped); per-instance slopes {min(slopes):.2f}..{max(slopes):.2f}")


# ---------------------------------------------------------------- 3: solver contract
def test_criterion_3_kkt_contract(config):
    c = config.constants
    nlp = build_nlp(np.zeros(4), config.theta_nom, config.ocp, c)
    eq = solve(nlp, np.zeros(nlp.nz), CFG)
    m = c.m_rod + config.theta_nom.m_add
    closed = (config.ocp.N + 1) * (-m * c.g * c.l)
    rel = abs(eq.cost - closed) / abs(closed)
    residuals = [kkt_residual(nlp, eq)]
    for nlp_i, sol, _ in solved_instances(config, swing_up_states(30, 303), seed=3):
        residuals.append(kkt_residual(nlp_i, sol))
    ok = sum(r <= 1e-8 for r in residuals)
    check(3, ok == len(residuals) and rel <= 1e-9,
          f"{ok}/{len(residuals)} solutions pass independent kkt_residual <= 1e-8 (max {max(residuals):.1e}); "
          f"equilibrium cost relative error {rel:.1e} (<= 1e-9)")


# ---------------------------------------------------------------- 4: dynamics
def test_criterion_4_dynamics_oracles(config):
    th, c = config.theta_nom, config.constants

    def run(dt):
        x = np.array([0.0, 0.0, 2.5, 0.0])
        for _ in range(int(round(0.4 / dt))):
            x = step_rk4(x, 0.0, th, c, dt)
        return x

    a, b, d = run(0.02), run(0.01), run(0.005)
    ratio = np.linalg.norm(a - b) / np.linalg.norm(b - d)

    free = CartpoleParams(th.m_add, th.M, 0.0, 0.0, 0.0)
    X = np.array([[0.0, 0.0, 2.5, 0.0]])
    e0 = sum(energies(X[0], free, c))
    drift = 0.0
    for _ in range(5000):
        X = simulate_batch(X, 0.0, free, c, 1e-3, 1)
        drift = max(drift, abs(sum(energies(X[0], free, c)) - e0))

    rng = np.random.default_rng(4)
    exact = True
    for _ in range(10_000):
        x = rng.uniform(-10, 10, 4)
        u = rng.uniform(-9, 9)
        p, q = accelerations(x, u, th, c), accelerations(-x, -u, th, c)
        exact &= p[0] == -q[0] and p[1] == -q[1]
    check(4, abs(ratio - 16) <= 2 and drift < 1e-6 and exact,
          f"Richardson ratio {ratio:.2f} (16 +- 2); energy drift {drift:.1e} J over 5 s (< 1e-6); "
          f"odd symmetry exact on 10^4 draws: {exact}")


# ---------------------------------------------------------------- 5: training gates
def test_criterion_5_training(trained):
    pi_nn, grad_nn, rep, seconds = trained
    rng = np.random.default_rng(5)
    bp = max(backprop_check(init_mlp(a, 5), (rng.normal(size=(16, 4)), rng.normal(size=(16, a.output_dim))))
             for a in (POLICY_ARCH, SENSITIVITY_ARCH))
    bp = max(bp, backprop_check(pi_nn, (rng.normal(size=(16, 4)), rng.normal(size=(16, 1)))),
             backprop_check(grad_nn, (rng.normal(size=(16, 4)), rng.normal(size=(16, 5)))))
    mae = float(rep.policy.val_mae[0])
    ratio = rep.sensitivity.val_rownorm_mae / rep.sensitivity.target_rownorm_std
    check(5, bp < 1e-5 and mae < 0.5 and ratio < 0.2 and seconds < 1800,
          f"backprop error {bp:.1e} (< 1e-5); policy val MAE {mae:.3f} V (< 0.5); sensitivity row-norm MAE "
          f"{100 * ratio:.1f}% of target spread (< 20%); training {seconds / 60:.1f} CPU-min (< 30)")


# ---------------------------------------------------------------- 6: sweep property
SWEEP_X0 = None  # initial-state box for the sweep; None means the dataset sampling ranges


def test_criterion_6_sweep(policy, config, tmp_path_factory):
    t0 = time.time()
    per_param = {}
    lines = []
    for j, name in enumerate(PARAM_NAMES):
        rows = sweep(policy, j, sweep_grid(j, 5, config.theta_range), 20, seed=6, consts=config.constants,
                     theta_range=config.theta_range, x0_ranges=SWEEP_X0)
        a = sum(r.adaptive_success for r in rows)
        n = sum(r.nominal_success for r in rows)
        per_param[name] = (a, n)
        lines.append(f"{name} {a}/{n}")
    total_a = sum(a for a, _ in per_param.values())
    total_n = sum(n for _, n in per_param.values())
    strict = sum(a > n for a, n in per_param.values())
    hours = (time.time() - t0) / 3600
    check(6, total_a >= total_n and strict >= 2 and hours < 2,
          f"adaptive/nominal successes of 500 episodes: {total_a}/{total_n}; strictly better for {strict} "
          f"parameters (>= 2) [{', '.join(lines)}]; {60 * hours:.1f} min")


# ---------------------------------------------------------------- 7: reduction at theta_nom
def test_criterion_7_reduction(policy, config):
    identical = 0
    states = swing_up_states(10, 7)
    for x0 in states:
        cfg = SimConfig(x0=tuple(x0), theta_true=config.theta_nom, theta_ctrl=config.theta_nom)
        a = simulate("adaptive", cfg, config.constants, policy)
        b = simulate("nominal", cfg, config.constants, policy)
        identical += a.X.tobytes() == b.X.tobytes() and a.U.tobytes() == b.U.tobytes()
    check(7, identical == len(states), f"{identical}/{len(states)} episodes bit-identical at theta_nom")


def test_upright_rest_regulation(policy, config):
    cfg = SimConfig(x0=(0.0, 0.0, 0.0, 0.0), theta_true=config.theta_nom, theta_ctrl=config.theta_nom)
    ep = simulate("adaptive", cfg, config.constants, policy)
    assert ep.report.success, "adaptive policy lost the upright equilibrium"
    assert ep.report.max_abs_y < 0.05, f"cart drifted {ep.report.max_abs_y:.3f} m from upright rest"


# ---------------------------------------------------------------- 8: MPC swing-up
def test_criterion_8_mpc_swing_up(config, tmp_path):
    cfg = SimConfig(x0=(0.0, 0.0, np.pi, 0.0), theta_true=config.theta_nom, theta_ctrl=config.theta_nom)
    ep = simulate("mpc-oracle", cfg, config.constants, ocp=config.ocp, seed=0)
    ep.to_csv(tmp_path / "mpc.csv")
    max_u = float(np.max(np.abs(ep.U)))
    check(8, ep.report.success and ep.report.max_abs_y <= 0.4 and max_u <= 9.0,
          f"swing-up success {ep.report.success}; max |y| {ep.report.max_abs_y:.3f} m (<= 0.4); "
          f"max |u| {max_u:.2f} V (<= 9)")


# ---------------------------------------------------------------- 9: deploy
def test_criterion_9_deploy(trained, tmp_path):
    pi_nn, grad_nn = trained[:2]
    lut = lut_error_scan()
    path = tmp_path / "weights.bin"
    export(pi_nn, grad_nn, path)
    ev = EmbeddedEvaluator(load_blob(path))
    X = swing_up_states(1000, 9)
    ref = forward(pi_nn, X)[:, 0]
    du = max(abs(float(ev(x)[0][0]) - r) for x, r in zip(X, ref))
    ev(X[0])
    t0 = time.perf_counter()
    for x in X:
        ev(x)
    per_call = (time.perf_counter() - t0) / len(X)
    check(9, lut <= 1e-4 and du <= 0.05 and per_call < 2e-3,
          f"LUT max error {lut:.2e} (<= 1e-4); f32 vs f64 max |du| {du:.1e} V (<= 0.05); "
          f"both nets {1e6 * per_call:.0f} us per evaluation (< 2 ms)")


# ---------------------------------------------------------------- 10: stability report
def test_criterion_10_stability(trained, tmp_path, capsys):
    save_nets(tmp_path / "nets.npz", *trained[:2])
    levels = [0.1, 0.3, 1.0]
    code = cli_main(["stability", "--weights", str(tmp_path / "nets.npz"), "--dataset", str(DATASET),
                     "--out", str(tmp_path / "stab.json"), "--noise", *map(str, levels)])
    rep = json.loads((tmp_path / "stab.json").read_text())
    keys = ("e_pi_sup", "e_grad_sup", "L_hat", "eta_hat", "epsilon")
    finite = all(np.isfinite(rep[k]) for k in keys) and np.all(np.isfinite(rep["theta_radius"]))
    radii = [rep["theta_radius"][0]] + [row["theta_radius"][0] for row in rep["noise_scan"]]
    shrinks = all(a > b for a, b in zip(radii, radii[1:]))
    check(10, code == 0 and finite and rep["epsilon"] > 0 and shrinks,
          "e_pi {e_pi_sup:.3f} V, e_grad {e_grad_sup:.3f}, L {L_hat:.3f}, eta {eta_hat:.2f} V, "
          "epsilon {epsilon:.3f} (> 0); ".format(**rep)
          + f"m_add radius under noise {', '.join(f'{v:.2e}' for v in radii)} (strictly shrinking)")
