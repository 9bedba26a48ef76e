"""Command line entry point: ``adaptive-ampc <subcommand> [options]``.

Exit codes: 0 success, 1 a validation check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .config import PARAM_NAMES, CartpoleParams, load_config
from .solver import SolverConfig

log = logging.getLogger("adaptive_ampc.cli")


class UsageError(Exception):
    pass


def _load_nets(path):
    from .deploy import import_weights
    from .neural import load_nets

    path = Path(path)
    if not path.exists():
        raise UsageError(f"weights file {path} not found")
    return import_weights(path) if path.suffix == ".bin" else load_nets(path)


def _policy(args, config):
    from .policy import AmpcPolicy

    pi_nn, grad_nn = _load_nets(args.weights)
    return AmpcPolicy(pi_nn, grad_nn, config.theta_nom, (config.ocp.u_min, config.ocp.u_max))


def _parse_deltas(items, config) -> CartpoleParams:
    th = config.theta_nom.as_array()
    for item in items or []:
        name, _, value = item.partition("=")
        if name not in PARAM_NAMES or not value:
            raise UsageError(f"bad --delta {item!r}; expected NAME=VALUE with NAME in {PARAM_NAMES}")
        th[PARAM_NAMES.index(name)] += float(value)
    return CartpoleParams.from_array(th)


def _write_trace(path, traces: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "iteration", "cost", "kkt_residual", "violation", "rho", "delta"])
        for idx in sorted(traces):
            for row in traces[idx]:
                w.writerow([idx, *row])


# ---------------------------------------------------------------- subcommands
def cmd_gen_dataset(args, config) -> int:
    spec = ds_mod.SampleSpec(n_total=args.n, dense_frac=args.dense_frac, seed=args.seed)
    states = ds_mod.sample_states(spec)
    traces = {} if args.trace else None
    t0 = time.time()
    data = ds_mod.generate(states, config.theta_nom, config.ocp, config.constants, SolverConfig(),
                           config.theta_range, workers=args.workers, seed=args.seed,
                           progress_every=max(1, args.n // 20), traces=traces)
    ds_mod.save(data, args.out)
    print(json.dumps({"records": len(data), "skipped": data.skipped, "reasons": data.skip_reasons,
                      "success_rate": data.success_rate, "seconds": round(time.time() - t0, 1)}))
    if traces is not None:
        _write_trace(args.trace, traces)
    if args.check_sensitivity:
        rows = check_sensitivity(states[: args.check_count], config, args.seed)
        write_sensitivity_csv(rows, args.check_sensitivity)
    return 0


def check_sensitivity(states, config, seed=0):
    """KKT vs finite-difference sensitivities for each state; list of row dicts."""
    from .ocp import build_nlp
    from .sensitivity import SensitivityError, fd_sensitivity, kkt_sensitivity
    from .solver import SolverFailure, multistart_solve

    rows = []
    for i, x0 in enumerate(states):
        nlp = build_nlp(x0, config.theta_nom, config.ocp, config.constants)
        try:
            sol = multistart_solve(nlp, SolverConfig(), seed=[seed, i])
            S = kkt_sensitivity(nlp, sol, config.theta_range)
        except (SolverFailure, SensitivityError) as exc:
            log.info("instance %d skipped: %s", i, exc)
            continue
        fd, stable = fd_sensitivity(nlp, sol, config.theta_range)
        for j, name in enumerate(PARAM_NAMES):
            rel = abs(S.row[j] - fd[j]) / max(abs(fd[j]), 1e-12)
            rows.append({"instance": i, "param": name, "kkt": S.row[j], "fd": fd[j], "rel_err": rel,
                         "active_set_stable": stable})
    return rows


def write_sensitivity_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["instance", "param", "kkt", "fd", "rel_err", "active_set_stable"])
        w.writeheader()
        w.writerows(rows)


def cmd_train(args, config) -> int:
    from .neural import DEPLOY_TRAIN, TrainConfig, save_nets, train

    data = ds_mod.load(args.dataset)
    base = DEPLOY_TRAIN if args.preset == "deploy" else TrainConfig()
    cfg = replace(base, seed=args.seed,
                  epochs=base.epochs if args.epochs is None else args.epochs)
    t0 = time.time()
    pi_nn, grad_nn, rep = train(data, cfg)
    save_nets(args.out, pi_nn, grad_nn)
    report = {
        "n_train": rep.n_train,
        "n_val": rep.n_val,
        "policy_val_mae": float(rep.policy.val_mae[0]),
        "sensitivity_val_mae": [float(v) for v in rep.sensitivity.val_mae],
        "sensitivity_val_rownorm_mae": rep.sensitivity.val_rownorm_mae,
        "sensitivity_target_rownorm_std": rep.sensitivity.target_rownorm_std,
        "policy_train_loss": rep.policy.train_loss,
        "policy_val_loss": rep.policy.val_loss,
        "sensitivity_train_loss": rep.sensitivity.train_loss,
        "sensitivity_val_loss": rep.sensitivity.val_loss,
        "seconds": round(time.time() - t0, 1),
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=1))
    print(json.dumps({k: v for k, v in report.items() if "loss" not in k}))
    return 0


def cmd_export(args, config) -> int:
    from .deploy import blob_size, export

    pi_nn, grad_nn = _load_nets(args.weights)
    export(pi_nn, grad_nn, args.out)
    print(json.dumps({"out": str(args.out), "bytes": blob_size([pi_nn, grad_nn])}))
    return 0


def cmd_simulate(args, config) -> int:
    from .harness import SimConfig, simulate

    if len(args.x0) != 4:
        raise UsageError("--x0 needs four values")
    theta_true = _parse_deltas(args.delta, config)
    theta_ctrl = theta_true if args.theta_ctrl == "true" else config.theta_nom
    cfg = SimConfig(x0=tuple(args.x0), theta_true=theta_true, theta_ctrl=theta_ctrl, T=args.T)
    policy = None if args.kind == "mpc-oracle" else _policy(args, config)
    ep = simulate(args.kind, cfg, config.constants, policy=policy, ocp=config.ocp, seed=args.seed)
    if args.out:
        ep.to_csv(args.out)
    r = ep.report
    print(json.dumps({"success": r.success, "upright": r.upright, "violated": r.violated,
                      "max_abs_y": r.max_abs_y, "max_abs_u": float(np.nanmax(np.abs(ep.U))), "reason": r.reason}))
    return 0


def cmd_sweep(args, config) -> int:
    from .harness import sweep, sweep_grid, write_sweep_csv

    params = range(5) if args.param is None else [args.param]
    rows = []
    for j in params:
        grid = sweep_grid(j, args.grid, config.theta_range)
        rows += sweep(_policy(args, config), j, grid, args.states, args.seed, config.constants,
                      config.theta_range)
    if args.out:
        write_sweep_csv(rows, args.out)
    else:
        write_sweep_csv(rows, "/dev/stdout")
    return 0


def cmd_stability(args, config) -> int:
    from .harness import ProbeConfig, stability_estimates
    from .neural import forward

    pi_nn, grad_nn = _load_nets(args.weights)
    data = ds_mod.load(args.dataset)
    _, val = data.split(args.val_frac, args.seed)
    probe = ProbeConfig(seed=args.seed, n_eta=args.eta_states, n_lipschitz=args.lipschitz_states)
    est = stability_estimates(lambda X: forward(pi_nn, X), lambda X: forward(grad_nn, X), val, config, probe)
    out = est.to_dict()
    if args.noise:
        out["noise_scan"] = noise_scan(pi_nn, grad_nn, val, config, probe, est, args.noise, args.seed)
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0 if est.premise_met else 1


def noise_scan(pi_nn, grad_nn, val, config, probe, est, levels, seed=0):
    """Theta-set radius with Gaussian noise (relative to the target spread) added to the sensitivity net."""
    from .harness import stability_estimates
    from .neural import forward

    scale = np.std(val.sens, axis=0)
    rows = []
    for s in levels:
        def noisy(X, s=s):
            rng = np.random.default_rng(seed)
            return forward(grad_nn, X) + s * scale * rng.standard_normal((len(X), 5))

        e = stability_estimates(lambda X: forward(pi_nn, X), noisy, val, config, probe,
                                eta_hat=est.eta_hat, L_hat=est.L_hat)
        rows.append({"noise": s, "e_grad_sup": e.e_grad_sup, "theta_radius": [float(v) for v in e.theta_radius]})
    return rows


def rk4_order_ratio(config) -> float:
    from .dynamics import step_rk4

    x0 = np.array([0.0, 0.0, 2.5, 0.0])
    th = config.theta_nom
    c = config.constants
    T = 0.4

    def run(dt):
        x = x0.copy()
        for _ in range(int(round(T / dt))):
            x = step_rk4(x, 0.0, th, c, dt)
        return x

    a, b, d = run(0.02), run(0.01), run(0.005)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b - d))


def cmd_verify(args, config) -> int:
    from .deploy import lut_error_scan
    from .neural import POLICY_ARCH, SENSITIVITY_ARCH, backprop_check, init_mlp
    from .ocp import build_nlp
    from .solver import kkt_residual, multistart_solve

    checks = []

    def record(name, value, ok):
        checks.append({"check": name, "value": float(value), "pass": bool(ok)})

    lut = lut_error_scan()
    record("lut_max_error", lut, lut <= 1e-4)
    rng = np.random.default_rng(args.seed)
    for arch in (POLICY_ARCH, SENSITIVITY_ARCH):
        net = init_mlp(arch, args.seed)
        err = backprop_check(net, (rng.normal(size=(8, 4)), rng.normal(size=(8, arch.output_dim))))
        record(f"backprop_{arch.hidden_layers}_hidden", err, err < 1e-5)
    ratio = rk4_order_ratio(config)
    record("rk4_richardson_ratio", ratio, abs(ratio - 16) <= 2)

    tiny = ds_mod.load(Path(__file__).parent / "data" / "tiny_dataset.bin")
    states = tiny.X[: args.instances]
    rows = check_sensitivity(states, config, args.seed)
    for i in sorted({r["instance"] for r in rows}):
        mine = [r for r in rows if r["instance"] == i]
        worst = max(r["rel_err"] for r in mine)
        stable = all(r["active_set_stable"] for r in mine)
        record(f"sensitivity_instance_{i}", worst, worst < 1e-3 or not stable)
    for i, x0 in enumerate(states):
        nlp = build_nlp(x0, config.theta_nom, config.ocp, config.constants)
        # the bundled dataset was generated with seed 0
        sol = multistart_solve(nlp, SolverConfig(), seed=[0, i])
        res = kkt_residual(nlp, sol)
        record(f"kkt_residual_instance_{i}", res, res <= SolverConfig().tol_kkt)
        record(f"u0_matches_tiny_dataset_{i}", abs(sol.u0 - tiny.u0[i]), abs(sol.u0 - tiny.u0[i]) < 1e-6)
    w = csv.DictWriter(sys.stdout, fieldnames=["check", "value", "pass"])
    w.writeheader()
    w.writerows(checks)
    return 0 if all(c["pass"] for c in checks) else 1


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: bundled constants.json)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adaptive-ampc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", parents=[common], help="solve the MPC for sampled states")
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--dense-frac", type=float, default=0.01)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--trace", help="CSV of SQP iterations per record")
    g.add_argument("--check-sensitivity", metavar="CSV", help="also write KKT vs finite-difference sensitivities")
    g.add_argument("--check-count", type=int, default=10, help="states used by --check-sensitivity")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", parents=[common], help="train both networks")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output .npz with both networks")
    t.add_argument("--preset", choices=["deploy", "plain"], default="deploy",
                   help="deploy: L1 loss on mirrored data, 2500 epochs; plain: mixed loss, 400 epochs")
    t.add_argument("--epochs", type=int, help="override the preset's epoch count")
    t.add_argument("--report", help="JSON training report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", parents=[common], help="write the single-precision weight blob")
    e.add_argument("--weights", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    s = sub.add_parser("simulate", parents=[common], help="one closed-loop episode")
    s.add_argument("--kind", choices=["adaptive", "nominal", "mpc-oracle"], default="adaptive")
    s.add_argument("--weights")
    s.add_argument("--x0", type=float, nargs="+", default=[0.0, 0.0, np.pi, 0.0])
    s.add_argument("--delta", action="append", help="plant parameter offset NAME=VALUE (repeatable)")
    s.add_argument("--theta-ctrl", choices=["true", "nom"], default="true")
    s.add_argument("--T", type=float, default=10.0)
    s.add_argument("--out", help="trajectory CSV")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", parents=[common], help="success fractions along single parameters")
    w.add_argument("--weights", required=True)
    w.add_argument("--param", type=int, choices=range(5))
    w.add_argument("--grid", type=int, default=5)
    w.add_argument("--states", type=int, default=20)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", parents=[common], help="run the numerical oracle checks")
    v.add_argument("--instances", type=int, default=2)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("stability", parents=[common], help="empirical stability quantities as JSON")
    b.add_argument("--weights", required=True)
    b.add_argument("--dataset", required=True)
    b.add_argument("--val-frac", type=float, default=0.1)
    b.add_argument("--eta-states", type=int, default=2)
    b.add_argument("--lipschitz-states", type=int, default=6)
    b.add_argument("--noise", type=float, nargs="*", help="relative noise levels injected into the sensitivity net")
    b.add_argument("--out")
    b.set_defaults(func=cmd_stability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, config)
    except (UsageError, ds_mod.DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
