"""Closed-loop simulation, the one-parameter-at-a-time sweep, and stability estimates."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .config import CartpoleParams, Config, FixedConstants, OcpConfig
from .dynamics import simulate_batch, wrap_angle
from .ocp import build_nlp
from .policy import AmpcPolicy
from .sensitivity import active_set_changed, kkt_sensitivity, linear_predict, resolve
from .solver import SolverConfig, SolverFailure, multistart_solve, shifted_guess

log = logging.getLogger(__name__)

KINDS = ("adaptive", "nominal", "mpc-oracle")


@dataclass(frozen=True)
class SuccessCriterion:
    settle_time: float = 1.0
    alpha_tol: float = 0.1
    alpha_dot_tol: float = 0.5
    y_max: float = 0.4

    def __post_init__(self):
        if min(self.settle_time, self.alpha_tol, self.alpha_dot_tol, self.y_max) <= 0:
            raise ValueError("success thresholds must be positive")


@dataclass(frozen=True)
class SimConfig:
    x0: tuple = (0.0, 0.0, np.pi, 0.0)
    theta_true: CartpoleParams = CartpoleParams(0.02, 0.506, -3.96, 1.3, 0.0002)
    theta_ctrl: CartpoleParams = CartpoleParams(0.02, 0.506, -3.96, 1.3, 0.0002)
    T: float = 10.0
    dt_control: float = 0.05
    dt_sim: float = 0.001
    input_offset: float = 0.0  # constant disturbance added to the applied input [V]

    def __post_init__(self):
        if self.T <= 0 or self.dt_control <= 0 or self.dt_sim <= 0:
            raise ValueError("T, dt_control and dt_sim must be positive")
        if abs(self.n_sub * self.dt_sim - self.dt_control) > 1e-9 * self.dt_control:
            raise ValueError("dt_control must be a multiple of dt_sim")

    @property
    def n_sub(self) -> int:
        return int(round(self.dt_control / self.dt_sim))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt_control))


@dataclass
class SuccessReport:
    success: bool
    upright: bool
    violated: bool
    max_abs_y: float
    failure_step: int = -1  # control step at which the state became non-finite
    reason: str = ""


@dataclass
class Episode:
    t: np.ndarray
    X: np.ndarray  # (n_steps + 1, 4) at control instants
    U: np.ndarray  # (n_steps,) applied controller outputs (before the disturbance)
    report: SuccessReport

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y", "y_dot", "alpha", "alpha_dot", "u"])
            for k in range(len(self.t)):
                u = self.U[k] if k < len(self.U) else np.nan
                w.writerow([f"{self.t[k]:.3f}", *(repr(float(v)) for v in self.X[k]), repr(float(u))])


def judge(X, max_abs_y, T: float, dt_control: float, crit: SuccessCriterion):
    """Success flags for a batch of logged trajectories ``X`` of shape (n, K+1, 4)."""
    K = X.shape[1] - 1
    k0 = max(0, K - int(round(crit.settle_time / dt_control)))
    tail = X[:, k0:]
    finite = np.all(np.isfinite(X.reshape(X.shape[0], -1)), axis=1)
    with np.errstate(invalid="ignore"):
        upright = np.all(np.abs(wrap_angle(tail[..., 2])) < crit.alpha_tol, axis=1)
        upright &= np.all(np.abs(tail[..., 3]) < crit.alpha_dot_tol, axis=1)
        violated = ~(max_abs_y <= crit.y_max)
    upright &= finite
    return upright & ~violated, upright, violated


def _run_batch(controller, X0, thetas_true, c: FixedConstants, cfg: SimConfig, crit: SuccessCriterion):
    """Integrate ``n`` episodes in lockstep; ``controller(X, k) -> U`` is called every control period."""
    X = np.array(X0, dtype=float).reshape(-1, 4)
    n = X.shape[0]
    TH = np.broadcast_to(np.asarray(thetas_true, dtype=float), (n, 5)).copy()
    K = cfg.n_steps
    log_X = np.full((n, K + 1, 4), np.nan)
    log_U = np.full((n, K), np.nan)
    log_X[:, 0] = X
    max_y = np.abs(X[:, 0])
    alive = np.all(np.isfinite(X), axis=1)
    fail_step = np.where(alive, -1, 0)
    for k in range(K):
        U = np.zeros(n)
        if alive.any():
            U[alive] = controller(X[alive], k, alive)
        log_U[:, k] = np.where(alive, U, np.nan)
        Ua = U + cfg.input_offset
        for _ in range(cfg.n_sub):
            with np.errstate(all="ignore"):
                X[alive] = simulate_batch(X[alive], Ua[alive], TH[alive], c, cfg.dt_sim, 1)
                max_y[alive] = np.maximum(max_y[alive], np.abs(X[alive, 0]))
            bad = alive & ~np.all(np.isfinite(X), axis=1)
            if bad.any():
                fail_step[bad] = k
                alive &= ~bad
        log_X[:, k + 1] = np.where(alive[:, None], X, np.nan)
    success, upright, violated = judge(log_X, max_y, cfg.T, cfg.dt_control, crit)
    reports = []
    for i in range(n):
        reason = "" if success[i] else ("non-finite state" if fail_step[i] >= 0 else
                                        "constraint violated" if violated[i] else "not upright")
        reports.append(SuccessReport(bool(success[i]), bool(upright[i]), bool(violated[i]), float(max_y[i]),
                                     int(fail_step[i]), reason))
    t = cfg.dt_control * np.arange(K + 1)
    return t, log_X, log_U, reports


def policy_controller(policy, kind: str, thetas_ctrl):
    """Batch controller for the learned policy (``policy`` has ``evaluate_batch``)."""
    thetas_ctrl = np.atleast_2d(np.asarray(thetas_ctrl, dtype=float))

    def ctrl(X, k, alive):
        th = np.broadcast_to(thetas_ctrl, (alive.size, 5))[alive]
        if kind == "nominal":
            th = np.broadcast_to(policy.theta_nom.as_array(), th.shape)
        return policy.evaluate_batch(X, th)

    return ctrl


class MpcController:
    """Receding-horizon MPC: multistart each step plus the shifted previous plan as a start."""

    def __init__(self, theta_ctrl: CartpoleParams, ocp: OcpConfig, consts: FixedConstants,
                 solver_cfg: SolverConfig = SolverConfig(), dt_control: float = 0.05, seed: int = 0):
        self.theta, self.ocp, self.consts = theta_ctrl, ocp, consts
        self.solver_cfg, self.dt, self.seed = solver_cfg, dt_control, seed
        self.prev = None

    def __call__(self, x) -> float:
        nlp = build_nlp(np.asarray(x, dtype=float), self.theta, self.ocp, self.consts)
        extra = [] if self.prev is None else [shifted_guess(nlp, *self.prev, self.dt)]
        try:
            sol = multistart_solve(nlp, self.solver_cfg, seed=self.seed, extra_starts=extra)
        except SolverFailure:
            # keep applying the previous plan when every start fails
            if self.prev is None:
                raise
            z = shifted_guess(nlp, *self.prev, self.dt)
            self.prev = (nlp, z)
            return float(np.clip(nlp.split(z)[0][0], self.ocp.u_min, self.ocp.u_max))
        self.prev = (nlp, sol.z_star)
        self.seed += 1
        return sol.u0


def simulate(kind: str, cfg: SimConfig, consts: FixedConstants, policy: AmpcPolicy | None = None,
             ocp: OcpConfig | None = None, solver_cfg: SolverConfig = SolverConfig(),
             crit: SuccessCriterion = SuccessCriterion(), seed: int = 0) -> Episode:
    """One closed-loop episode with the plant at ``theta_true``."""
    if kind not in KINDS:
        raise ValueError(f"unknown controller kind {kind!r}; expected one of {KINDS}")
    if kind == "mpc-oracle":
        mpc = MpcController(cfg.theta_ctrl, ocp or OcpConfig(), consts, solver_cfg, cfg.dt_control, seed)

        def ctrl(X, k, alive):
            return np.array([mpc(X[0])])
    else:
        if policy is None:
            raise ValueError(f"{kind} simulation needs a policy")
        ctrl = policy_controller(policy, kind, cfg.theta_ctrl.as_array())
    t, X, U, reports = _run_batch(ctrl, np.asarray(cfg.x0, dtype=float), cfg.theta_true.as_array(), consts, cfg,
                                  crit)
    return Episode(t, X[0], U[0], reports[0])


def simulate_many(policy, kind: str, X0, thetas_true, thetas_ctrl, consts: FixedConstants,
                  cfg: SimConfig = SimConfig(), crit: SuccessCriterion = SuccessCriterion()):
    """Batched policy episodes; returns ``(t, X, U, reports)``."""
    ctrl = policy_controller(policy, kind, thetas_ctrl)
    return _run_batch(ctrl, X0, thetas_true, consts, cfg, crit)


# ---------------------------------------------------------------- sweep
@dataclass
class SweepRow:
    param: str
    delta: float
    adaptive_frac: float
    nominal_frac: float
    n: int
    adaptive_success: int = 0
    nominal_success: int = 0


def sweep_states(n_states: int, seed: int, ranges) -> np.ndarray:
    lo, hi = np.array(ranges, dtype=float).T
    X = np.random.default_rng(seed).uniform(lo, hi, size=(n_states, 4))
    X[:, 2] = wrap_angle(X[:, 2])
    return X


def sweep_grid(param_index: int, n_values: int, theta_range) -> np.ndarray:
    r = float(theta_range[param_index])
    return np.linspace(-r, r, n_values)


def sweep(policy: AmpcPolicy, param_index: int, grid, n_states: int, seed: int, consts: FixedConstants,
          theta_range=(0.04, 1.0, 9.0, 1.0, 0.06), x0_ranges=None, cfg: SimConfig = SimConfig(),
          crit: SuccessCriterion = SuccessCriterion()) -> list[SweepRow]:
    """Success fractions of the adaptive and the nominal policy along one parameter.

    The plant gets ``theta_nom + delta * e_j``; the adaptive policy is told the
    true parameters, the nominal one keeps ``theta_nom``.  Every grid value uses
    the same initial states.
    """
    from .dataset import SampleSpec

    grid = np.asarray(grid, dtype=float)
    if np.any(np.abs(grid) > theta_range[param_index] * (1 + 1e-12)):
        raise ValueError("grid leaves the sweep bounds")
    X0 = sweep_states(n_states, seed, SampleSpec().ranges if x0_ranges is None else x0_ranges)
    nom = policy.theta_nom.as_array()
    n_g = len(grid)
    thetas = np.repeat(nom[None], n_g, axis=0)
    thetas[:, param_index] += grid
    TH = np.repeat(thetas, n_states, axis=0)
    XX = np.tile(X0, (n_g, 1))
    rows = []
    ok = {}
    for kind in ("adaptive", "nominal"):
        _, _, _, reports = simulate_many(policy, kind, XX, TH, TH, consts, cfg, crit)
        ok[kind] = np.array([r.success for r in reports]).reshape(n_g, n_states)
    from .config import PARAM_NAMES

    for g, delta in enumerate(grid):
        a, b = int(ok["adaptive"][g].sum()), int(ok["nominal"][g].sum())
        rows.append(SweepRow(PARAM_NAMES[param_index], float(delta), a / n_states, b / n_states, n_states, a, b))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "delta", "adaptive_frac", "nominal_frac", "n"])
        for r in rows:
            w.writerow([r.param, repr(r.delta), repr(r.adaptive_frac), repr(r.nominal_frac), r.n])


# ---------------------------------------------------------------- stability estimates
@dataclass
class ProbeConfig:
    """Settings for the empirical stability quantities."""

    region: tuple = ((-0.2, 0.2), (-0.5, 0.5), (-0.3, 0.3), (-1.0, 1.0))  # state box the estimates cover
    n_lipschitz: int = 6  # probe states for the predictor constant
    lipschitz_scales: tuple = (0.1, 0.25, 0.5)  # |delta theta| as a fraction of the sweep range
    n_eta: int = 2  # probe states for the disturbance tolerance
    eta_max: float = 5.0
    eta_resolution: float = 0.1
    eta_T: float = 4.0
    seed: int = 0


@dataclass
class StabilityEstimate:
    e_pi_sup: float
    e_grad_sup: float
    L_hat: float
    eta_hat: float
    epsilon: float
    theta_radius: np.ndarray  # per parameter, raw units
    n_val: int = 0
    n_lipschitz_probes: int = 0
    premise_met: bool = True
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "e_pi_sup": self.e_pi_sup,
            "e_grad_sup": self.e_grad_sup,
            "L_hat": self.L_hat,
            "eta_hat": self.eta_hat,
            "epsilon": self.epsilon,
            "theta_radius": [float(v) for v in self.theta_radius],
            "n_val": self.n_val,
            "n_lipschitz_probes": self.n_lipschitz_probes,
            "premise_met": self.premise_met,
            "note": self.note,
        }


def in_region(X, region) -> np.ndarray:
    lo, hi = np.array(region, dtype=float).T
    Xw = np.array(X, dtype=float)
    Xw[:, 2] = wrap_angle(Xw[:, 2])
    return np.all((Xw >= lo) & (Xw <= hi), axis=1)


def approximation_errors(pi_fn, grad_fn, X, u0, sens, theta_range):
    """Sup errors of both nets; the sensitivity error uses the norm dual to the range-scaled max norm."""
    r = np.asarray(theta_range, dtype=float)
    e_pi = np.abs(np.asarray(pi_fn(X), dtype=float).reshape(-1) - u0)
    e_grad = np.sum(np.abs(np.asarray(grad_fn(X), dtype=float) - sens) * r, axis=1)
    return float(np.max(e_pi, initial=0.0)), float(np.max(e_grad, initial=0.0))


def theta_radius(epsilon: float, e_grad_sup: float, L_hat: float, theta_range) -> np.ndarray:
    """Radius of the guaranteed parameter set per parameter (raw units)."""
    r = np.asarray(theta_range, dtype=float)
    if epsilon <= 0:
        return np.zeros_like(r)
    denom = e_grad_sup + L_hat
    return np.full_like(r, np.inf) if denom == 0 else epsilon / denom * r


def lipschitz_estimate(states, config: Config, probe: ProbeConfig, solver_cfg: SolverConfig = SolverConfig()):
    """Largest ``|u0 + S dtheta - u*_theta| / |dtheta|`` over active-set-stable probes."""
    r = np.asarray(config.theta_range, dtype=float)
    nom = config.theta_nom.as_array()
    worst, used = 0.0, 0
    for i, x0 in enumerate(states):
        nlp = build_nlp(x0, config.theta_nom, config.ocp, config.constants)
        try:
            sol = multistart_solve(nlp, solver_cfg, seed=[probe.seed, i])
            S = kkt_sensitivity(nlp, sol, r, solver_cfg)
        except (SolverFailure, RuntimeError):
            continue
        for j in range(5):
            for sgn in (1.0, -1.0):
                # continuation from the smallest step keeps the re-solves on one branch
                prev = sol
                for s in sorted(probe.lipschitz_scales):
                    dth = np.zeros(5)
                    dth[j] = sgn * s * r[j]
                    try:
                        pert = resolve(nlp, prev, nom + dth, solver_cfg)
                    except SolverFailure:
                        break
                    if active_set_changed(sol, pert):
                        break
                    err = abs(linear_predict(sol.u0, S, dth) - pert.u0)
                    worst = max(worst, err / s)  # |dtheta| in the range-scaled max norm is s
                    used += 1
                    prev = pert
    return worst, used


def eta_estimate(states, config: Config, probe: ProbeConfig, solver_cfg: SolverConfig = SolverConfig(),
                 crit: SuccessCriterion = SuccessCriterion()) -> float:
    """Largest constant input offset (both signs) the MPC tolerates from every probe state."""
    def ok(d):
        for i, x0 in enumerate(states):
            for sgn in (1.0, -1.0):
                cfg = SimConfig(x0=tuple(x0), theta_true=config.theta_nom, theta_ctrl=config.theta_nom,
                                T=probe.eta_T, input_offset=sgn * d)
                ep = simulate("mpc-oracle", cfg, config.constants, ocp=config.ocp, solver_cfg=solver_cfg,
                              crit=crit, seed=probe.seed + i)
                if not ep.report.success:
                    return False
        return True

    lo, hi = 0.0, probe.eta_max
    if not ok(lo):
        return 0.0
    if ok(hi):
        return hi
    while hi - lo > probe.eta_resolution:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        log.info("eta bisection: [%.3f, %.3f]", lo, hi)
    return lo


def stability_estimates(pi_fn, grad_fn, dataset_val, config: Config, probe: ProbeConfig = ProbeConfig(),
                        solver_cfg: SolverConfig = SolverConfig(), eta_hat: float | None = None,
                        L_hat: float | None = None) -> StabilityEstimate:
    """Empirical versions of the approximation errors, predictor constant and margin.

    ``pi_fn``/``grad_fn`` map a batch of states to the network outputs.  Only
    validation records inside ``probe.region`` count.  Precomputed ``eta_hat`` or
    ``L_hat`` can be passed in to skip the expensive probes.
    """
    mask = in_region(dataset_val.X, probe.region)
    if not mask.any():
        raise ValueError("no validation records inside the probe region")
    X = dataset_val.X[mask]
    e_pi, e_grad = approximation_errors(pi_fn, grad_fn, X, dataset_val.u0[mask], dataset_val.sens[mask],
                                        config.theta_range)
    rng = np.random.default_rng(probe.seed)
    n_lip = 0
    if L_hat is None:
        pick = X[rng.choice(len(X), size=min(probe.n_lipschitz, len(X)), replace=False)]
        L_hat, n_lip = lipschitz_estimate(pick, config, probe, solver_cfg)
    if eta_hat is None:
        pick = X[rng.choice(len(X), size=min(probe.n_eta, len(X)), replace=False)]
        eta_hat = eta_estimate(pick, config, probe, solver_cfg)
    eps = eta_hat - e_pi
    est = StabilityEstimate(e_pi, e_grad, float(L_hat), float(eta_hat), float(eps),
                            theta_radius(eps, e_grad, L_hat, config.theta_range), int(mask.sum()), n_lip)
    if eps <= 0:
        est.premise_met = False
        est.note = "premise unmet: approximation error exceeds the disturbance tolerance"
    return est
