"""SQP solver for the multiple-shooting NLP.

Each iteration restricts the QP subproblem to an orthonormal basis of the null
space of the linearized shooting defects, so it has as many variables as there are
inputs.  That QP is solved by the dual active-set method in :mod:`qp`.  Globalization
is an l1 merit line search with a second-order correction; infeasible linearizations
switch to an elastic QP, and a forward rollout of the current inputs serves as the
feasibility restoration for the defects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .dynamics import wrap_angle
from .ocp import ParametricNlp
from .qp import INFEASIBLE, OPTIMAL, QpError, solve_qp

log = logging.getLogger(__name__)

_DELTAS = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4)


class SolverFailure(RuntimeError):
    reason = "failure"


class MaxIterError(SolverFailure):
    reason = "max_iter"


class InfeasibleError(SolverFailure):
    reason = "infeasible"


class SingularError(SolverFailure):
    reason = "singular"


@dataclass(frozen=True)
class SolverConfig:
    tol_kkt: float = 1e-8
    tol_act: float = 1e-6
    max_iter: int = 200
    max_delta: float = 1e-2
    n_multistart: int = 10
    hessian_mode: str = "exact"  # or "gauss-newton"
    fd_step: float = 1e-5
    armijo: float = 1e-4
    backtrack: float = 0.5
    elastic_weight: float = 1e3

    def __post_init__(self):
        if not self.tol_kkt > 0:
            raise ValueError("tol_kkt must be positive")
        if self.n_multistart < 1:
            raise ValueError("n_multistart must be >= 1")
        if self.hessian_mode not in ("exact", "gauss-newton"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")


@dataclass(frozen=True)
class NlpSolution:
    z_star: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    cost: float
    kkt_residual: float
    active_set: tuple
    weakly_active: tuple
    iterations: int
    trace: tuple = field(default=(), repr=False, compare=False)

    @property
    def u0(self) -> float:
        return float(self.z_star[0])


def kkt_parts(ev, lam, mu) -> dict:
    stat = ev.grad + ev.J_eq.T @ lam + ev.J_in.T @ mu
    return {
        "stationarity": float(np.max(np.abs(stat))),
        "primal": float(max(np.max(np.abs(ev.c_eq), initial=0.0), np.max(ev.g_in, initial=0.0), 0.0)),
        "dual": float(max(-np.min(mu, initial=0.0), 0.0)),
        "complementarity": float(np.max(np.abs(mu * ev.g_in), initial=0.0)),
    }


def _violation(c_eq, g_in) -> float:
    return float(np.sum(np.abs(c_eq)) + np.sum(np.maximum(g_in, 0.0)))


class _Step:
    __slots__ = ("d", "lam", "mu", "elastic", "delta", "du", "lin_viol", "qp_active", "H")


def project_blocks(blocks, floor: float = 1e-6) -> np.ndarray:
    """Clip the eigenvalues of every stage block from below (convexification)."""
    w, V = np.linalg.eigh(blocks)
    w = np.maximum(w, floor)
    return np.einsum("kij,kj,klj->kil", V, w, V)


def _regularization(Hr: np.ndarray) -> float:
    w = np.linalg.eigvalsh(Hr)
    floor = 1e-10 * max(1.0, abs(w[-1]))
    for delta in _DELTAS:
        if w[0] + delta > floor:
            return delta
    raise SingularError("reduced Hessian could not be regularized")


def _polish(Hr, gr, C, b, active, tol=1e-10):
    """Equality-constrained QP on ``active`` with the unregularized Hessian.

    Returns ``(du, multipliers)`` when this is a valid KKT point of the original QP
    with positive curvature on the active null space, otherwise ``None``.
    """
    n = Hr.shape[0]
    CA = C[active]
    q = CA.shape[0]
    if q:
        Q, _ = np.linalg.qr(CA.T, mode="complete")
        Zs = Q[:, q:]
    else:
        Zs = np.eye(n)
    if Zs.shape[1] and np.linalg.eigvalsh(Zs.T @ Hr @ Zs)[0] <= 1e-10 * max(1.0, np.abs(Hr).max()):
        return None
    K = np.zeros((n + q, n + q))
    K[:n, :n] = Hr
    K[:n, n:] = -CA.T
    K[n:, :n] = CA
    rhs = np.concatenate([-gr, b[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    du, w = sol[:n], sol[n:]
    if q and w.min() < -tol:
        return None
    slack = C @ du - b
    if slack.min(initial=0.0) < -tol * max(1.0, np.abs(b).max(initial=0.0)):
        return None
    mult = np.zeros(C.shape[0])
    mult[active] = np.maximum(w, 0.0)
    return du, mult


class _Iteration:
    """Orthonormal null-space basis of the defect Jacobian and its range solves.

    Eliminating the states through the state block of the Jacobian (condensing)
    would be ill-conditioned because the upright linearization is unstable over
    the horizon; a QR factorization of ``J_eq^T`` is not.
    """

    def __init__(self, nlp: ParametricNlp, ev):
        self.nlp = nlp
        self.ev = ev
        Q, R = sla.qr(ev.J_eq.T, mode="full")
        n_eq = nlp.n_eq
        self.R = R[:n_eq]
        diag = np.abs(np.diag(self.R))
        if diag.min() <= 1e-12 * max(1.0, diag.max()):
            raise SingularError("defect Jacobian is rank deficient")
        self.Y = Q[:, :n_eq]
        self.Z = Q[:, n_eq:]

    def particular(self, c_eq) -> np.ndarray:
        """Minimum-norm ``d`` with ``J_eq d = -c_eq``."""
        return -self.Y @ sla.solve_triangular(self.R, c_eq, trans="T")

    def multipliers_eq(self, v) -> np.ndarray:
        """Least-squares solution of ``J_eq^T lam = -v``."""
        return -sla.solve_triangular(self.R, self.Y.T @ v)


def _qp_step(it: _Iteration, blocks, cfg: SolverConfig, elastic_rows: np.ndarray) -> _Step:
    nlp, ev = it.nlp, it.ev
    Z = it.Z
    dp = it.particular(ev.c_eq)
    C = -ev.J_in @ Z
    b = ev.g_in + ev.J_in @ dp
    H = nlp.assemble_hessian(blocks)
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    try:
        delta = _regularization(Hr)
    except SingularError:
        delta = np.inf
    if delta > cfg.max_delta:
        # strongly indefinite far from a solution: convexify stage blocks instead
        H = nlp.assemble_hessian(project_blocks(blocks))
        Hr = Z.T @ H @ Z
        Hr = 0.5 * (Hr + Hr.T)
        delta = _regularization(Hr)
    gr = Z.T @ (ev.grad + H @ dp)
    G = Hr + delta * np.eye(Hr.shape[0])
    step = _Step()
    step.elastic = False
    try:
        res = solve_qp(G, gr, C, b)
    except QpError as exc:
        raise SingularError(str(exc)) from None
    if res.status == OPTIMAL:
        du, mult = res.x, res.multipliers
        if delta > 0:
            polished = _polish(Hr, gr, C, b, res.active)
            if polished is not None:
                du, mult = polished
                delta = 0.0
        step.qp_active = tuple(res.active)
    elif res.status == INFEASIBLE:
        # elastic QP: one shared slack on the state-dependent rows
        n = Hr.shape[0]
        Ge = np.zeros((n + 1, n + 1))
        Ge[:n, :n] = G
        Ge[n, n] = 1e-4
        ae = np.concatenate([gr, [cfg.elastic_weight]])
        Ce = np.zeros((C.shape[0] + 1, n + 1))
        Ce[:-1, :n] = C
        Ce[:-1, n] = elastic_rows.astype(float)
        Ce[-1, n] = 1.0
        be = np.concatenate([b, [0.0]])
        res = solve_qp(Ge, ae, Ce, be)
        if res.status != OPTIMAL:
            raise InfeasibleError("elastic QP failed")
        du = res.x[:n]
        mult = res.multipliers[:-1]
        step.elastic = res.x[n] > 1e-12
        step.qp_active = tuple(a for a in res.active if a < C.shape[0])
    else:
        raise MaxIterError("QP iteration limit")
    d = Z @ du + dp
    v = ev.grad + H @ d + ev.J_in.T @ mult
    step.d = d
    step.du = du
    step.mu = mult
    step.lam = it.multipliers_eq(v)
    step.delta = delta
    step.lin_viol = float(np.sum(np.maximum(ev.g_in + ev.J_in @ d, 0.0)))
    step.H = H
    return step


def _rollout_restore(nlp: ParametricNlp, z) -> np.ndarray:
    U, _ = nlp.split(z)
    return nlp.join(U, nlp.rollout(U))


def solve(nlp: ParametricNlp, z_init, cfg: SolverConfig = SolverConfig()) -> NlpSolution:
    """Run SQP from ``z_init``; raises a :class:`SolverFailure` subclass on failure."""
    z = np.array(z_init, dtype=float).reshape(nlp.nz)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial guess must be finite")
    lam = np.zeros(nlp.n_eq)
    rho = 1.0
    elastic_rows = np.zeros(nlp.n_in, dtype=bool)
    elastic_rows[2 * nlp.n_u:] = True
    trace = []
    elastic_streak = 0
    restored_at = -10
    for k in range(cfg.max_iter):
        ev = nlp.eval(z)
        blocks = nlp.hessian_blocks(z, lam, cfg.fd_step, cfg.hessian_mode)
        if not np.all(np.isfinite(blocks)):
            raise SingularError(f"non-finite Hessian at iteration {k}")
        it = _Iteration(nlp, ev)
        step = _qp_step(it, blocks, cfg, elastic_rows)
        H = step.H
        parts = kkt_parts(ev, step.lam, step.mu)
        res = max(parts.values())
        viol0 = _violation(ev.c_eq, ev.g_in)
        trace.append((k, ev.V, res, viol0, rho, step.delta))
        log.debug("iter %d V=%.6g kkt=%.3g viol=%.3g rho=%.3g delta=%.0e elastic=%s |d|=%.3g",
                  k, ev.V, res, viol0, rho, step.delta, step.elastic, np.max(np.abs(step.d)))
        if res <= cfg.tol_kkt and not step.elastic:
            return _make_solution(nlp, z, step.lam, step.mu, ev.V, res, k, cfg, trace)

        if step.elastic:
            elastic_streak += 1
            if elastic_streak > 25:
                raise InfeasibleError("linearized constraints stay infeasible")
        else:
            elastic_streak = 0

        # penalty parameter
        mult_max = max(np.max(np.abs(step.lam), initial=0.0), np.max(step.mu, initial=0.0))
        rho = 1.1 * mult_max + 1e-3
        d = step.d
        dphi = float(ev.grad @ d) + rho * (step.lin_viol - viol0)
        if dphi >= 0:
            denom = viol0 - step.lin_viol
            if denom > 1e-14:
                rho = max(rho, 2.0 * (float(ev.grad @ d) + 0.5 * float(d @ H @ d)) / denom)
                dphi = float(ev.grad @ d) + rho * (step.lin_viol - viol0)
        dphi = min(dphi, -1e-16)
        phi0 = ev.V + rho * viol0

        def merit(zt):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    phi = nlp.cost(zt) + rho * _violation(nlp.equality(zt), nlp.inequality(zt))
            except (FloatingPointError, ArithmeticError):
                return np.inf
            return phi if np.isfinite(phi) else np.inf

        alpha = 1.0
        z_new = None
        phi1 = merit(z + d)
        if np.isfinite(phi1) and phi1 <= phi0 + cfg.armijo * dphi:
            z_new = z + d
        else:
            # second-order correction of the defects
            c_trial = nlp.equality(z + d)
            if np.all(np.isfinite(c_trial)):
                z_soc = z + d + it.particular(c_trial)
                if merit(z_soc) <= phi0 + cfg.armijo * dphi:
                    z_new = z_soc
            while z_new is None and alpha > 1e-10:
                alpha *= cfg.backtrack
                zt = z + alpha * d
                if merit(zt) <= phi0 + cfg.armijo * alpha * dphi:
                    z_new = zt
        if z_new is None:
            if k - restored_at <= 2:
                raise InfeasibleError("line search and restoration failed")
            z_new = _rollout_restore(nlp, z)
            restored_at = k
        if not np.all(np.isfinite(z_new)):
            raise SingularError(f"non-finite iterate at iteration {k}")
        lam = step.lam if alpha == 1.0 else lam + alpha * (step.lam - lam)
        z = z_new
    raise MaxIterError(f"no convergence in {cfg.max_iter} iterations")


def _make_solution(nlp, z, lam, mu, V, res, k, cfg, trace) -> NlpSolution:
    g = nlp.inequality(z)
    active = np.flatnonzero(g >= -cfg.tol_act)
    weak = tuple(int(i) for i in active if mu[i] < cfg.tol_act)
    z = z.copy()
    z.setflags(write=False)
    return NlpSolution(
        z_star=z,
        lambda_eq=lam.copy(),
        mu_ineq=mu.copy(),
        cost=float(V),
        kkt_residual=float(res),
        active_set=tuple(int(i) for i in active),
        weakly_active=weak,
        iterations=k,
        trace=tuple(trace),
    )


def _hermite(p0, v0, p1, T, t):
    s = np.minimum(t / T, 1.0)
    pos = (2 * s**3 - 3 * s**2 + 1) * p0 + (s**3 - 2 * s**2 + s) * T * v0 + (3 * s**2 - 2 * s**3) * p1
    vel = ((6 * s**2 - 6 * s) * (p0 - p1) / T + (3 * s**2 - 4 * s + 1) * v0) * (t < T)
    return pos, vel


def hermite_guess(nlp: ParametricNlp, t_swing: float, turns: int = 0) -> np.ndarray:
    """Smooth state path from ``x0`` to upright rest within ``t_swing`` seconds.

    Cart position and angle follow cubic Hermite curves that match the initial
    velocities.  ``turns`` picks the upright copy ``2*pi*turns`` away from the
    nearest one (i.e. the swing direction and number of rotations).  Inputs are
    zero; the defects are left for the solver to close.
    """
    x0 = nlp.x0
    t = nlp.cfg.dt_ctrl * np.arange(nlp.N + 1)
    target = x0[2] - wrap_angle(x0[2]) + 2 * np.pi * turns
    y, dy = _hermite(x0[0], x0[1], 0.0, t_swing, t)
    a, da = _hermite(x0[2], x0[3], target, t_swing, t)
    return nlp.join(np.zeros(nlp.n_u), np.column_stack([y, dy, a, da]))


START_GRID = [(ts, turns) for ts in (0.6, 0.9, 1.3, 1.8) for turns in (0, -1, 1)]


def start_points(nlp: ParametricNlp, n: int, seed) -> list[np.ndarray]:
    """Initial guesses: zero-input rollout, then a grid of state paths, then random ones.

    The grid covers swing durations and both swing directions; guesses beyond the
    grid draw duration and direction at random from ``seed``.
    """
    starts = [nlp.initial_guess(np.zeros(nlp.n_u))]
    for ts, turns in START_GRID[: max(n - 1, 0)]:
        starts.append(hermite_guess(nlp, ts, turns))
    rng = np.random.default_rng(seed)
    for _ in range(n - len(starts)):
        starts.append(hermite_guess(nlp, rng.uniform(0.4, 2.5), int(rng.choice([-1, 0, 1]))))
    return starts[:n]


def random_input_start(nlp: ParametricNlp, rng) -> np.ndarray:
    """Uniform random inputs within bounds, states filled by forward rollout."""
    return nlp.initial_guess(rng.uniform(nlp.cfg.u_min, nlp.cfg.u_max, nlp.n_u))


def shifted_guess(nlp: ParametricNlp, prev: ParametricNlp, z_prev, dt: float) -> np.ndarray:
    """Warm start for ``nlp`` from the plan ``z_prev`` of ``prev``, advanced by ``dt``.

    Inputs are resampled as the held values at the shifted times; states are
    linearly interpolated between knots and the first knot is replaced by
    ``nlp.x0``.
    """
    U, X = prev.split(np.asarray(z_prev, dtype=float))
    h = prev.cfg.dt_ctrl
    t = dt + h * np.arange(nlp.N + 1)
    # the epsilon keeps knots that land exactly on a boundary from rounding down
    Us = U[np.minimum(np.floor(t / h + 1e-9).astype(int), prev.N)]
    tk = h * np.arange(prev.N + 1)
    Xs = np.column_stack([np.interp(t, tk, X[:, i]) for i in range(4)])
    Xs[0] = nlp.x0
    return nlp.join(Us, Xs)


def multistart_solve(nlp: ParametricNlp, cfg: SolverConfig = SolverConfig(), seed=0,
                     extra_starts=()) -> NlpSolution:
    """Best successful solution over ``cfg.n_multistart`` starts (plus ``extra_starts``)."""
    best = None
    errors = []
    for z0 in list(extra_starts) + start_points(nlp, cfg.n_multistart, seed):
        try:
            sol = solve(nlp, z0, cfg)
        except SolverFailure as exc:
            errors.append(exc)
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        kinds = {type(e) for e in errors}
        cls = kinds.pop() if len(kinds) == 1 else SolverFailure
        raise cls(f"all {len(errors)} starts failed: " + "; ".join(str(e) for e in errors[:3]))
    return best


# ---------------------------------------------------------------- verification
def _complex_lagrangian_grad(nlp: ParametricNlp, z, lam) -> np.ndarray:
    """Gradient of ``V + lam^T c`` by complex-step differentiation.

    Uses the plain numpy dynamics in complex arithmetic, so it shares no code with
    the hand-written chain rule in the transcription.
    """
    from .dynamics import energies, step_rk4

    cfg, c = nlp.cfg, nlp.consts
    th = nlp.theta.as_array()
    h = 1e-30
    Zc = np.tile(z.astype(complex), (nlp.nz, 1)) + 1j * h * np.eye(nlp.nz)
    U = Zc[:, : nlp.n_u]
    X = np.empty((nlp.nz, nlp.N + 1, 4), dtype=complex)
    X[:, 0] = nlp.x0
    X[:, 1:] = Zc[:, nlp.n_u:].reshape(nlp.nz, nlp.N, 4)
    e_kin, e_pot = energies(X, th, c)
    V = np.sum(e_kin - e_pot + cfg.w_y * X[..., 0] ** 2 + cfg.w_u * U**2, axis=1)
    Xs = X[:, :-1]
    Us = U[:, :-1]
    hstep = cfg.dt_ctrl / cfg.n_substeps
    for _ in range(cfg.n_substeps):
        Xs = step_rk4(Xs, Us, th, c, hstep)
    defects = (Xs - X[:, 1:]).reshape(nlp.nz, -1)
    L = V + defects @ lam
    return L.imag / h


def kkt_residual(nlp: ParametricNlp, sol: NlpSolution) -> float:
    """Recompute the KKT residual of ``sol`` from scratch (max-norm of all parts)."""
    z = np.asarray(sol.z_star, dtype=float)
    mu = np.asarray(sol.mu_ineq, dtype=float)
    lam = np.asarray(sol.lambda_eq, dtype=float)
    c_eq = nlp.equality(z)
    g_in = nlp.inequality(z)
    grad_in = np.zeros(nlp.nz)
    # inequality rows are +-unit vectors on single coordinates
    np.add.at(grad_in, np.argmax(nlp.J_in != 0, axis=1), nlp.J_in[np.arange(nlp.n_in),
                                                                   np.argmax(nlp.J_in != 0, axis=1)] * mu)
    stat = _complex_lagrangian_grad(nlp, z, lam) + grad_in
    return float(max(
        np.max(np.abs(stat)),
        np.max(np.abs(c_eq), initial=0.0),
        np.max(g_in, initial=0.0),
        -np.min(mu, initial=0.0),
        np.max(np.abs(mu * g_in), initial=0.0),
    ))
