"""Parametric sensitivities of a converged NLP solution.

The KKT conditions restricted to the equality and strictly active inequality
constraints are differentiated w.r.t. the model parameters (implicit function
theorem).  Mixed second derivatives are taken by central differences of the
exact Lagrangian gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .config import CartpoleParams
from .solver import NlpSolution, SolverConfig, SolverFailure, solve

COND_LIMIT = 1e12


class SensitivityError(RuntimeError):
    pass


class SingularKktError(SensitivityError):
    """KKT matrix numerically singular (LICQ or second-order condition fails)."""


class WeaklyActiveError(SensitivityError):
    """An active constraint has a (near) zero multiplier."""


@dataclass(frozen=True)
class SensitivityMatrix:
    du0_dtheta: np.ndarray  # (1, n_theta)
    full_dz_dtheta: np.ndarray  # (nz, n_theta)
    valid: bool
    cond: float = np.nan

    @property
    def row(self) -> np.ndarray:
        return self.du0_dtheta[0]


def _theta_array(theta) -> np.ndarray:
    if isinstance(theta, CartpoleParams):
        return theta.as_array()
    return np.atleast_1d(np.asarray(theta, dtype=float))


def _like(theta, arr):
    """Rebuild a parameter object of the same kind as ``theta`` from an array."""
    if isinstance(theta, CartpoleParams):
        return CartpoleParams.from_array(arr)
    return arr


def _strict_active(sol: NlpSolution, tol_act: float) -> np.ndarray:
    mu = np.asarray(sol.mu_ineq)
    return np.array([i for i in sol.active_set if mu[i] >= tol_act], dtype=int)


def kkt_matrix(nlp, sol: NlpSolution, cfg: SolverConfig = SolverConfig()):
    """Reduced KKT matrix and the stacked active Jacobian at ``sol``."""
    z = np.asarray(sol.z_star, dtype=float)
    ev = nlp.eval(z)
    H = nlp.lagrangian_hessian(z, np.asarray(sol.lambda_eq), fd_step=cfg.fd_step)
    act = _strict_active(sol, cfg.tol_act)
    J = np.vstack([ev.J_eq, ev.J_in[act]])
    m = J.shape[0]
    K = np.block([[H, J.T], [J, np.zeros((m, m))]])
    return K, act


def kkt_sensitivity(nlp, sol: NlpSolution, theta_range, cfg: SolverConfig = SolverConfig(),
                    h_rel: float = 1e-6, strict: bool = True) -> SensitivityMatrix:
    """Derivative of the optimal decision vector w.r.t. ``nlp.theta``.

    ``theta_range`` scales the finite-difference step per parameter
    (``h_j = h_rel * theta_range[j]``).  With ``strict`` a weakly active
    constraint raises :class:`WeaklyActiveError`; otherwise the result is
    returned with ``valid=False``.
    """
    if sol.weakly_active and strict:
        raise WeaklyActiveError(f"weakly active constraints {list(sol.weakly_active)}")
    z = np.asarray(sol.z_star, dtype=float)
    lam = np.asarray(sol.lambda_eq, dtype=float)
    mu = np.asarray(sol.mu_ineq, dtype=float)
    K, act = kkt_matrix(nlp, sol, cfg)

    th0 = _theta_array(nlp.theta)
    steps = h_rel * np.asarray(theta_range, dtype=float).reshape(th0.shape)
    n_eq = lam.size
    rhs = np.zeros((K.shape[0], th0.size))
    for j, h in enumerate(steps):
        tp, tm = th0.copy(), th0.copy()
        tp[j] += h
        tm[j] -= h
        tp, tm = _like(nlp.theta, tp), _like(nlp.theta, tm)
        rhs[: z.size, j] = (nlp.lagrangian_grad(z, lam, mu, tp) - nlp.lagrangian_grad(z, lam, mu, tm)) / (2 * h)
        rhs[z.size: z.size + n_eq, j] = (nlp.equality(z, tp) - nlp.equality(z, tm)) / (2 * h)
        # the inequality constraints do not depend on theta

    # row/column equilibration before the condition estimate
    scale = 1.0 / np.sqrt(np.maximum(np.max(np.abs(K), axis=1), 1e-300))
    Ks = K * scale[:, None] * scale[None, :]
    lu, piv = lu_factor(Ks, check_finite=True)
    rcond, info = dgecon(lu, np.linalg.norm(Ks, 1), norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if not np.isfinite(cond) or cond > COND_LIMIT or info != 0:
        raise SingularKktError(f"KKT condition estimate {cond:.3e} (active set size {act.size})")
    dsol = -lu_solve((lu, piv), rhs * scale[:, None]) * scale[:, None]
    dz = dsol[: z.size]
    return SensitivityMatrix(du0_dtheta=dz[:1].copy(), full_dz_dtheta=dz, valid=not sol.weakly_active,
                             cond=float(cond))


def linear_predict(u0_nom: float, S: SensitivityMatrix, dtheta) -> float:
    """First-order prediction of the optimal first input after a parameter change."""
    return float(u0_nom + S.row @ np.asarray(dtheta, dtype=float))


def active_set_changed(sol_nom: NlpSolution, sol_pert: NlpSolution) -> bool:
    return set(sol_nom.active_set) != set(sol_pert.active_set)


def resolve(nlp, sol: NlpSolution, theta, cfg: SolverConfig = SolverConfig()) -> NlpSolution:
    """Re-solve at another parameter value, warm-started from ``sol`` (same local branch)."""
    return solve(nlp.with_theta(_like(nlp.theta, _theta_array(theta))), sol.z_star, cfg)


def fd_sensitivity(nlp, sol: NlpSolution, theta_range, cfg: SolverConfig = SolverConfig(),
                   h_rel: float = 1e-4):
    """Central differences of re-solved ``u*_0`` per parameter.

    Returns ``(row, stable)`` where ``stable`` is False if any re-solve changed the
    active set or failed (then the corresponding entries are nan).
    """
    th0 = _theta_array(nlp.theta)
    steps = h_rel * np.asarray(theta_range, dtype=float).reshape(th0.shape)
    row = np.full(th0.size, np.nan)
    stable = True
    for j, h in enumerate(steps):
        u = []
        for sgn in (1.0, -1.0):
            th = th0.copy()
            th[j] += sgn * h
            try:
                s = resolve(nlp, sol, th, cfg)
            except SolverFailure:
                stable = False
                break
            if active_set_changed(sol, s):
                stable = False
            u.append(s.u0)
        if len(u) == 2:
            row[j] = (u[0] - u[1]) / (2 * h)
    return row, stable


def predictor_residuals(nlp, sol: NlpSolution, S: SensitivityMatrix, dtheta, n_halvings: int = 5,
                        cfg: SolverConfig = SolverConfig()):
    """Prediction errors ``|u0 + S dtheta_k - u*(theta + dtheta_k)|`` for ``dtheta_k = 2^-k dtheta``.

    The perturbed problems are solved from the smallest step outwards, each warm
    started from the previous solution, so the sequence follows one branch.
    Returns ``(scales, residuals, stable)``; ``stable`` is False if a re-solve
    failed or changed the active set.
    """
    th0 = _theta_array(nlp.theta)
    dtheta = np.asarray(dtheta, dtype=float)
    scales = 2.0 ** -np.arange(n_halvings, -1, -1)
    res = []
    prev = sol
    for s in scales:
        try:
            pert = resolve(nlp, prev, th0 + s * dtheta, cfg)
        except SolverFailure:
            return scales[::-1], np.array(res[::-1]), False
        if active_set_changed(sol, pert):
            return scales[::-1], np.array(res[::-1]), False
        res.append(abs(linear_predict(sol.u0, S, s * dtheta) - pert.u0))
        prev = pert
    return scales[::-1], np.array(res[::-1]), True
