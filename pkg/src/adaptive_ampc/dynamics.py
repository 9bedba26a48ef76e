"""Parametric cartpole model.

State ``x = [y, y_dot, alpha, alpha_dot]`` with ``alpha = 0`` upright, input ``u``
is the motor voltage and the cart force is ``F = C1*y_dot + C2*u``.  The adjustable
parameters are ``theta = [m_add, M, C1, C2, C3]``; the pendulum mass is
``m = m_rod + m_add``.

The numba kernels at the bottom are the hot path used by the OCP transcription and
by the closed-loop simulator; the numpy functions are the readable public API.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .config import CartpoleParams, FixedConstants


class SingularMassMatrixError(ArithmeticError):
    pass


def _arr(v) -> np.ndarray:
    # keeps complex input complex (used for complex-step differentiation)
    v = np.asarray(v)
    return v if np.iscomplexobj(v) else v.astype(float, copy=False)


def _theta_array(theta) -> np.ndarray:
    if isinstance(theta, CartpoleParams):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def _split(x, theta, c: FixedConstants):
    x = _arr(x)
    th = _theta_array(theta)
    m = c.m_rod + th[..., 0]
    return x, th, m


def mass_matrix(alpha, theta, c: FixedConstants) -> np.ndarray:
    """Symmetric mass matrix of the generalized coordinates ``q = (y, alpha)``."""
    th = _theta_array(theta)
    alpha = np.asarray(alpha, dtype=float)
    m = c.m_rod + th[..., 0]
    coupling = m * c.l * np.cos(alpha)
    out = np.empty(np.broadcast(alpha, m).shape + (2, 2))
    out[..., 0, 0] = th[..., 1] + m
    out[..., 0, 1] = coupling
    out[..., 1, 0] = coupling
    out[..., 1, 1] = m * c.l**2 + c.J
    return out


def accelerations(x, u, theta, c: FixedConstants):
    """Return ``(y_ddot, alpha_ddot)`` from the Euler-Lagrange equations.

    Broadcasts over leading dimensions of ``x`` (last axis of size 4), ``u`` and
    ``theta`` (last axis of size 5).
    """
    x, th, m = _split(x, theta, c)
    u = _arr(u)
    y_dot, alpha, alpha_dot = x[..., 1], x[..., 2], x[..., 3]
    M, C1, C2, C3 = th[..., 1], th[..., 2], th[..., 3], th[..., 4]
    s, co = np.sin(alpha), np.cos(alpha)
    # rows ordered as: pendulum equation, cart equation
    a11 = m * c.l * co
    a12 = m * c.l**2 + c.J
    a21 = M + m
    a22 = m * c.l * co
    r1 = m * c.g * c.l * s - C3 * alpha_dot
    r2 = C1 * y_dot + C2 * u + m * c.l * s * alpha_dot**2
    det = a11 * a22 - a12 * a21
    if np.any(det == 0) or not np.all(np.isfinite(det)):
        raise SingularMassMatrixError("cartpole mass matrix is singular")
    y_ddot = (r1 * a22 - a12 * r2) / det
    alpha_ddot = (a11 * r2 - a21 * r1) / det
    return y_ddot, alpha_ddot


def state_derivative(x, u, theta, c: FixedConstants) -> np.ndarray:
    x = _arr(x)
    y_ddot, alpha_ddot = accelerations(x, u, theta, c)
    return np.stack(np.broadcast_arrays(x[..., 1], y_ddot, x[..., 3], alpha_ddot), axis=-1)


def step_rk4(x, u, theta, c: FixedConstants, dt: float) -> np.ndarray:
    """One classical RK4 step with the input held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = _arr(x)
    k1 = state_derivative(x, u, theta, c)
    k2 = state_derivative(x + 0.5 * dt * k1, u, theta, c)
    k3 = state_derivative(x + 0.5 * dt * k2, u, theta, c)
    k4 = state_derivative(x + dt * k3, u, theta, c)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def energies(x, theta, c: FixedConstants):
    """Kinetic and potential energy; ``E_pot`` is zero with the rod horizontal."""
    x, th, m = _split(x, theta, c)
    y_dot, alpha, alpha_dot = x[..., 1], x[..., 2], x[..., 3]
    e_kin = (
        0.5 * (th[..., 1] + m) * y_dot**2
        + m * c.l * y_dot * alpha_dot * np.cos(alpha)
        + 0.5 * (m * c.l**2 + c.J) * alpha_dot**2
    )
    e_pot = m * c.g * c.l * np.cos(alpha)
    return e_kin, e_pot


def wrap_angle(alpha):
    """Map angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(alpha, dtype=float) + np.pi, 2 * np.pi) - np.pi


# --------------------------------------------------------------------------- kernels
# ``c`` is FixedConstants.as_array() = [m_rod, l, J, g]; ``th`` is theta as array.


@njit(cache=True)
def _rhs(x, u, th, c, out):
    m = c[0] + th[0]
    l, J, g = c[1], c[2], c[3]
    s = np.sin(x[2])
    co = np.cos(x[2])
    a11 = m * l * co
    a12 = m * l * l + J
    a21 = th[1] + m
    r1 = m * g * l * s - th[4] * x[3]
    r2 = th[2] * x[1] + th[3] * u + m * l * s * x[3] * x[3]
    det = a11 * a11 - a12 * a21
    out[0] = x[1]
    out[1] = (r1 * a11 - a12 * r2) / det
    out[2] = x[3]
    out[3] = (a11 * r2 - a21 * r1) / det


@njit(cache=True)
def _rhs_jac(x, u, th, c, out, jac):
    """State derivative and its Jacobian w.r.t. ``[y, y_dot, alpha, alpha_dot, u]``."""
    m = c[0] + th[0]
    l, J, g = c[1], c[2], c[3]
    C1, C2, C3 = th[2], th[3], th[4]
    s = np.sin(x[2])
    co = np.cos(x[2])
    ad = x[3]
    a11 = m * l * co
    a12 = m * l * l + J
    a21 = th[1] + m
    r1 = m * g * l * s - C3 * ad
    r2 = C1 * x[1] + C2 * u + m * l * s * ad * ad
    det = a11 * a11 - a12 * a21
    n1 = r1 * a11 - a12 * r2
    n2 = a11 * r2 - a21 * r1
    inv = 1.0 / det
    out[0] = x[1]
    out[1] = n1 * inv
    out[2] = ad
    out[3] = n2 * inv

    for i in range(4):
        for j in range(5):
            jac[i, j] = 0.0
    jac[0, 1] = 1.0
    jac[2, 3] = 1.0
    # d/d alpha
    da11 = -m * l * s
    ddet = 2.0 * a11 * da11
    dr1 = m * g * l * co
    dr2 = m * l * co * ad * ad
    dn1 = dr1 * a11 + r1 * da11 - a12 * dr2
    dn2 = da11 * r2 + a11 * dr2 - a21 * dr1
    jac[1, 2] = (dn1 * det - n1 * ddet) * inv * inv
    jac[3, 2] = (dn2 * det - n2 * ddet) * inv * inv
    # d/d y_dot
    jac[1, 1] = -a12 * C1 * inv
    jac[3, 1] = a11 * C1 * inv
    # d/d alpha_dot
    dr2 = 2.0 * m * l * s * ad
    jac[1, 3] = (-C3 * a11 - a12 * dr2) * inv
    jac[3, 3] = (a11 * dr2 + a21 * C3) * inv
    # d/d u
    jac[1, 4] = -a12 * C2 * inv
    jac[3, 4] = a11 * C2 * inv


@njit(cache=True)
def _rk4_shoot(x0, u, th, c, h, nsub, xn):
    """Integrate ``nsub`` RK4 substeps of length ``h``; result written to ``xn``."""
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    tmp = np.empty(4)
    for i in range(4):
        xn[i] = x0[i]
    for _ in range(nsub):
        _rhs(xn, u, th, c, k1)
        for i in range(4):
            tmp[i] = xn[i] + 0.5 * h * k1[i]
        _rhs(tmp, u, th, c, k2)
        for i in range(4):
            tmp[i] = xn[i] + 0.5 * h * k2[i]
        _rhs(tmp, u, th, c, k3)
        for i in range(4):
            tmp[i] = xn[i] + h * k3[i]
        _rhs(tmp, u, th, c, k4)
        for i in range(4):
            xn[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _rk4_shoot_jac(x0, u, th, c, h, nsub, xn, S):
    """As ``_rk4_shoot`` and also the 4x5 sensitivity ``S = d xn / d(x0, u)``."""
    k = np.empty((4, 4))
    K = np.empty((4, 4, 5))
    jac = np.empty((4, 5))
    X = np.empty(4)
    SX = np.empty((4, 5))
    for i in range(4):
        xn[i] = x0[i]
        for j in range(5):
            S[i, j] = 1.0 if i == j else 0.0
    coef = (0.0, 0.5, 0.5, 1.0)
    for _ in range(nsub):
        for stage in range(4):
            a = coef[stage] * h
            if stage == 0:
                for i in range(4):
                    X[i] = xn[i]
                    for j in range(5):
                        SX[i, j] = S[i, j]
            else:
                for i in range(4):
                    X[i] = xn[i] + a * k[stage - 1, i]
                    for j in range(5):
                        SX[i, j] = S[i, j] + a * K[stage - 1, i, j]
            _rhs_jac(X, u, th, c, k[stage], jac)
            for i in range(4):
                for j in range(5):
                    acc = 0.0
                    for q in range(4):
                        acc += jac[i, q] * SX[q, j]
                    if j == 4:
                        acc += jac[i, 4]
                    K[stage, i, j] = acc
        for i in range(4):
            xn[i] += h / 6.0 * (k[0, i] + 2.0 * k[1, i] + 2.0 * k[2, i] + k[3, i])
            for j in range(5):
                S[i, j] += h / 6.0 * (K[0, i, j] + 2.0 * K[1, i, j] + 2.0 * K[2, i, j] + K[3, i, j])


@njit(cache=True)
def _simulate_zoh(X, U, TH, c, h, nsub):
    """Advance a batch of states ``X`` (B x 4) by ``nsub`` RK4 steps of ``h`` in place."""
    xn = np.empty(4)
    for b in range(X.shape[0]):
        _rk4_shoot(X[b], U[b], TH[b], c, h, nsub, xn)
        for i in range(4):
            X[b, i] = xn[i]


def shoot(x0, u, theta, c: FixedConstants, dt: float, n_substeps: int = 1) -> np.ndarray:
    """Integrate ``n_substeps`` RK4 steps spanning ``dt`` with constant input."""
    xn = np.empty(4)
    _rk4_shoot(np.asarray(x0, dtype=float), float(u), _theta_array(theta), c.as_array(),
               dt / n_substeps, n_substeps, xn)
    return xn


def shoot_with_jacobian(x0, u, theta, c: FixedConstants, dt: float, n_substeps: int = 1):
    """Return ``(x_next, dx_next/dx0 (4x4), dx_next/du (4,))``."""
    xn = np.empty(4)
    S = np.empty((4, 5))
    _rk4_shoot_jac(np.asarray(x0, dtype=float), float(u), _theta_array(theta), c.as_array(),
                   dt / n_substeps, n_substeps, xn, S)
    return xn, S[:, :4].copy(), S[:, 4].copy()


def simulate_batch(X, U, thetas, c: FixedConstants, dt: float, n_steps: int) -> np.ndarray:
    """Zero-order-hold RK4 integration of a batch; returns the new states."""
    X = np.array(X, dtype=float, copy=True).reshape(-1, 4)
    U = np.broadcast_to(np.asarray(U, dtype=float), (X.shape[0],)).copy()
    TH = np.broadcast_to(_theta_array(thetas), (X.shape[0], 5)).copy()
    _simulate_zoh(X, U, TH, c.as_array(), dt, n_steps)
    return X
