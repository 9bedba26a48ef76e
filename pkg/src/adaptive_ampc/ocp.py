"""Multiple-shooting transcription of the swing-up MPC into a parametric NLP.

Decision vector ``z = [u_0 .. u_N, x_1 .. x_N]``; the initial state ``x_0`` and the
model parameters ``theta`` are the NLP parameters.  Constraints use the convention
``c(z) = 0`` for the shooting defects and ``g(z) <= 0`` for the inequalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .config import CartpoleParams, FixedConstants, OcpConfig
from .dynamics import _rk4_shoot, _rk4_shoot_jac, wrap_angle

UPRIGHT = np.zeros(4)


class NonFiniteError(FloatingPointError):
    """Raised when a transcription quantity becomes non-finite; carries the knot."""

    def __init__(self, knot: int, what: str):
        super().__init__(f"non-finite {what} at knot {knot}")
        self.knot = knot


@njit(cache=True)
def _stage_cost(x, u, th, c, w_y, w_u):
    m = c[0] + th[0]
    l, J, g = c[1], c[2], c[3]
    co = np.cos(x[2])
    e_kin = 0.5 * (th[1] + m) * x[1] ** 2 + m * l * x[1] * x[3] * co + 0.5 * (m * l * l + J) * x[3] ** 2
    e_pot = m * g * l * co
    return e_kin - e_pot + w_y * x[0] ** 2 + w_u * u * u


@njit(cache=True)
def _stage_cost_grad(x, u, th, c, w_y, w_u, out):
    m = c[0] + th[0]
    l, J, g = c[1], c[2], c[3]
    s = np.sin(x[2])
    co = np.cos(x[2])
    out[0] = 2.0 * w_y * x[0]
    out[1] = (th[1] + m) * x[1] + m * l * x[3] * co
    out[2] = -m * l * x[1] * x[3] * s + m * g * l * s
    out[3] = m * l * x[1] * co + (m * l * l + J) * x[3]
    out[4] = 2.0 * w_u * u


@njit(cache=True)
def _stage_cost_hess(x, th, c, w_y, w_u, H):
    m = c[0] + th[0]
    l, J, g = c[1], c[2], c[3]
    s = np.sin(x[2])
    co = np.cos(x[2])
    for i in range(5):
        for j in range(5):
            H[i, j] = 0.0
    H[0, 0] = 2.0 * w_y
    H[1, 1] = th[1] + m
    H[1, 2] = H[2, 1] = -m * l * x[3] * s
    H[1, 3] = H[3, 1] = m * l * co
    H[2, 2] = -m * l * x[1] * x[3] * co + m * g * l * co
    H[2, 3] = H[3, 2] = -m * l * x[1] * s
    H[3, 3] = m * l * l + J
    H[4, 4] = 2.0 * w_u


@njit(cache=True)
def _eval_all(X, U, th, c, h, nsub, w_y, w_u, Xn, S, stage_grad):
    """Cost, shooting end states ``Xn`` and sensitivities ``S`` for all stages."""
    N = Xn.shape[0]
    V = 0.0
    xn = np.empty(4)
    Sk = np.empty((4, 5))
    g5 = np.empty(5)
    for k in range(N + 1):
        V += _stage_cost(X[k], U[k], th, c, w_y, w_u)
        _stage_cost_grad(X[k], U[k], th, c, w_y, w_u, g5)
        for i in range(5):
            stage_grad[k, i] = g5[i]
        if k < N:
            _rk4_shoot_jac(X[k], U[k], th, c, h, nsub, xn, Sk)
            for i in range(4):
                Xn[k, i] = xn[i]
                for j in range(5):
                    S[k, i, j] = Sk[i, j]
    return V


@njit(cache=True)
def _defects_only(X, U, th, c, h, nsub, Xn):
    xn = np.empty(4)
    for k in range(Xn.shape[0]):
        _rk4_shoot(X[k], U[k], th, c, h, nsub, xn)
        for i in range(4):
            Xn[k, i] = xn[i]


@njit(cache=True)
def _cost_only(X, U, th, c, w_y, w_u):
    V = 0.0
    for k in range(X.shape[0]):
        V += _stage_cost(X[k], U[k], th, c, w_y, w_u)
    return V


@njit(cache=True)
def _dyn_lagrangian_hess(X, U, lam, th, c, h, nsub, fd_step, out):
    """Central differences of ``S_k^T lam_k`` over ``(x_k, u_k)`` for each stage."""
    N = lam.shape[0]
    xn = np.empty(4)
    S = np.empty((4, 5))
    xp = np.empty(4)
    gp = np.empty(5)
    gm = np.empty(5)
    for k in range(N):
        for j in range(5):
            for sign in range(2):
                step = fd_step if sign == 0 else -fd_step
                for i in range(4):
                    xp[i] = X[k, i]
                up = U[k]
                if j < 4:
                    xp[j] += step
                else:
                    up += step
                _rk4_shoot_jac(xp, up, th, c, h, nsub, xn, S)
                tgt = gp if sign == 0 else gm
                for q in range(5):
                    acc = 0.0
                    for i in range(4):
                        acc += S[i, q] * lam[k, i]
                    tgt[q] = acc
            for q in range(5):
                out[k, q, j] = (gp[q] - gm[q]) / (2.0 * fd_step)
    # symmetrize
    for k in range(N):
        for i in range(5):
            for j in range(i + 1, 5):
                v = 0.5 * (out[k, i, j] + out[k, j, i])
                out[k, i, j] = v
                out[k, j, i] = v


@dataclass
class NlpEval:
    """Values and first derivatives of the NLP at one point."""

    V: float
    grad: np.ndarray
    c_eq: np.ndarray
    J_eq: np.ndarray
    g_in: np.ndarray
    J_in: np.ndarray
    A: np.ndarray  # per-stage d x_{k+1} / d x_k
    B: np.ndarray  # per-stage d x_{k+1} / d u_k

    @property
    def g(self) -> np.ndarray:
        return np.concatenate([self.c_eq, self.g_in])

    @property
    def Jg(self) -> np.ndarray:
        return np.vstack([self.J_eq, self.J_in])


class ParametricNlp:
    """The swing-up OCP for a fixed initial state ``x0`` and parameters ``theta``.

    Immutable after construction; all methods are reentrant.
    """

    def __init__(self, x0, theta: CartpoleParams, cfg: OcpConfig, consts: FixedConstants):
        self.x0 = np.array(x0, dtype=float).reshape(4)
        self.x0.setflags(write=False)
        self.theta = theta
        self.cfg = cfg
        self.consts = consts
        self._th = theta.as_array()
        self._c = consts.as_array()
        self._h = cfg.dt_ctrl / cfg.n_substeps
        N = cfg.N
        self.N = N
        self.n_u = N + 1
        self.n_x = 4 * N
        self.nz = self.n_u + self.n_x
        self.n_eq = 4 * N
        self.n_in = 2 * (N + 1) + 2 * N + 8
        self._J_in = self._build_J_in()
        self._J_in.setflags(write=False)
        assert self._J_in.shape == (self.n_in, self.nz)

    # ------------------------------------------------------------------ layout
    def u_index(self, k: int) -> int:
        return k

    def x_index(self, k: int) -> int:
        """Index of the first component of ``x_k`` (k >= 1) in ``z``."""
        if not 1 <= k <= self.N:
            raise IndexError(k)
        return self.n_u + 4 * (k - 1)

    def split(self, z):
        """Return inputs ``(N+1,)`` and states ``(N+1, 4)`` including ``x_0``."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.nz,):
            raise ValueError(f"decision vector must have shape ({self.nz},), got {z.shape}")
        U = z[: self.n_u]
        X = np.empty((self.N + 1, 4))
        X[0] = self.x0
        X[1:] = z[self.n_u:].reshape(self.N, 4)
        return U, X

    def join(self, U, X) -> np.ndarray:
        """Inverse of :meth:`split` (``X`` may include ``x_0`` as its first row)."""
        X = np.asarray(X, dtype=float)
        if X.shape[0] == self.N + 1:
            X = X[1:]
        return np.concatenate([np.asarray(U, dtype=float).reshape(self.n_u), X.reshape(-1)])

    def inequality_labels(self) -> list[str]:
        N = self.N
        labels = [f"u{k}<=umax" for k in range(N + 1)] + [f"u{k}>=umin" for k in range(N + 1)]
        labels += [f"y{k}<=ymax" for k in range(1, N + 1)] + [f"y{k}>=ymin" for k in range(1, N + 1)]
        labels += [f"xN[{i}]<=box" for i in range(4)] + [f"xN[{i}]>=-box" for i in range(4)]
        return labels

    def _build_J_in(self) -> np.ndarray:
        N, n_u = self.N, self.n_u
        J = np.zeros((self.n_in, self.nz))
        r = 0
        for k in range(N + 1):
            J[r, k] = 1.0
            r += 1
        for k in range(N + 1):
            J[r, k] = -1.0
            r += 1
        for k in range(1, N + 1):
            J[r, self.x_index(k)] = 1.0
            r += 1
        for k in range(1, N + 1):
            J[r, self.x_index(k)] = -1.0
            r += 1
        xN = self.x_index(N)
        for i in range(4):
            J[r, xN + i] = 1.0
            r += 1
        for i in range(4):
            J[r, xN + i] = -1.0
            r += 1
        return J

    # ------------------------------------------------------------------ values
    def rollout(self, U, theta: CartpoleParams | None = None) -> np.ndarray:
        """Forward-simulate an input sequence; returns states ``(N+1, 4)``."""
        th = self._th if theta is None else theta.as_array()
        U = np.asarray(U, dtype=float)
        X = np.empty((self.N + 1, 4))
        X[0] = self.x0
        for k in range(self.N):
            _rk4_shoot(X[k], U[k], th, self._c, self._h, self.cfg.n_substeps, X[k + 1])
        return X

    def initial_guess(self, U) -> np.ndarray:
        """Decision vector from inputs with states filled by forward rollout."""
        U = np.clip(np.asarray(U, dtype=float), self.cfg.u_min, self.cfg.u_max)
        return self.join(U, self.rollout(U))

    def cost(self, z, theta: CartpoleParams | None = None) -> float:
        U, X = self.split(z)
        th = self._th if theta is None else theta.as_array()
        return float(_cost_only(X, U, th, self._c, self.cfg.w_y, self.cfg.w_u))

    def stage_costs(self, z) -> np.ndarray:
        U, X = self.split(z)
        return np.array([
            _stage_cost(X[k], U[k], self._th, self._c, self.cfg.w_y, self.cfg.w_u)
            for k in range(self.N + 1)
        ])

    def equality(self, z, theta: CartpoleParams | None = None) -> np.ndarray:
        U, X = self.split(z)
        th = self._th if theta is None else theta.as_array()
        Xn = np.empty((self.N, 4))
        _defects_only(X, U, th, self._c, self._h, self.cfg.n_substeps, Xn)
        return (Xn - X[1:]).reshape(-1)

    def inequality(self, z) -> np.ndarray:
        cfg = self.cfg
        U, X = self.split(z)
        xN = X[-1].copy()
        xN[2] = wrap_angle(xN[2])
        dev = xN - UPRIGHT
        box = np.asarray(cfg.terminal_box)
        return np.concatenate([
            U - cfg.u_max,
            cfg.u_min - U,
            X[1:, 0] - cfg.y_max,
            cfg.y_min - X[1:, 0],
            dev - box,
            -dev - box,
        ])

    @property
    def J_in(self) -> np.ndarray:
        return self._J_in

    def eval(self, z, theta: CartpoleParams | None = None) -> NlpEval:
        """Cost, constraints and their exact first derivatives at ``z``."""
        U, X = self.split(z)
        th = self._th if theta is None else theta.as_array()
        N, n_u = self.N, self.n_u
        Xn = np.empty((N, 4))
        S = np.empty((N, 4, 5))
        sg = np.empty((N + 1, 5))
        V = _eval_all(X, U, th, self._c, self._h, self.cfg.n_substeps,
                      self.cfg.w_y, self.cfg.w_u, Xn, S, sg)
        if not np.isfinite(V):
            raise NonFiniteError(int(np.argmax(~np.isfinite(sg).all(axis=1))), "cost")
        bad = ~np.isfinite(Xn).all(axis=1) | ~np.isfinite(S).all(axis=(1, 2))
        if bad.any():
            raise NonFiniteError(int(np.argmax(bad)), "shooting result")
        grad = np.zeros(self.nz)
        grad[:n_u] = sg[:, 4]
        grad[n_u:] = sg[1:, :4].reshape(-1)
        c_eq = (Xn - X[1:]).reshape(-1)
        A = S[:, :, :4]
        B = S[:, :, 4]
        J_eq = np.zeros((self.n_eq, self.nz))
        for k in range(N):
            rows = slice(4 * k, 4 * k + 4)
            J_eq[rows, k] = B[k]
            if k >= 1:
                xi = self.x_index(k)
                J_eq[rows, xi:xi + 4] = A[k]
            xi = self.x_index(k + 1)
            J_eq[rows, xi:xi + 4] = -np.eye(4)
        return NlpEval(V=float(V), grad=grad, c_eq=c_eq, J_eq=J_eq,
                       g_in=self.inequality(z), J_in=self._J_in, A=A, B=B)

    # ------------------------------------------------------- second order terms
    def hessian_blocks(self, z, lam, fd_step: float = 1e-5, mode: str = "exact") -> np.ndarray:
        """Per-stage 5x5 Hessian blocks of ``V + lam^T c`` over ``(x_k, u_k)``.

        The cost curvature is analytic; the dynamics curvature comes from central
        differences of the exact shooting Jacobians (``mode="exact"``) or is dropped
        (``mode="gauss-newton"``).  Inequalities are linear and contribute nothing.
        """
        U, X = self.split(z)
        N = self.N
        blocks = np.zeros((N + 1, 5, 5))
        for k in range(N + 1):
            _stage_cost_hess(X[k], self._th, self._c, self.cfg.w_y, self.cfg.w_u, blocks[k])
        if mode == "exact":
            dyn = np.empty((N, 5, 5))
            _dyn_lagrangian_hess(X, U, np.asarray(lam, dtype=float).reshape(N, 4), self._th,
                                 self._c, self._h, self.cfg.n_substeps, fd_step, dyn)
            blocks[:N] += dyn
        elif mode != "gauss-newton":
            raise ValueError(f"unknown hessian mode {mode!r}")
        return blocks

    def assemble_hessian(self, blocks) -> np.ndarray:
        if not hasattr(self, "_hidx"):
            rows, cols, src = [], [], []
            for k in range(self.N + 1):
                if k == 0:
                    idx, loc = [0], [4]
                else:
                    idx = [self.x_index(k) + i for i in range(4)] + [k]
                    loc = [0, 1, 2, 3, 4]
                for a, la in zip(idx, loc):
                    for b, lb in zip(idx, loc):
                        rows.append(a)
                        cols.append(b)
                        src.append(k * 25 + la * 5 + lb)
            self._hidx = (np.array(rows), np.array(cols), np.array(src))
        rows, cols, src = self._hidx
        H = np.zeros((self.nz, self.nz))
        H[rows, cols] = np.asarray(blocks).reshape(-1)[src]
        return H

    def lagrangian_hessian(self, z, lam, fd_step: float = 1e-5, mode: str = "exact") -> np.ndarray:
        """Dense Hessian of the Lagrangian w.r.t. ``z``."""
        return self.assemble_hessian(self.hessian_blocks(z, lam, fd_step, mode))

    def lagrangian_grad(self, z, lam, mu, theta: CartpoleParams | None = None) -> np.ndarray:
        ev = self.eval(z, theta)
        return ev.grad + ev.J_eq.T @ lam + ev.J_in.T @ mu

    def with_theta(self, theta: CartpoleParams) -> "ParametricNlp":
        return ParametricNlp(self.x0, theta, self.cfg, self.consts)

    def with_x0(self, x0) -> "ParametricNlp":
        return ParametricNlp(x0, self.theta, self.cfg, self.consts)


def build_nlp(x0, theta: CartpoleParams, cfg: OcpConfig, consts: FixedConstants) -> ParametricNlp:
    nlp = ParametricNlp(x0, theta, cfg, consts)
    N = cfg.N
    assert nlp.nz == (N + 1) + 4 * N
    assert nlp.n_eq == 4 * N
    assert nlp.n_in == 2 * (N + 1) + 2 * N + 8
    return nlp


def equilibrium_guess(nlp: ParametricNlp) -> np.ndarray:
    """All-zero inputs with every knot at the upright rest state."""
    return np.zeros(nlp.nz)
