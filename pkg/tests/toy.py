"""Small NLPs exposing the same interface as the cartpole transcription.

``z = [u, x]`` with a single defect ``x - u = 0`` (the solver needs at least one
equality row) and one inequality.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from adaptive_ampc.ocp import NlpEval


@dataclass
class ToyNlp:
    """``min (u - a p)^2 + w x^2  s.t.  x = u,  lo - u <= 0``."""

    theta: np.ndarray = None
    a: float = 1.0
    w: float = 0.0
    lo: float = -10.0

    nz = 2
    n_eq = 1
    n_in = 1
    n_u = 1
    N = 1

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.array([0.0])
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.x0 = np.zeros(1)
        self.cfg = SimpleNamespace(u_min=-100.0, u_max=100.0)
        self.J_in = np.array([[-1.0, 0.0]])

    def _target(self, theta):
        th = self.theta if theta is None else np.atleast_1d(theta)
        return self.a * th[0]

    def cost(self, z, theta=None):
        return float((z[0] - self._target(theta)) ** 2 + self.w * z[1] ** 2)

    def equality(self, z, theta=None):
        return np.array([z[1] - z[0]])

    def inequality(self, z):
        return np.array([self.lo - z[0]])

    def eval(self, z, theta=None):
        grad = np.array([2 * (z[0] - self._target(theta)), 2 * self.w * z[1]])
        return NlpEval(V=self.cost(z, theta), grad=grad, c_eq=self.equality(z), J_eq=np.array([[-1.0, 1.0]]),
                       g_in=self.inequality(z), J_in=self.J_in, A=None, B=None)

    def hessian_blocks(self, z, lam, fd_step=1e-5, mode="exact"):
        return np.diag([2.0, 2 * self.w + 1e-300])[None]

    def assemble_hessian(self, blocks):
        return np.asarray(blocks)[0]

    def lagrangian_hessian(self, z, lam, fd_step=1e-5, mode="exact"):
        return self.assemble_hessian(self.hessian_blocks(z, lam))

    def lagrangian_grad(self, z, lam, mu, theta=None):
        ev = self.eval(z, theta)
        return ev.grad + ev.J_eq.T @ lam + ev.J_in.T @ mu

    def split(self, z):
        return z[:1], np.array([[0.0], [z[1]]])

    def join(self, U, X):
        return np.array([U[0], np.ravel(X)[-1]])

    def rollout(self, U, theta=None):
        return np.array([[0.0], [U[0]]])

    def initial_guess(self, U):
        return self.join(U, self.rollout(U))

    def with_theta(self, theta):
        return ToyNlp(theta=theta, a=self.a, w=self.w, lo=self.lo)
