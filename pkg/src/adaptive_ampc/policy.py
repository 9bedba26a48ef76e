"""Parameter-adaptive approximate MPC policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CartpoleParams
from .dynamics import wrap_angle
from .neural import Mlp, forward


@dataclass(frozen=True)
class AmpcPolicy:
    """``u = pi_nn(x) + grad_nn(x) @ (theta - theta_nom)``, saturated to the input bounds."""

    pi_nn: Mlp
    grad_nn: Mlp
    theta_nom: CartpoleParams
    u_bounds: tuple = (-9.0, 9.0)

    def __post_init__(self):
        if self.pi_nn.output_dim != 1:
            raise ValueError("policy net must have one output")
        if self.grad_nn.output_dim != 5:
            raise ValueError("sensitivity net must have five outputs")

    def features(self, x) -> np.ndarray:
        xt = np.array(x, dtype=float)
        xt[..., 2] = wrap_angle(xt[..., 2])
        return xt

    def unclamped(self, x, theta: CartpoleParams) -> float:
        xt = self.features(x)
        dtheta = theta.as_array() - self.theta_nom.as_array()
        return float(forward(self.pi_nn, xt)[0] + forward(self.grad_nn, xt) @ dtheta)

    def evaluate(self, x, theta: CartpoleParams) -> float:
        return float(np.clip(self.unclamped(x, theta), *self.u_bounds))

    def evaluate_nominal(self, x) -> float:
        return self.evaluate(x, self.theta_nom)

    def evaluate_batch(self, X, thetas) -> np.ndarray:
        """Inputs for states ``(n, 4)`` and per-row parameters ``(n, 5)``."""
        xt = self.features(np.atleast_2d(X))
        dtheta = np.asarray(thetas, dtype=float) - self.theta_nom.as_array()
        u = forward(self.pi_nn, xt)[:, 0] + np.sum(forward(self.grad_nn, xt) * dtheta, axis=1)
        return np.clip(u, *self.u_bounds)

    __call__ = evaluate


def evaluate(p: AmpcPolicy, x, theta: CartpoleParams) -> float:
    return p.evaluate(x, theta)


def evaluate_nominal(p: AmpcPolicy, x) -> float:
    return p.evaluate_nominal(x)
