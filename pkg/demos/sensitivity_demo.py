"""Solve one swing-up problem, then compare the first-order predictor against re-solves.

Run with ``python demos/sensitivity_demo.py``.
"""
import numpy as np

from adaptive_ampc.config import PARAM_NAMES, load_config
from adaptive_ampc.ocp import build_nlp
from adaptive_ampc.sensitivity import active_set_changed, kkt_sensitivity, linear_predict, resolve
from adaptive_ampc.solver import SolverConfig, multistart_solve

cfg = load_config()
r = np.array(cfg.theta_range)
x0 = np.array([0.1, 0.0, 2.5, 0.0])  # pendulum 2.5 rad from upright, cart slightly right

nlp = build_nlp(x0, cfg.theta_nom, cfg.ocp, cfg.constants)
sol = multistart_solve(nlp, SolverConfig(), seed=0)
S = kkt_sensitivity(nlp, sol, r)
print(f"u0* = {sol.u0:+.4f} V  cost {sol.cost:.4f}  iterations {sol.iterations}")
print("du0/dtheta:", "  ".join(f"{n} {v:+.4g}" for n, v in zip(PARAM_NAMES, S.row)))

# predict the optimal first input for a few parameter offsets and check against re-solves
for j, name in enumerate(PARAM_NAMES):
    for frac in (0.02, 0.1):
        dtheta = np.zeros(5)
        dtheta[j] = frac * r[j]
        pred = linear_predict(sol.u0, S, dtheta)
        pert = resolve(nlp, sol, cfg.theta_nom.as_array() + dtheta)
        flag = "  (active set changed)" if active_set_changed(sol, pert) else ""
        print(f"{name:>5} +{frac:4.2f} range: predicted {pred:+.4f}  re-solved {pert.u0:+.4f}{flag}")
