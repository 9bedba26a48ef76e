"""Adaptive vs nominal approximate MPC under a mismatched parameter.

Needs trained weights, e.g. ``adaptive-ampc train`` followed by ``adaptive-ampc export``.
Run with ``python demos/adaptive_sweep.py artifacts/weights.bin [param]``.
"""
import sys

import numpy as np

from adaptive_ampc.config import PARAM_NAMES, load_config
from adaptive_ampc.deploy import import_weights
from adaptive_ampc.harness import sweep, sweep_grid
from adaptive_ampc.policy import AmpcPolicy

cfg = load_config()
pi_nn, grad_nn = import_weights(sys.argv[1] if len(sys.argv) > 1 else "artifacts/weights.bin")
policy = AmpcPolicy(pi_nn, grad_nn, cfg.theta_nom, (cfg.ocp.u_min, cfg.ocp.u_max))
j = PARAM_NAMES.index(sys.argv[2]) if len(sys.argv) > 2 else 0

rows = sweep(policy, j, sweep_grid(j, 5, cfg.theta_range), n_states=20, seed=6, consts=cfg.constants,
             theta_range=cfg.theta_range)
print(f"{'delta ' + PARAM_NAMES[j]:>14}  adaptive  nominal")
for row in rows:
    print(f"{row.delta:+14.4g}  {row.adaptive_frac:8.2f}  {row.nominal_frac:7.2f}")
print("totals:", sum(r.adaptive_success for r in rows), "vs", sum(r.nominal_success for r in rows))
