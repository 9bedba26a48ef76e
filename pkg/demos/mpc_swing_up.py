"""Closed-loop multistart MPC swinging the pendulum up from hanging rest.

Run with ``python demos/mpc_swing_up.py [trace.csv]``.  Takes a few minutes:
every control step solves the full nonlinear program.
"""
import sys

import numpy as np

from adaptive_ampc.config import load_config
from adaptive_ampc.harness import SimConfig, simulate

cfg = load_config()
sim = SimConfig(x0=(0.0, 0.0, np.pi, 0.0), theta_true=cfg.theta_nom, theta_ctrl=cfg.theta_nom, T=5.0)
ep = simulate("mpc-oracle", sim, cfg.constants, ocp=cfg.ocp)

rep = ep.report
print(f"success {rep.success}  upright {rep.upright}  max |y| {rep.max_abs_y:.3f} m  max |u| {np.abs(ep.U).max():.2f} V")
for k in range(0, len(ep.t), 10):
    y, _, a, _ = ep.X[k]
    print(f"t={ep.t[k]:4.1f}  y={y:+.3f}  alpha={a:+.3f}")
if len(sys.argv) > 1:
    ep.to_csv(sys.argv[1])
