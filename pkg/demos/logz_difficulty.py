"""How many annealing temperatures does log Z need?

Runs population annealing on two 8+8 RBMs, one dominated by its biases and
one by its couplings, and reports the spread of the estimates.

    python demos/logz_difficulty.py
"""
import numpy as np

from ugmpost.analysis import logz_sweep_study, temps_needed
from ugmpost.ugm import RbmParams

counts = [4, 16, 64, 256, 1024]
rng = np.random.default_rng(0)
for name, w, b in [("bias-dominated", 0.3, 3.0), ("coupling-dominated", 1.5, 0.3)]:
    p = RbmParams.random(8, 8, np.random.default_rng(5), scale=w, bias_scale=b)
    rows = logz_sweep_study(p, counts, repeats=10, population=256, rng=rng)
    print(name)
    for r in rows:
        print(f"  {r.num_temps:5d} temperatures  std {r.std:.4f}  |error| {r.mean_abs_dev:.4f}")
    print(f"  std <= 0.01 from {temps_needed(rows)} temperatures")
