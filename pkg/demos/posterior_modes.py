"""Count the modes of RBMs by mean-field descent from exact samples.

A factorial RBM has a single fixed point with zero KL.  A ferromagnetic
3+3 RBM has two, one at all-off and one at all-on.

    python demos/posterior_modes.py
"""
import numpy as np

from ugmpost.analysis import bimodal_rbm, count_modes
from ugmpost.ugm import RbmParams

rng = np.random.default_rng(0)
factorial = RbmParams(rng.normal(size=3), rng.normal(size=3), np.zeros((3, 3)))
for name, p in [("factorial", factorial), ("ferromagnet", bimodal_rbm())]:
    modes = count_modes(p, rng=rng)
    print(f"{name}: {len(modes)} mode(s)")
    for m in modes:
        print(f"  basin {m.basin:3d}  KL {m.kl:.3f}  mean {np.round(m.mean, 3)}")
