"""Fit a 4+4 RBM to a three-component Bernoulli mixture and compare with the best RBM.

The global minimum of ``KL(q_rbm || p_mix)`` is found by multi-start L-BFGS
on the enumerated objective.  The relaxed-Gibbs estimator then trains an RBM
from a small random start using persistent chains only.

    python demos/rbm_mixture_toy.py
"""
from ugmpost.relax import RelaxationConfig
from ugmpost.toys import global_min_kl, mixture_target, run_rbm_mixture_toy

oracle, best = global_min_kl(mixture_target(0, 8), starts=20)
print(f"best KL over all 4+4 RBMs: {oracle:.4f}")

for t in (1, 2):
    curve = run_rbm_mixture_toy(t=t, iterations=3000, n_chains=64,
                                relaxation=RelaxationConfig("pwl", 0.1), record_every=500)
    trace = ", ".join(f"{k}:{v - oracle:.3f}" for k, v in zip(curve.iterations, curve.kl))
    print(f"t={t} gap to optimum by iteration  {trace}")
