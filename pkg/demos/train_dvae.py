"""Train a VAE with an 8+8 RBM prior and an amortized RBM posterior on binarized digits.

Compares the full posterior with a variant whose coupling matrix is frozen
at zero (a factorial posterior).  With 16 latent bits the marginal
likelihood is computed exactly by enumeration.

    python demos/train_dvae.py
"""
from ugmpost.data import DatasetSpec, load_dataset
from ugmpost.training import TrainConfig, train

x = load_dataset(DatasetSpec("sklearn-digits", subset=500)).train
for freeze_w in (False, True):
    cfg = TrainConfig(n1=8, n2=8, epochs=30, lr=3e-3, batch_size=100, freeze_w=freeze_w)
    res = train(x, cfg)
    m = res.metrics[-1]
    label = "factorial" if freeze_w else "undirected"
    print(f"{label:<11} ELBO {m['elbo']:.3f}  exact NLL {m['nll_bound']:.3f}  "
          f"{res.mean_step_ms:.1f} ms/step")
