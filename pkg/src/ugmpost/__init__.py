"""Undirected (RBM) approximate posteriors for discrete latent-variable models.

Subpackages:

``autodiff``     reverse-mode differentiation on numpy arrays
``ugm``          RBM / Gaussian UGM primitives and enumeration oracles
``gibbs``        Gibbs kernels, persistent chains, annealed sampling and log Z
``relax``        continuous relaxations of Bernoulli draws
``estimators``   relaxed-Gibbs, REINFORCE and reparameterised gradient estimators
``models``       encoders, decoders, ELBO / IW / structured objectives
``training``     training loop, metrics and checkpoints
``analysis``     mean-field modes and log Z difficulty studies
``toys``         the Gaussian and mixture toy problems
``data``         dataset loaders
``experiments``  configured experiment runners and run comparison
"""
from .autodiff import Adam, Value, backward, grad_check
from .analysis import count_modes, logz_sweep_study, mean_field_descend
from .data import DatasetSpec, load_dataset
from .estimators import EstimatorConfig, estimate_grad_gaussian, estimate_grad_rbm
from .experiments import ExperimentConfig, compare_runs, run_experiment
from .gibbs import AnnealPath, ChainStore, ais_logz, gibbs_sweep, reverse_sweep, sample_prior
from .relax import RelaxationConfig, relax_bernoulli, relaxed_gibbs_sweep
from .training import TrainConfig, train
from .ugm import BinaryState, GaussianUgm, RbmParams, rbm_energy, rbm_exact_logz

__version__ = "0.1.0"

__all__ = [
    "Adam", "AnnealPath", "BinaryState", "ChainStore", "DatasetSpec", "EstimatorConfig",
    "ExperimentConfig", "GaussianUgm", "RbmParams", "RelaxationConfig", "TrainConfig", "Value",
    "ais_logz", "backward", "compare_runs", "count_modes", "estimate_grad_gaussian",
    "estimate_grad_rbm", "gibbs_sweep", "grad_check", "load_dataset", "logz_sweep_study",
    "mean_field_descend", "rbm_energy", "rbm_exact_logz", "relax_bernoulli",
    "relaxed_gibbs_sweep", "reverse_sweep", "run_experiment", "sample_prior", "train",
]
