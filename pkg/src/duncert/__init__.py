"""Density uncertainty layers: stochastic layers whose predictive variance
follows a learned Gaussian energy of their input, plus baselines, an exact
Bayesian linear regression reference and evaluation tooling."""

from .blr import fit_blr, blr_predict, blr_energy, criterion_identity_check
from .energy import LdlGaussianEnergy, Rank1MixtureEnergy, generative_loss
from .layers import (DensityUncertaintyLayer, McDropoutLayer, MfviLinearLayer, Rank1BnnLayer,
                     StochasticMlp, VariationalDropoutLayer, build_network, network_forward,
                     predictive_ensemble)
from .tensor import Rng, Tape, Tensor, no_grad
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
