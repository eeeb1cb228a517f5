"""Posterior approximations sharing one train/sample/predict contract."""

from .base import (
    EnsembleError,
    MAPPosterior,
    ParticlePosterior,
    PosteriorApproximation,
    TrainConfig,
    VIConfig,
    per_sample_likelihoods,
    posterior_predict,
)
from .ensembles import EnsemblePosterior, EnsembleState, train_multix
from .ivon import train_ivon
from .laplace import (
    LaplacePosterior,
    LaplaceState,
    fit_laplace_last_layer,
    laplace_tune_prior_precision,
)
from .map_estimate import train_map, train_map_posterior
from .mcd import MCDropoutPosterior, mcd_predict
from .rank1 import Rank1Posterior, Rank1State, train_rank1
from .serialize import load_posterior, save_posterior
from .svgd import SVGDPosterior, SVGDState, svgd_update, train_svgd
from .swag import SWAGPosterior, SWAGState, swag_collect, swag_sample, train_swag
from .vi import (
    GaussianMeanField,
    MeanFieldPosterior,
    elbo_loss,
    elbo_loss_and_grad,
    kl_diag_gaussian,
    train_bbb,
)

__all__ = [
    "EnsembleError",
    "EnsemblePosterior",
    "EnsembleState",
    "GaussianMeanField",
    "LaplacePosterior",
    "LaplaceState",
    "MAPPosterior",
    "MCDropoutPosterior",
    "MeanFieldPosterior",
    "ParticlePosterior",
    "PosteriorApproximation",
    "Rank1Posterior",
    "Rank1State",
    "SVGDPosterior",
    "SVGDState",
    "SWAGPosterior",
    "SWAGState",
    "TrainConfig",
    "VIConfig",
    "elbo_loss",
    "elbo_loss_and_grad",
    "fit_laplace_last_layer",
    "kl_diag_gaussian",
    "laplace_tune_prior_precision",
    "load_posterior",
    "mcd_predict",
    "per_sample_likelihoods",
    "posterior_predict",
    "save_posterior",
    "svgd_update",
    "swag_collect",
    "swag_sample",
    "train_bbb",
    "train_ivon",
    "train_map",
    "train_map_posterior",
    "train_multix",
    "train_rank1",
    "train_svgd",
    "train_swag",
]
