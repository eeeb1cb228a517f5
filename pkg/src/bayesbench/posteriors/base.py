"""Shared contract for posterior approximations.

Every approximation can sample parameter vectors and produce a BMA
predictive; ensembles, particle methods, and dropout override the sampling
notion where weight-space draws are not the natural representation.
"""

from __future__ import annotations

import abc
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    MLPSpec,
    ParameterVector,
    PredictionSet,
    bma_predict,
    child_seed,
    predict,
)

OPTIMIZERS = ("sgd-momentum", "adam")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass(frozen=True)
class VIConfig:
    prior_std: float = 1.0
    kl_scale: float = 1.0
    train_mc_samples: int = 2
    init_rho: float | None = None  # None -> per-layer 0.05 * fan-in scale

    def __post_init__(self):
        if self.prior_std <= 0:
            raise ConfigurationError("prior_std must be positive")
        if self.kl_scale <= 0:
            raise ConfigurationError("kl_scale must be positive")
        if self.kl_scale > 1.0:
            warnings.warn("kl_scale above 1 runs colder than the exact posterior bound expects")
        if self.train_mc_samples <= 0:
            raise ConfigurationError("train_mc_samples must be positive")

    def to_dict(self) -> dict:
        return {
            "prior_std": self.prior_std,
            "kl_scale": self.kl_scale,
            "train_mc_samples": self.train_mc_samples,
            "init_rho": self.init_rho,
        }

    @staticmethod
    def from_dict(d: dict) -> "VIConfig":
        return VIConfig(**d)


class EnsembleError(RuntimeError):
    """A member of an ensemble failed to train."""

    def __init__(self, message, member_index=None):
        super().__init__(message)
        self.member_index = member_index


class PosteriorApproximation(abc.ABC):
    """Common surface: parameter sampling plus a BMA predictive."""

    algorithm: str = "abstract"
    spec: MLPSpec

    @abc.abstractmethod
    def sample_params(self, seed) -> ParameterVector:
        """One posterior parameter draw."""

    def member_predictions(self, data: Dataset, eval_samples: int = 10, seed=0):
        """Per-draw predictive distributions, before averaging."""
        return [
            predict(self.spec, self.sample_params(child_seed(seed, s)), data)
            for s in range(max(1, eval_samples))
        ]

    def predict(self, data: Dataset, eval_samples: int = 10, seed=0) -> PredictionSet:
        return bma_predict(self.member_predictions(data, eval_samples, seed))


def posterior_predict(approx: PosteriorApproximation, data: Dataset, eval_samples: int = 10, seed=0) -> PredictionSet:
    """BMA predictive from eval_samples posterior draws.

    Deterministic approximations use a single forward pass; finite-support
    approximations (particle sets, ensembles) use their own member counts.
    """
    return approx.predict(data, eval_samples, seed)


def per_sample_likelihoods(approx, data: Dataset, eval_samples: int = 10, seed=0) -> np.ndarray:
    """n x S matrix of p(y_i | x_i, theta_s) over the approximation's draws."""
    members = approx.member_predictions(data, eval_samples, seed)
    cols = []
    for m in members:
        if m.kind == "classification":
            cols.append(m.probs[np.arange(len(m)), m.labels])
        else:
            z = (m.labels - m.means) / m.stds
            cols.append(np.exp(-0.5 * z**2) / (np.sqrt(2.0 * np.pi) * m.stds))
    return np.column_stack(cols)


class MAPPosterior(PosteriorApproximation):
    """Delta posterior at a point estimate."""

    algorithm = "map"

    def __init__(self, spec: MLPSpec, params: ParameterVector):
        self.spec = spec
        self.params = params

    def sample_params(self, seed) -> ParameterVector:
        return self.params.copy()

    def member_predictions(self, data, eval_samples: int = 10, seed=0):
        return [predict(self.spec, self.params, data)]


class ParticlePosterior(PosteriorApproximation):
    """Posterior supported on a finite set of parameter vectors.

    The predictive always averages over the full particle set; eval_samples
    is ignored because the support is the sample budget.
    """

    algorithm = "particles"

    def __init__(self, spec: MLPSpec, particles):
        particles = list(particles)
        if not particles:
            raise ConfigurationError("need at least one particle")
        self.spec = spec
        self.particles = particles

    def sample_params(self, seed) -> ParameterVector:
        rng = np.random.Generator(np.random.PCG64(seed))
        return self.particles[int(rng.integers(len(self.particles)))].copy()

    def member_predictions(self, data, eval_samples: int = 10, seed=0):
        return [predict(self.spec, p, data) for p in self.particles]
