"""Monte Carlo dropout: the train-time dropout network, sampled at test time."""

from __future__ import annotations

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
from .base import PosteriorApproximation


def mcd_predict(spec: MLPSpec, params: ParameterVector, data: Dataset, mc_samples: int, seed) -> PredictionSet:
    """BMA over mc_samples stochastic forward passes."""
    if spec.dropout_rate <= 0.0:
        raise ConfigurationError("dropout sampling requires a positive dropout_rate")
    if mc_samples < 1:
        raise ConfigurationError("mc_samples must be at least 1")
    members = [predict(spec, params, data, dropout_seed=child_seed(seed, s)) for s in range(mc_samples)]
    return bma_predict(members)


class MCDropoutPosterior(PosteriorApproximation):
    """Point weights plus dropout masks as the stochastic component."""

    algorithm = "mcd"

    def __init__(self, spec: MLPSpec, params: ParameterVector):
        if spec.dropout_rate <= 0.0:
            raise ConfigurationError("dropout sampling requires a positive dropout_rate")
        self.spec = spec
        self.params = params

    def sample_params(self, seed) -> ParameterVector:
        return self.params.copy()

    def member_predictions(self, data: Dataset, eval_samples: int = 10, seed=0):
        return [
            predict(self.spec, self.params, data, dropout_seed=child_seed(seed, s))
            for s in range(max(1, eval_samples))
        ]
