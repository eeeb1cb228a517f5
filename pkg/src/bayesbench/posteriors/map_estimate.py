"""Point-estimate training: minibatch descent on mean NLL + L2 penalty."""

from __future__ import annotations

import numpy as np

from ..models import (
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    child_seed,
    init_params,
    nll_and_grad,
    rng_from,
)
from ._optim import epoch_batches, make_optimizer
from .base import MAPPosterior, TrainConfig


def train_map(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    init: ParameterVector | None = None,
) -> ParameterVector:
    """Minimize mean NLL + weight_decay * ||theta||^2 / 2 over the train split.

    Zero epochs returns the seeded initialization unchanged. Dropout layers
    are active during training when the spec declares a positive rate.
    """
    params = init.copy() if init is not None else init_params(spec, cfg.seed)
    if cfg.epochs == 0:
        return params
    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    opt = make_optimizer(cfg)
    use_dropout = spec.dropout_rate > 0.0
    step = 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(dataset), cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            dseed = child_seed(cfg.seed, 2, step) if use_dropout else None
            try:
                _, grad = nll_and_grad(spec, params, batch, dropout_seed=dseed)
            except DivergenceError as e:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: {e}", batch_index=e.batch_index, epoch=epoch
                ) from e
            if not np.all(np.isfinite(grad.values)):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", epoch=epoch)
            if cfg.weight_decay > 0.0:
                grad.values += cfg.weight_decay * params.values
            opt.step(params.values, grad.values)
            step += 1
        if not np.all(np.isfinite(params.values)):
            raise DivergenceError(f"parameters diverged at epoch {epoch}", epoch=epoch)
    return params


def train_map_posterior(spec: MLPSpec, dataset: Dataset, cfg: TrainConfig, init=None) -> MAPPosterior:
    return MAPPosterior(spec, train_map(spec, dataset, cfg, init=init))
