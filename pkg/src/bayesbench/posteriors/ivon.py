"""Variational online Newton with an Adam-style squared-gradient curvature.

Per step, with likelihood gradients averaged over MC draws from the current
mean-field posterior:

    h <- beta2 * h + (1 - beta2) * ghat2
    m <- m - lr * (ghat + delta * m / N) / (h + delta / N)
    sigma^2 = 1 / (N * h + delta)

ghat2 is the mean per-example squared gradient (the diagonal empirical
Fisher). Squaring the batch-averaged gradient instead would shrink the
curvature by the batch size and inflate every posterior variance; the
per-example form is what makes sigma^2 = 1/(N h + delta) consistent with the
quadratic-posterior limit. The EMA starts at zero, so h is consumed with the
usual Adam cold-start correction 1/(1 - beta2^t).
"""

from __future__ import annotations

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    child_seed,
    init_params,
    layout_for,
    last_layer_slice,
    nll_grad_and_sqgrad,
    rng_from,
)
from ._optim import epoch_batches
from .base import TrainConfig, VIConfig
from .vi import GaussianMeanField, inv_softplus

BETA2 = 0.999


def train_ivon(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    vi: VIConfig,
    prior_precision: float,
    aug_factor: float = 1.0,
    init: ParameterVector | None = None,
    last_layer_only: bool = False,
) -> GaussianMeanField:
    """Natural-gradient mean-field VI; returns sigma^2 = 1/(N h + delta).

    ``aug_factor`` rescales the effective dataset size (an inert default of 1;
    exposed because replication-style augmentation changes the likelihood
    weight). h starts at zero, so with delta = N the initial per-parameter
    std is 1/sqrt(N).
    """
    if prior_precision <= 0:
        raise ConfigurationError("prior_precision must be positive")
    if aug_factor <= 0:
        raise ConfigurationError("aug_factor must be positive")
    layout = layout_for(spec)
    m = (init.copy() if init is not None else init_params(spec, cfg.seed)).values
    h = np.zeros(layout.size)
    delta = prior_precision
    n_eff = aug_factor * len(dataset)

    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    noise_rng = rng_from(child_seed(cfg.seed, 3))
    freeze = None
    if last_layer_only:
        freeze = np.zeros(layout.size, dtype=bool)
        freeze[last_layer_slice(spec, layout)] = True

    t = 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(dataset), cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            # Adam-style cold-start correction: h is an EMA from h0 = 0, so
            # divide out the missing mass 1 - beta2^t wherever h is consumed.
            hhat = h / (1.0 - BETA2**t) if t > 0 else h
            sigma = 1.0 / np.sqrt(n_eff * hhat + delta)
            gbar = np.zeros(layout.size)
            sqbar = np.zeros(layout.size)
            for _ in range(vi.train_mc_samples):
                theta = ParameterVector(m + sigma * noise_rng.standard_normal(layout.size), layout)
                try:
                    _, g, sq = nll_grad_and_sqgrad(spec, theta, batch)
                except DivergenceError as e:
                    raise DivergenceError(
                        f"curvature training diverged at epoch {epoch}: {e}; "
                        "consider a prior precision from the grid {1, 10, 100, 500}",
                        batch_index=e.batch_index,
                        epoch=epoch,
                    ) from e
                gbar += g.values
                sqbar += sq.values
            gbar /= vi.train_mc_samples
            sqbar /= vi.train_mc_samples
            h = BETA2 * h + (1.0 - BETA2) * sqbar
            t += 1
            hhat = h / (1.0 - BETA2**t)
            step = (gbar + delta * m / n_eff) / (hhat + delta / n_eff)
            if freeze is not None:
                step[~freeze] = 0.0
            m = m - cfg.learning_rate * step
            if not np.all(np.isfinite(m)):
                raise DivergenceError(
                    f"mean diverged at epoch {epoch}; "
                    "consider a prior precision from the grid {1, 10, 100, 500}",
                    epoch=epoch,
                )
    hhat = h / (1.0 - BETA2**t) if t > 0 else h
    sigma = 1.0 / np.sqrt(n_eff * hhat + delta)
    return GaussianMeanField(
        ParameterVector(m.copy(), layout),
        ParameterVector(inv_softplus(sigma), layout),
    )
