"""Stein variational gradient descent over flat parameter vectors.

phi(theta_i) = (1/n) sum_j [ k(theta_j, theta_i) grad logp(theta_j)
                             + grad_{theta_j} k(theta_j, theta_i) ]

with an RBF kernel whose bandwidth follows the median heuristic
h = median(squared distances) / log(n + 1). A single particle skips the
kernel entirely, so one SVGD step is bit-identical to one gradient-ascent
step at the same learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    child_seed,
    init_params,
    log_prior_and_grad,
    nll_and_grad,
    rng_from,
)
from ._optim import epoch_batches
from .base import ParticlePosterior, TrainConfig

BANDWIDTH_MODES = ("median-heuristic", "fixed")


@dataclass
class SVGDState:
    particles: list
    bandwidth_mode: str = "median-heuristic"
    fixed_bandwidth: float = 1.0

    def __post_init__(self):
        if not self.particles:
            raise ConfigurationError("need at least one particle")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ConfigurationError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.fixed_bandwidth <= 0:
            raise ConfigurationError("fixed_bandwidth must be positive")
        size = self.particles[0].size
        if any(p.size != size for p in self.particles):
            raise ConfigurationError("particles must share one layout")


def _bandwidth(sq_dists: np.ndarray, n: int, mode: str, fixed: float) -> float:
    if mode == "fixed":
        return fixed
    h = float(np.median(sq_dists)) / np.log(n + 1.0)
    return h if h > 0.0 else 1.0  # coincident particles: any positive scale works


def svgd_update(
    particles,
    logpost_grads,
    learning_rate: float,
    bandwidth_mode: str = "median-heuristic",
    fixed_bandwidth: float = 1.0,
):
    """One SVGD step; returns new particle vectors (inputs untouched)."""
    n = len(particles)
    if n != len(logpost_grads):
        raise ConfigurationError("one gradient per particle required")
    if n == 1:
        p = particles[0]
        return [p.with_values(p.values + learning_rate * np.asarray(logpost_grads[0]))]
    P = np.stack([p.values for p in particles])
    G = np.stack([np.asarray(g, dtype=np.float64) for g in logpost_grads])
    sq = np.sum(P**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * P @ P.T, 0.0)
    h = _bandwidth(d2, n, bandwidth_mode, fixed_bandwidth)
    K = np.exp(-d2 / h)
    # repulsion_i = sum_j grad_{theta_j} k = (2/h) (theta_i sum_j K_ij - K theta_j)
    ksum = K.sum(axis=1)
    repulsion = (2.0 / h) * (P * ksum[:, None] - K @ P)
    phi = (K @ G + repulsion) / n
    new = P + learning_rate * phi
    return [particles[i].with_values(new[i]) for i in range(n)]


def train_svgd(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    n_particles: int,
    prior_std: float = 1.0,
    bandwidth_mode: str = "median-heuristic",
    fixed_bandwidth: float = 1.0,
) -> SVGDState:
    """Minibatch SVGD on the network log posterior.

    Per batch, each particle's gradient is N * (negative mean-NLL gradient)
    plus the Gaussian log-prior gradient.
    """
    if n_particles < 1:
        raise ConfigurationError("n_particles must be at least 1")
    particles = [init_params(spec, child_seed(cfg.seed, 21, i)) for i in range(n_particles)]
    n = len(dataset)
    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            grads = []
            for p in particles:
                try:
                    _, g_nll = nll_and_grad(spec, p, batch)
                except DivergenceError as e:
                    raise DivergenceError(
                        f"particle training diverged at epoch {epoch}: {e}",
                        batch_index=e.batch_index,
                        epoch=epoch,
                    ) from e
                _, g_prior = log_prior_and_grad(p, prior_std)
                grads.append(-n * g_nll.values + g_prior.values)
            particles = svgd_update(particles, grads, cfg.learning_rate, bandwidth_mode, fixed_bandwidth)
        if not all(np.all(np.isfinite(p.values)) for p in particles):
            raise DivergenceError(f"particles diverged at epoch {epoch}", epoch=epoch)
    return SVGDState(particles, bandwidth_mode, fixed_bandwidth)


class SVGDPosterior(ParticlePosterior):
    algorithm = "svgd"

    def __init__(self, spec: MLPSpec, state: SVGDState):
        super().__init__(spec, state.particles)
        self.state = state
