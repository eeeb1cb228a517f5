"""Stochastic weight averaging Gaussian: moments of an SGD trajectory.

Snapshots update a running mean and second moment and feed a rolling buffer
of deviation columns; sampling splits scale between the diagonal and the
low-rank parts: theta = mean + sqrt(diag/2) z1 + D z2 / sqrt(2 (K - 1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    child_seed,
    nll_and_grad,
    rng_from,
)
from ._optim import epoch_batches, make_optimizer
from .base import PosteriorApproximation, TrainConfig
from .map_estimate import train_map

VAR_FLOOR = 1e-30  # degenerate trajectories would otherwise sqrt a negative rounding residue


@dataclass
class SWAGState:
    mean: ParameterVector
    sq_mean: ParameterVector
    deviations: list = field(default_factory=list)
    rank_k: int = 20
    snapshots_taken: int = 0

    def diag_variance(self) -> np.ndarray:
        return np.maximum(self.sq_mean.values - self.mean.values**2, VAR_FLOOR)


def swag_update_moments(state: SWAGState, theta: ParameterVector) -> None:
    """Fold one snapshot into the running moments and deviation buffer."""
    n = state.snapshots_taken
    state.mean.values[...] = (state.mean.values * n + theta.values) / (n + 1)
    state.sq_mean.values[...] = (state.sq_mean.values * n + theta.values**2) / (n + 1)
    state.deviations.append(theta.values - state.mean.values)
    if len(state.deviations) > state.rank_k:
        state.deviations.pop(0)
    state.snapshots_taken = n + 1


def swag_collect(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    warm_start: ParameterVector,
    snapshots: int = 30,
    snapshot_interval_steps: int | None = None,
    rank_k: int = 20,
) -> SWAGState:
    """Continue SGD from warm_start, snapshotting every interval.

    The default interval is one epoch of minibatches. Exactly ``snapshots``
    snapshots are folded in; training stops right after the last one.
    """
    if snapshots < 2:
        raise ConfigurationError("snapshots must be at least 2")
    if rank_k > snapshots:
        raise ConfigurationError("rank_k must not exceed snapshots")
    n = len(dataset)
    steps_per_epoch = -(-n // cfg.batch_size)
    interval = snapshot_interval_steps if snapshot_interval_steps is not None else steps_per_epoch
    if interval < 1:
        raise ConfigurationError("snapshot_interval_steps must be positive")

    params = warm_start.copy()
    state = SWAGState(params.zeros_like(), params.zeros_like(), rank_k=rank_k)
    shuffle_rng = rng_from(child_seed(cfg.seed, 11))
    opt = make_optimizer(cfg)
    use_dropout = spec.dropout_rate > 0.0
    step = 0
    epoch = 0
    while state.snapshots_taken < snapshots:
        for idx in epoch_batches(n, cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            dseed = child_seed(cfg.seed, 12, step) if use_dropout else None
            try:
                _, grad = nll_and_grad(spec, params, batch, dropout_seed=dseed)
            except DivergenceError as e:
                raise DivergenceError(
                    f"snapshot collection diverged at epoch {epoch}: {e}",
                    batch_index=e.batch_index,
                    epoch=epoch,
                ) from e
            if cfg.weight_decay > 0.0:
                grad.values += cfg.weight_decay * params.values
            opt.step(params.values, grad.values)
            step += 1
            if step % interval == 0:
                swag_update_moments(state, params)
                if state.snapshots_taken >= snapshots:
                    break
        epoch += 1
        if not np.all(np.isfinite(params.values)):
            raise DivergenceError(f"parameters diverged at epoch {epoch}", epoch=epoch)
    return state


def swag_sample(state: SWAGState, seed) -> ParameterVector:
    """theta = mean + sqrt(diag/2) z1 + D z2 / sqrt(2 (K - 1))."""
    if state.snapshots_taken < 2:
        raise ConfigurationError("sampling needs at least 2 snapshots")
    rng = rng_from(seed)
    d = state.mean.size
    z1 = rng.standard_normal(d)
    theta = state.mean.values + np.sqrt(0.5 * state.diag_variance()) * z1
    K = len(state.deviations)
    if K >= 2:
        D = np.column_stack(state.deviations)
        z2 = rng.standard_normal(K)
        theta = theta + (D @ z2) / np.sqrt(2.0 * (K - 1))
    return state.mean.with_values(theta)


class SWAGPosterior(PosteriorApproximation):
    algorithm = "swag"

    def __init__(self, spec: MLPSpec, state: SWAGState):
        self.spec = spec
        self.state = state

    def sample_params(self, seed) -> ParameterVector:
        return swag_sample(self.state, seed)


def train_swag(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    snapshots: int = 30,
    rank_k: int = 20,
    init: ParameterVector | None = None,
    collect_lr: float | None = None,
) -> SWAGPosterior:
    """Warm MAP phase for two thirds of the epochs, snapshots over the rest.

    Collection always runs constant-rate SGD with momentum; exactly
    ``snapshots`` snapshots are spread over the final third of training.
    """
    warm_epochs = int(np.ceil(2 * cfg.epochs / 3))
    warm = train_map(spec, dataset, replace(cfg, epochs=warm_epochs), init=init)
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    tail_steps = max(snapshots, (cfg.epochs - warm_epochs) * steps_per_epoch)
    interval = max(1, tail_steps // snapshots)
    collect_cfg = replace(
        cfg,
        optimizer="sgd-momentum",
        learning_rate=collect_lr if collect_lr is not None else cfg.learning_rate,
        epochs=max(cfg.epochs, 1),
    )
    state = swag_collect(spec, dataset, collect_cfg, warm, snapshots, interval, rank_k)
    return SWAGPosterior(spec, state)
