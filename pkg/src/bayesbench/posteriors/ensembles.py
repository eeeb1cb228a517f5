"""Ensembles of independently trained posterior approximations.

A MultiX ensemble trains N members of one algorithm with seeds seed+i;
MultiMAP is the classic deep ensemble. With a shared initialization, members
start from the same non-head parameters and only the output layer is
re-initialized per member (the finetuning protocol). The combined predictive
averages each member's BMA with roughly eval_samples/N draws per member.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    child_seed,
    init_params,
    reinit_last_layer,
)
from .base import EnsembleError, MAPPosterior, PosteriorApproximation, TrainConfig, VIConfig
from .ivon import train_ivon
from .laplace import LaplacePosterior, fit_laplace_last_layer, laplace_tune_prior_precision
from .map_estimate import train_map
from .mcd import MCDropoutPosterior
from .rank1 import Rank1Posterior, train_rank1
from .swag import train_swag
from .vi import MeanFieldPosterior, train_bbb

MULTIX_ALGORITHMS = ("map", "mcd", "bbb", "ivon", "rank1", "swag", "laplace")


@dataclass
class EnsembleState:
    algorithm: str
    members: list
    member_seeds: list

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigurationError("ensemble needs at least one member")
        if len(self.members) != len(self.member_seeds):
            raise ConfigurationError("one seed per member required")


class EnsemblePosterior(PosteriorApproximation):
    algorithm = "multix"

    def __init__(self, state: EnsembleState):
        self.state = state
        self.spec = state.members[0].spec
        self.algorithm = f"multi-{state.algorithm}"

    @property
    def members(self):
        return self.state.members

    def sample_params(self, seed) -> ParameterVector:
        rng = np.random.Generator(np.random.PCG64(seed))
        i = int(rng.integers(len(self.members)))
        return self.members[i].sample_params(child_seed(seed, i))

    def member_predictions(self, data: Dataset, eval_samples: int = 10, seed=0):
        per_member = max(1, int(np.floor(eval_samples / len(self.members) + 0.5)))
        out = []
        for i, member in enumerate(self.members):
            out.extend(member.member_predictions(data, per_member, child_seed(seed, i)))
        return out


def _train_one(algorithm, spec, dataset, cfg, vi, init, knobs):
    if algorithm == "map":
        return MAPPosterior(spec, train_map(spec, dataset, cfg, init=init))
    if algorithm == "mcd":
        return MCDropoutPosterior(spec, train_map(spec, dataset, cfg, init=init))
    if algorithm == "bbb":
        q = train_bbb(spec, dataset, cfg, vi, init=init, last_layer_only=knobs.get("last_layer_only", False))
        return MeanFieldPosterior(spec, q, algorithm="bbb")
    if algorithm == "ivon":
        q = train_ivon(
            spec, dataset, cfg, vi,
            prior_precision=knobs.get("prior_precision", 1.0),
            init=init,
            last_layer_only=knobs.get("last_layer_only", False),
        )
        return MeanFieldPosterior(spec, q, algorithm="ivon")
    if algorithm == "rank1":
        state = train_rank1(
            spec, dataset, cfg, vi,
            components=knobs.get("components", 1),
            init=init,
            last_layer_only=knobs.get("last_layer_only", False),
        )
        return Rank1Posterior(spec, state)
    if algorithm == "swag":
        return train_swag(
            spec, dataset, cfg,
            snapshots=knobs.get("snapshots", 30),
            rank_k=knobs.get("rank_k", 20),
            init=init,
            collect_lr=knobs.get("collect_lr"),
        )
    if algorithm == "laplace":
        map_params = train_map(spec, dataset, cfg, init=init)
        state = fit_laplace_last_layer(spec, map_params, dataset, prior_precision=knobs.get("prior_precision", 1.0))
        val = knobs.get("val_set")
        grid = knobs.get("tau_grid")
        if val is not None and grid:
            state = laplace_tune_prior_precision(state, spec, val, grid, seed=cfg.seed)
        return LaplacePosterior(spec, state)
    raise ConfigurationError(f"unsupported ensemble member algorithm {algorithm!r}")


def train_multix(
    algorithm: str,
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    members: int,
    shared_init: ParameterVector | None = None,
    vi: VIConfig | None = None,
    **knobs,
) -> EnsemblePosterior:
    """Train an ensemble of `members` runs of one algorithm, seeds cfg.seed + i."""
    if members < 2:
        raise ConfigurationError("a MultiX ensemble needs at least 2 members")
    if algorithm not in MULTIX_ALGORITHMS:
        raise ConfigurationError(f"unsupported ensemble member algorithm {algorithm!r}")
    vi = vi if vi is not None else VIConfig()
    trained = []
    seeds = []
    for i in range(members):
        member_cfg = replace(cfg, seed=cfg.seed + i)
        if shared_init is not None:
            init = reinit_last_layer(spec, shared_init, child_seed(member_cfg.seed, 7))
        else:
            init = None
        try:
            trained.append(_train_one(algorithm, spec, dataset, member_cfg, vi, init, knobs))
        except (DivergenceError, FloatingPointError) as e:
            raise EnsembleError(f"ensemble member {i} failed to train: {e}", member_index=i) from e
        seeds.append(member_cfg.seed)
    return EnsemblePosterior(EnsembleState(algorithm, trained, seeds))
