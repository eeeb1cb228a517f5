"""Diagonal last-layer Laplace approximation around a MAP estimate.

Curvature is the generalized Gauss-Newton / Fisher diagonal of the output
layer accumulated over the training split; the posterior over last-layer
parameters is N(map, 1 / (curvature + tau)) with every other weight frozen.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    MLPSpec,
    ParameterVector,
    _forward_cached,
    child_seed,
    last_layer_slice,
    layout_for,
    rng_from,
    softmax,
)
from .base import PosteriorApproximation


@dataclass
class LaplaceState:
    map_params: ParameterVector
    last_layer_precision: np.ndarray
    prior_precision: float
    curvature: np.ndarray  # GGN/Fisher diagonal, kept so tau can be retuned

    def __post_init__(self):
        if self.prior_precision <= 0:
            raise ConfigurationError("prior_precision must be positive")


def _last_layer_curvature(spec: MLPSpec, map_params: ParameterVector, dataset: Dataset) -> np.ndarray:
    """Diagonal GGN over the output layer's (W, b) in flat layout order."""
    pre, acts, _ = _forward_cached(spec, map_params, dataset.inputs)
    h = acts[-1]
    raw = pre[-1]
    n, fan_out = raw.shape
    if spec.head == "categorical":
        p = softmax(raw)
        lam = p * (1.0 - p)
    elif spec.head == "gaussian-fixed-std":
        lam = np.full((n, 1), 1.0 / spec.fixed_output_std**2)
    else:  # gaussian-learned-std: Fisher diag wrt (mean, log-std) is (1/sigma^2, 2)
        sigma = np.exp(raw[:, 1])
        lam = np.column_stack([1.0 / sigma**2, np.full(n, 2.0)])
    HW = (h**2).T @ lam  # fan_in x fan_out
    parts = [HW.ravel()]
    if spec.bias:
        parts.append(lam.sum(axis=0))
    return np.concatenate(parts)


def fit_laplace_last_layer(
    spec: MLPSpec,
    map_params: ParameterVector,
    dataset: Dataset,
    prior_precision: float = 1.0,
) -> LaplaceState:
    curv = _last_layer_curvature(spec, map_params, dataset)
    if not np.any(curv > 0):
        warnings.warn("all-zero curvature; falling back to the prior precision alone")
        curv = np.zeros_like(curv)
    return LaplaceState(
        map_params=map_params.copy(),
        last_layer_precision=curv + prior_precision,
        prior_precision=prior_precision,
        curvature=curv,
    )


def laplace_tune_prior_precision(
    state: LaplaceState,
    spec: MLPSpec,
    val_set: Dataset,
    grid,
    eval_samples: int = 10,
    seed: int = 0,
) -> LaplaceState:
    """Pick tau from the grid by validation BMA log-likelihood; ties go large.

    Every candidate is scored with the same fixed-seed sample draw so the
    comparison is deterministic.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ConfigurationError("grid must be nonempty")
    best = None
    best_ll = -np.inf
    for tau in grid:
        if tau <= 0:
            raise ConfigurationError("prior precision candidates must be positive")
        cand = replace(
            state, prior_precision=tau, last_layer_precision=state.curvature + tau
        )
        preds = LaplacePosterior(spec, cand).predict(val_set, eval_samples, seed)
        if preds.kind == "classification":
            p = preds.probs[np.arange(len(preds)), preds.labels]
            ll = float(np.log(np.maximum(p, 1e-12)).mean())
        else:
            z = (preds.labels - preds.means) / preds.stds
            ll = float(np.mean(-0.5 * np.log(2.0 * np.pi * preds.stds**2) - 0.5 * z**2))
        if ll >= best_ll:  # ascending grid, so ties resolve toward larger tau
            best_ll = ll
            best = cand
    return best


class LaplacePosterior(PosteriorApproximation):
    algorithm = "laplace"

    def __init__(self, spec: MLPSpec, state: LaplaceState):
        self.spec = spec
        self.state = state
        self._slice = last_layer_slice(spec, layout_for(spec))
        if self.state.last_layer_precision.shape[0] != self._slice.stop - self._slice.start:
            raise ConfigurationError("precision length does not match the output layer")

    def sample_params(self, seed) -> ParameterVector:
        rng = rng_from(seed)
        theta = self.state.map_params.copy()
        std = 1.0 / np.sqrt(self.state.last_layer_precision)
        theta.values[self._slice] += std * rng.standard_normal(std.size)
        return theta
