"""Mean-field Gaussian variational inference over network weights.

The scalar ELBO surface (elbo_loss) uses weight-space reparameterization so
its gradient can be checked against finite differences with a pinned MC seed.
Training samples pre-activations instead (the lower-variance local trick);
both estimate the same objective: N * E_q[mean NLL] + kl_scale * KL(q || p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    _activate,
    _activate_grad,
    _per_example_nll_and_delta,
    child_seed,
    init_params,
    layout_for,
    last_layer_slice,
    nll_and_grad,
    rng_from,
)
from ._optim import epoch_batches, make_optimizer
from .base import PosteriorApproximation, TrainConfig, VIConfig

_VAR_FLOOR = 1e-30  # keeps dead-unit pre-activation variances off exact zero


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    """Inverse of softplus on positive inputs, stable for large y."""
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GaussianMeanField:
    """Diagonal Gaussian over the flat parameter vector; std = softplus(rho)."""

    mu: ParameterVector
    rho: ParameterVector

    def __post_init__(self):
        if self.mu.layout is not self.rho.layout and self.mu.layout != self.rho.layout:
            raise ConfigurationError("mu and rho must share a layout")
        if self.mu.size != self.rho.size:
            raise ConfigurationError("mu and rho must have equal size")

    @property
    def std(self) -> np.ndarray:
        return softplus(self.rho.values)

    def sample(self, seed) -> ParameterVector:
        eps = rng_from(seed).standard_normal(self.mu.size)
        return self.mu.with_values(self.mu.values + self.std * eps)


def kl_diag_gaussian(q: GaussianMeanField, prior_std: float) -> float:
    """KL( N(mu, diag softplus(rho)^2) || N(0, prior_std^2 I) ), closed form."""
    if prior_std <= 0:
        raise ConfigurationError("prior_std must be positive")
    mu = q.mu.values
    sigma = q.std
    pv = prior_std**2
    terms = (mu**2 + sigma**2) / pv - 1.0 - 2.0 * np.log(sigma) + np.log(pv)
    return float(0.5 * terms.sum())


def _kl_grads(mu, sigma, rho, prior_std):
    pv = prior_std**2
    dmu = mu / pv
    dsigma = sigma / pv - 1.0 / sigma
    drho = dsigma * _sigmoid(rho)
    return dmu, drho


def elbo_loss(spec: MLPSpec, q: GaussianMeanField, batch: Dataset, dataset_size: int, vi: VIConfig, seed) -> float:
    """Negative ELBO estimate: (N/B) * sum_batch MC-NLL + kl_scale * KL."""
    return elbo_loss_and_grad(spec, q, batch, dataset_size, vi, seed)[0]


def elbo_loss_and_grad(spec, q, batch, dataset_size, vi, seed):
    """Loss plus gradients w.r.t. (mu, rho) using weight-space sampling.

    The MC draws depend only on the seed, so finite differences in mu or rho
    see a fixed noise realization.
    """
    rng = rng_from(seed)
    mu = q.mu.values
    rho = q.rho.values
    sigma = softplus(rho)
    gmu = np.zeros_like(mu)
    grho = np.zeros_like(rho)
    lik = 0.0
    if dataset_size > 0:
        if len(batch) == 0:
            raise ConfigurationError("nonempty batch required when dataset_size > 0")
        for _ in range(vi.train_mc_samples):
            eps = rng.standard_normal(mu.size)
            theta = q.mu.with_values(mu + sigma * eps)
            nll, g = nll_and_grad(spec, theta, batch)
            lik += nll
            gmu += g.values
            grho += g.values * eps * _sigmoid(rho)
        scale = dataset_size / vi.train_mc_samples
        lik = lik * scale
        gmu *= scale
        grho *= scale
    kl = kl_diag_gaussian(q, vi.prior_std)
    kmu, krho = _kl_grads(mu, sigma, rho, vi.prior_std)
    loss = lik + vi.kl_scale * kl
    gmu += vi.kl_scale * kmu
    grho += vi.kl_scale * krho
    return float(loss), gmu, grho


def _default_rho(spec: MLPSpec, layout, init_rho):
    """Per-layer pre-softplus init: std = 0.05 / sqrt(fan_in), or a constant."""
    rho = np.empty(layout.size)
    if init_rho is not None:
        rho.fill(init_rho)
        return rho
    holder = ParameterVector(rho, layout)
    for i in range(spec.num_layers):
        target = 0.05 / np.sqrt(spec.layer_widths[i])
        holder.segment(f"W{i}")[...] = inv_softplus(target)
        if spec.bias:
            holder.segment(f"b{i}")[...] = inv_softplus(target)
    return holder.values


def _local_reparam_step(spec, layout, mu_pv, rho_pv, batch, n_total, vi, rng):
    """One minibatch's loss and (mu, rho) gradients via pre-activation sampling."""
    X = batch.inputs
    B = X.shape[0]
    S = vi.train_mc_samples
    sigma_pv = ParameterVector(softplus(rho_pv.values), layout)
    gmu = np.zeros(layout.size)
    grho = np.zeros(layout.size)
    gmu_pv = ParameterVector(gmu, layout)
    grho_pv = ParameterVector(grho, layout)
    total_nll = 0.0
    scale = n_total / (B * S)
    for _ in range(S):
        # forward, caching inputs h, variances v, noise eps, sampled pre-acts z
        h = X
        cache = []
        for i in range(spec.num_layers):
            MuW = mu_pv.segment(f"W{i}")
            SigW = sigma_pv.segment(f"W{i}")
            m = h @ MuW
            v = (h**2) @ (SigW**2)
            if spec.bias:
                m = m + mu_pv.segment(f"b{i}")
                v = v + sigma_pv.segment(f"b{i}") ** 2
            v = np.maximum(v, _VAR_FLOOR)
            sd = np.sqrt(v)
            eps = rng.standard_normal(m.shape)
            z = m + sd * eps
            cache.append((h, sd, eps, z))
            if i < spec.num_layers - 1:
                h = _activate(spec.activation, z)
        raw = cache[-1][3]
        nll, delta = _per_example_nll_and_delta(spec, raw, batch.targets)
        if not np.all(np.isfinite(nll)):
            raise DivergenceError("non-finite likelihood during variational training")
        total_nll += float(nll.mean())
        delta = delta * scale
        for i in reversed(range(spec.num_layers)):
            h, sd, eps, z = cache[i]
            MuW = mu_pv.segment(f"W{i}")
            SigW = sigma_pv.segment(f"W{i}")
            rhoW = rho_pv.segment(f"W{i}")
            dv = (delta * eps) / (2.0 * sd)
            gmu_pv.segment(f"W{i}")[...] += h.T @ delta
            dSigW_sq = (h**2).T @ dv
            grho_pv.segment(f"W{i}")[...] += dSigW_sq * 2.0 * SigW * _sigmoid(rhoW)
            if spec.bias:
                gmu_pv.segment(f"b{i}")[...] += delta.sum(axis=0)
                sig_b = sigma_pv.segment(f"b{i}")
                grho_pv.segment(f"b{i}")[...] += dv.sum(axis=0) * 2.0 * sig_b * _sigmoid(rho_pv.segment(f"b{i}"))
            if i > 0:
                dh = delta @ MuW.T + 2.0 * h * (dv @ (SigW**2).T)
                delta = dh * _activate_grad(spec.activation, cache[i - 1][3])
    return total_nll / S, gmu, grho


def train_bbb(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    vi: VIConfig,
    init: ParameterVector | None = None,
    last_layer_only: bool = False,
) -> GaussianMeanField:
    """Stochastic mean-field VI with local reparameterization.

    Returns the fitted GaussianMeanField. ``last_layer_only`` freezes every
    variational parameter outside the output layer (finetuning protocol).
    """
    layout = layout_for(spec)
    D = layout.size
    phi = np.empty(2 * D)
    mu_view = phi[:D]
    rho_view = phi[D:]
    mu_view[...] = (init.values if init is not None else init_params(spec, cfg.seed).values)
    rho_view[...] = _default_rho(spec, layout, vi.init_rho)
    mu_pv = ParameterVector(mu_view, layout)
    rho_pv = ParameterVector(rho_view, layout)

    n_total = len(dataset)
    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    noise_rng = rng_from(child_seed(cfg.seed, 3))
    opt = make_optimizer(cfg)
    freeze = None
    if last_layer_only:
        freeze = np.zeros(D, dtype=bool)
        freeze[last_layer_slice(spec, layout)] = True

    gphi = np.zeros(2 * D)
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n_total, cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            try:
                nll, gmu, grho = _local_reparam_step(spec, layout, mu_pv, rho_pv, batch, n_total, vi, noise_rng)
            except DivergenceError as e:
                raise DivergenceError(f"variational training diverged at epoch {epoch}: {e}", epoch=epoch) from e
            sigma = softplus(rho_view)
            kmu, krho = _kl_grads(mu_view, sigma, rho_view, vi.prior_std)
            gmu += vi.kl_scale * kmu
            grho += vi.kl_scale * krho
            if freeze is not None:
                gmu[~freeze] = 0.0
                grho[~freeze] = 0.0
            gphi[:D] = gmu
            gphi[D:] = grho
            opt.step(phi, gphi)
        if not np.all(np.isfinite(phi)):
            raise DivergenceError(f"variational parameters diverged at epoch {epoch}", epoch=epoch)
    return GaussianMeanField(
        ParameterVector(mu_view.copy(), layout),
        ParameterVector(rho_view.copy(), layout),
    )


class MeanFieldPosterior(PosteriorApproximation):
    """Predictive wrapper over a fitted diagonal Gaussian."""

    algorithm = "bbb"

    def __init__(self, spec: MLPSpec, q: GaussianMeanField, algorithm: str = "bbb"):
        self.spec = spec
        self.q = q
        self.algorithm = algorithm

    def sample_params(self, seed) -> ParameterVector:
        return self.q.sample(seed)
