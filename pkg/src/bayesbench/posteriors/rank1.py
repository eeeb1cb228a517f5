"""Rank-1 factor VI: Gaussian row/column scaling factors over a point estimate.

Each layer's effective weight for a component is W * (r s^T), realized as
a = s * ((x * r) @ W) + b. Weights and biases stay point estimates; only the
factors carry distributions, with a Gaussian prior centered at 1 so the
multiplicative identity is the prior mean.
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
    PredictionSet,
    _activate,
    _activate_grad,
    _per_example_nll_and_delta,
    child_seed,
    init_params,
    layout_for,
    predict,
    rng_from,
)
from ._optim import epoch_batches, make_optimizer
from .base import PosteriorApproximation, TrainConfig, VIConfig
from .vi import _sigmoid, inv_softplus, softplus


@dataclass
class Rank1Factor:
    """Variational factor distributions for one layer of one component."""

    r_mu: np.ndarray
    r_rho: np.ndarray
    s_mu: np.ndarray
    s_rho: np.ndarray


@dataclass
class Rank1State:
    base: ParameterVector
    factors: list  # [component][layer] -> Rank1Factor
    components: int

    def __post_init__(self):
        if self.components < 1 or len(self.factors) != self.components:
            raise ConfigurationError("factors must hold one entry per component")


def factor_kl(mu, rho, prior_std: float):
    """KL( N(mu, softplus(rho)^2) || N(1, prior_std^2) ) summed over entries."""
    sigma = softplus(rho)
    pv = prior_std**2
    return float(0.5 * np.sum((mu - 1.0) ** 2 / pv + sigma**2 / pv - 1.0 - 2.0 * np.log(sigma) + np.log(pv)))


def _factor_kl_grads(mu, rho, prior_std):
    sigma = softplus(rho)
    pv = prior_std**2
    dmu = (mu - 1.0) / pv
    drho = (sigma / pv - 1.0 / sigma) * _sigmoid(rho)
    return dmu, drho


def effective_params(spec: MLPSpec, base: ParameterVector, rs_pairs) -> ParameterVector:
    """Collapse factors into a flat weight vector: W_eff = r row-scales W col-scaled by s."""
    out = base.copy()
    for i, (r, s) in enumerate(rs_pairs):
        W = out.segment(f"W{i}")
        W[...] = r[:, None] * W * s[None, :]
    return out


def _forward_backward_rank1(spec, base, rs_pairs, batch, delta_scale):
    """Loss pieces and gradients (base W/b, per-layer r/s) for sampled factors."""
    X = batch.inputs
    h = X
    cache = []
    for i in range(spec.num_layers):
        W = base.segment(f"W{i}")
        r, s = rs_pairs[i]
        u = (h * r) @ W
        a = s * u
        if spec.bias:
            a = a + base.segment(f"b{i}")
        cache.append((h, u, a))
        if i < spec.num_layers - 1:
            h = _activate(spec.activation, a)
    raw = cache[-1][2]
    nll, delta = _per_example_nll_and_delta(spec, raw, batch.targets)
    if not np.all(np.isfinite(nll)):
        raise DivergenceError("non-finite likelihood in factorized training")
    gbase = base.zeros_like()
    gfactors = []
    delta = delta * delta_scale
    for i in reversed(range(spec.num_layers)):
        h, u, _ = cache[i]
        W = base.segment(f"W{i}")
        r, s = rs_pairs[i]
        ds = (delta * u).sum(axis=0)
        du = delta * s
        gbase.segment(f"W{i}")[...] = (h * r).T @ du
        if spec.bias:
            gbase.segment(f"b{i}")[...] = delta.sum(axis=0)
        dhr = du @ W.T
        dr = (h * dhr).sum(axis=0)
        gfactors.append((dr, ds))
        if i > 0:
            dh = dhr * r
            delta = dh * _activate_grad(spec.activation, cache[i - 1][2])
    gfactors.reverse()
    return float(nll.mean()), gbase, gfactors


def train_rank1(
    spec: MLPSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    vi: VIConfig,
    components: int,
    init: ParameterVector | None = None,
    last_layer_only: bool = False,
) -> Rank1State:
    """ELBO training of base weights plus per-component rank-1 factors.

    The likelihood is averaged over components and factor draws; the summed
    factor KL is scaled by kl_scale / components.
    """
    if components < 1:
        raise ConfigurationError("components must be at least 1")
    layout = layout_for(spec)
    D = layout.size
    L = spec.num_layers
    widths = spec.layer_widths

    # flat optimization vector: [base | per component, per layer: r_mu r_rho s_mu s_rho]
    sizes = []
    for _ in range(components):
        for i in range(L):
            sizes += [widths[i], widths[i], widths[i + 1], widths[i + 1]]
    phi = np.empty(D + sum(sizes))
    gphi = np.zeros_like(phi)
    base_view = phi[:D]
    base_view[...] = (init.values if init is not None else init_params(spec, cfg.seed).values)
    base_pv = ParameterVector(base_view, layout)

    views = []
    gviews = []
    off = D
    rho0 = vi.init_rho if vi.init_rho is not None else float(inv_softplus(np.array(0.05)))
    jit_rng = rng_from(child_seed(cfg.seed, 5))
    for c in range(components):
        vc, gc = [], []
        for i in range(L):
            quad, gquad = [], []
            for size in (widths[i], widths[i], widths[i + 1], widths[i + 1]):
                quad.append(phi[off : off + size])
                gquad.append(gphi[off : off + size])
                off += size
            r_mu, r_rho, s_mu, s_rho = quad
            r_mu[...] = 1.0 + 0.1 * jit_rng.standard_normal(r_mu.size)
            s_mu[...] = 1.0 + 0.1 * jit_rng.standard_normal(s_mu.size)
            r_rho[...] = rho0
            s_rho[...] = rho0
            vc.append(quad)
            gc.append(gquad)
        views.append(vc)
        gviews.append(gc)

    n_total = len(dataset)
    S = vi.train_mc_samples
    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    noise_rng = rng_from(child_seed(cfg.seed, 3))
    opt = make_optimizer(cfg)
    last = L - 1

    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n_total, cfg.batch_size, shuffle_rng):
            batch = dataset.subset(idx)
            gphi[...] = 0.0
            scale = n_total / (len(batch) * S * components)
            for c in range(components):
                for _ in range(S):
                    rs_pairs = []
                    eps_list = []
                    for i in range(L):
                        r_mu, r_rho, s_mu, s_rho = views[c][i]
                        er = noise_rng.standard_normal(r_mu.size)
                        es = noise_rng.standard_normal(s_mu.size)
                        rs_pairs.append((r_mu + softplus(r_rho) * er, s_mu + softplus(s_rho) * es))
                        eps_list.append((er, es))
                    try:
                        _, gbase, gfac = _forward_backward_rank1(spec, base_pv, rs_pairs, batch, scale)
                    except DivergenceError as e:
                        raise DivergenceError(
                            f"factorized training diverged at epoch {epoch}: {e}", epoch=epoch
                        ) from e
                    gphi[:D] += gbase.values
                    for i in range(L):
                        dr, ds = gfac[i]
                        er, es = eps_list[i]
                        r_mu, r_rho, s_mu, s_rho = views[c][i]
                        g_r_mu, g_r_rho, g_s_mu, g_s_rho = gviews[c][i]
                        g_r_mu += dr
                        g_r_rho += dr * er * _sigmoid(r_rho)
                        g_s_mu += ds
                        g_s_rho += ds * es * _sigmoid(s_rho)
            kl_w = vi.kl_scale / components
            for c in range(components):
                for i in range(L):
                    r_mu, r_rho, s_mu, s_rho = views[c][i]
                    g_r_mu, g_r_rho, g_s_mu, g_s_rho = gviews[c][i]
                    dmu, drho = _factor_kl_grads(r_mu, r_rho, vi.prior_std)
                    g_r_mu += kl_w * dmu
                    g_r_rho += kl_w * drho
                    dmu, drho = _factor_kl_grads(s_mu, s_rho, vi.prior_std)
                    g_s_mu += kl_w * dmu
                    g_s_rho += kl_w * drho
            if cfg.weight_decay > 0.0:
                gphi[:D] += cfg.weight_decay * base_view
            if last_layer_only:
                # freeze factor distributions of every non-output layer
                for c in range(components):
                    for i in range(L - 1):
                        for g in gviews[c][i]:
                            g[...] = 0.0
            opt.step(phi, gphi)
        if not np.all(np.isfinite(phi)):
            raise DivergenceError(f"factorized parameters diverged at epoch {epoch}", epoch=epoch)

    factors = [
        [
            Rank1Factor(
                r_mu=views[c][i][0].copy(),
                r_rho=views[c][i][1].copy(),
                s_mu=views[c][i][2].copy(),
                s_rho=views[c][i][3].copy(),
            )
            for i in range(L)
        ]
        for c in range(components)
    ]
    return Rank1State(ParameterVector(base_view.copy(), layout), factors, components)


def rank1_total_kl(state: Rank1State, prior_std: float) -> float:
    total = 0.0
    for comp in state.factors:
        for f in comp:
            total += factor_kl(f.r_mu, f.r_rho, prior_std)
            total += factor_kl(f.s_mu, f.s_rho, prior_std)
    return total


class Rank1Posterior(PosteriorApproximation):
    """Predictive mixture over components, factors sampled per draw."""

    algorithm = "rank1"

    def __init__(self, spec: MLPSpec, state: Rank1State):
        self.spec = spec
        self.state = state

    def _draw_pairs(self, c: int, rng):
        pairs = []
        for f in self.state.factors[c]:
            r = f.r_mu + softplus(f.r_rho) * rng.standard_normal(f.r_mu.size)
            s = f.s_mu + softplus(f.s_rho) * rng.standard_normal(f.s_mu.size)
            pairs.append((r, s))
        return pairs

    def sample_params(self, seed) -> ParameterVector:
        rng = rng_from(seed)
        c = int(rng.integers(self.state.components))
        return effective_params(self.spec, self.state.base, self._draw_pairs(c, rng))

    def member_predictions(self, data: Dataset, eval_samples: int = 10, seed=0):
        C = self.state.components
        per_comp = max(1, int(np.floor(eval_samples / C + 0.5)))
        members = []
        for c in range(C):
            rng = rng_from(child_seed(seed, c))
            for _ in range(per_comp):
                params = effective_params(self.spec, self.state.base, self._draw_pairs(c, rng))
                members.append(predict(self.spec, params, data))
        return members
