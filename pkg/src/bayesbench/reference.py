"""Ground-truth posteriors at desk scale.

A plain Hamiltonian Monte Carlo sampler (leapfrog + Metropolis, identity mass
matrix, single chain per seed) plus the analytic linear-Gaussian conjugate
posterior that anchors every oracle test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import (
    ConfigurationError,
    Dataset,
    MLPSpec,
    ParameterVector,
    child_seed,
    layout_for,
    log_prior_and_grad,
    nll_and_grad,
    rng_from,
)
from .posteriors.base import ParticlePosterior


@dataclass(frozen=True)
class HMCConfig:
    step_size: float = 0.1
    leapfrog_steps: int = 20
    num_samples: int = 1000
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    prior_std: float = 1.0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.leapfrog_steps <= 0:
            raise ConfigurationError("leapfrog_steps must be positive")
        if self.num_samples < 1:
            raise ConfigurationError("num_samples must be at least 1")
        if self.burn_in < 0:
            raise ConfigurationError("burn_in must be nonnegative")
        if self.thinning < 1:
            raise ConfigurationError("thinning must be at least 1")
        if self.prior_std <= 0:
            raise ConfigurationError("prior_std must be positive")

    def to_dict(self) -> dict:
        return {
            "step_size": self.step_size,
            "leapfrog_steps": self.leapfrog_steps,
            "num_samples": self.num_samples,
            "burn_in": self.burn_in,
            "thinning": self.thinning,
            "seed": self.seed,
            "prior_std": self.prior_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "HMCConfig":
        return HMCConfig(**d)


@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    mean_potential: float
    sample_mean: np.ndarray
    sample_var: np.ndarray
    step_size: float = 0.0
    warnings: list = field(default_factory=list)


@dataclass
class ConjugateLinearModel:
    """y = X w + noise, Gaussian prior on w: everything in closed form."""

    design: np.ndarray
    targets: np.ndarray
    noise_std: float
    prior_std: float

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if self.design.ndim != 2:
            raise ConfigurationError("design must be a matrix")
        if self.design.shape[0] != self.targets.shape[0]:
            raise ConfigurationError("design and targets row counts disagree")
        if self.noise_std <= 0 or self.prior_std <= 0:
            raise ConfigurationError("noise_std and prior_std must be positive")

    @property
    def dim(self) -> int:
        return self.design.shape[1]


def analytic_linear_gaussian_posterior(model: ConjugateLinearModel):
    """Posterior over weights: Sigma = (X'X/s_n^2 + I/s_p^2)^-1, mu = Sigma X'y/s_n^2."""
    X, y = model.design, model.targets
    d = model.dim
    precision = X.T @ X / model.noise_std**2 + np.eye(d) / model.prior_std**2
    cov = np.linalg.inv(precision)
    mean = cov @ (X.T @ y) / model.noise_std**2
    return mean, cov


def conjugate_log_posterior(model: ConjugateLinearModel):
    """Unnormalized log posterior callable (value, gradient) for samplers."""
    X, y = model.design, model.targets
    nvar, pvar = model.noise_std**2, model.prior_std**2

    def logpost(theta: np.ndarray):
        r = y - X @ theta
        val = -0.5 * float(r @ r) / nvar - 0.5 * float(theta @ theta) / pvar
        grad = X.T @ r / nvar - theta / pvar
        return val, grad

    return logpost


def conjugate_predictive(model: ConjugateLinearModel, inputs: np.ndarray):
    """Exact posterior predictive: mean X mu*, var s_n^2 + x' Sigma* x per row."""
    mean_w, cov_w = analytic_linear_gaussian_posterior(model)
    X = np.asarray(inputs, dtype=np.float64)
    mean = X @ mean_w
    var = model.noise_std**2 + np.einsum("ij,jk,ik->i", X, cov_w, X)
    return mean, np.sqrt(var)


def leapfrog(position, momentum, grad_fn, step_size: float, num_steps: int):
    """Symplectic integrator for H(q, p) = -logpost(q) + p'p/2.

    grad_fn returns the gradient of the log posterior. Running the output
    with negated momentum retraces the trajectory (reversibility).
    """
    q = np.array(position, dtype=np.float64, copy=True)
    p = np.array(momentum, dtype=np.float64, copy=True)
    p = p + 0.5 * step_size * grad_fn(q)
    for step in range(num_steps):
        q = q + step_size * p
        g = grad_fn(q)
        if step < num_steps - 1:
            p = p + step_size * g
        else:
            p = p + 0.5 * step_size * g
    return q, p


def hmc_sample(logpost_and_grad, dim: int, cfg: HMCConfig, initial=None, tune_step_size: bool = False):
    """Single-chain HMC: returns (samples, ChainDiagnostics).

    Proposals integrate leapfrog_steps of size step_size and are accepted by
    the Metropolis rule in log space. An acceptance rate below 0.2 is flagged
    in the diagnostics. With tune_step_size, the step size doubles or halves
    during burn-in toward an acceptance rate of roughly 0.7.
    """
    rng = rng_from(cfg.seed)
    if initial is not None:
        q = np.asarray(initial, dtype=np.float64).ravel().copy()
        if q.size != dim:
            raise ConfigurationError("initial point has wrong dimension")
    else:
        q = 0.1 * rng.standard_normal(dim)
    logp, _ = logpost_and_grad(q)
    if not np.isfinite(logp):
        raise FloatingPointError("log posterior is not finite at the chain start")

    def grad_fn(x):
        return logpost_and_grad(x)[1]

    eps = cfg.step_size
    total = cfg.burn_in + cfg.num_samples * cfg.thinning
    samples = []
    accepted = 0
    window_acc, window_n = 0, 0
    potentials = []
    for it in range(total):
        p0 = rng.standard_normal(dim)
        q_new, p_new = leapfrog(q, p0, grad_fn, eps, cfg.leapfrog_steps)
        logp_new, _ = logpost_and_grad(q_new)
        if not np.isfinite(logp_new):
            accept = False  # reject the excursion, keep the chain alive
        else:
            log_ratio = (logp_new - 0.5 * p_new @ p_new) - (logp - 0.5 * p0 @ p0)
            accept = np.log(rng.random()) < log_ratio
        if accept:
            q, logp = q_new, logp_new
            accepted += 1
            window_acc += 1
        window_n += 1
        if tune_step_size and it < cfg.burn_in and window_n >= 25:
            rate = window_acc / window_n
            if rate < 0.55:
                eps *= 0.5
            elif rate > 0.85:
                eps *= 2.0
            window_acc, window_n = 0, 0
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            samples.append(q.copy())
            potentials.append(-logp)
    arr = np.asarray(samples)
    rate = accepted / total
    diag = ChainDiagnostics(
        acceptance_rate=rate,
        mean_potential=float(np.mean(potentials)),
        sample_mean=arr.mean(axis=0),
        sample_var=arr.var(axis=0),
        step_size=eps,
    )
    if rate < 0.2:
        msg = f"HMC acceptance rate {rate:.3f} below 0.2; step size {eps} is likely too large"
        diag.warnings.append(msg)
        warnings.warn(msg)
    return samples, diag


def network_log_posterior(spec: MLPSpec, dataset: Dataset, prior_std: float):
    """Full-batch log posterior (value, grad) over flat network parameters."""
    layout = layout_for(spec)
    n = len(dataset)

    def logpost(theta: np.ndarray):
        pv = ParameterVector(np.asarray(theta, dtype=np.float64), layout)
        nll, g_nll = nll_and_grad(spec, pv, dataset)
        lp, g_p = log_prior_and_grad(pv, prior_std)
        val = -n * nll + lp
        grad = -n * g_nll.values + g_p.values
        return val, grad

    return logpost


def hmc_posterior(spec: MLPSpec, dataset: Dataset, cfg: HMCConfig, initial=None, tune_step_size: bool = True):
    """HMC over a network's weights, bridged to the common predictive contract."""
    layout = layout_for(spec)
    logpost = network_log_posterior(spec, dataset, cfg.prior_std)
    init_vals = initial.values if isinstance(initial, ParameterVector) else initial
    samples, diag = hmc_sample(logpost, layout.size, cfg, initial=init_vals, tune_step_size=tune_step_size)
    particles = [ParameterVector(s, layout) for s in samples]
    post = ParticlePosterior(spec, particles)
    post.algorithm = "hmc"
    post.diagnostics = diag
    return post


def multi_chain_agreement(logpost_and_grad, dim: int, cfg: HMCConfig, seeds=(0, 1, 2)):
    """Optional diagnostic: max cross-chain gap in per-parameter means/stds."""
    means, stds = [], []
    for s in seeds:
        _, diag = hmc_sample(logpost_and_grad, dim, HMCConfig(**{**cfg.to_dict(), "seed": int(s)}))
        means.append(diag.sample_mean)
        stds.append(np.sqrt(diag.sample_var))
    means = np.asarray(means)
    stds = np.asarray(stds)
    return {
        "max_mean_gap": float(np.max(means.max(axis=0) - means.min(axis=0))),
        "max_std_gap": float(np.max(stds.max(axis=0) - stds.min(axis=0))),
        "per_chain_means": means,
        "per_chain_stds": stds,
    }
