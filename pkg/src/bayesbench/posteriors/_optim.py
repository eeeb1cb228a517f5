"""Minibatch iteration and first-order optimizers over flat arrays."""

from __future__ import annotations

import numpy as np

from ..models import ConfigurationError


class SGDMomentum:
    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = None

    def step(self, values: np.ndarray, grad: np.ndarray):
        if self.velocity is None:
            self.velocity = np.zeros_like(values)
        self.velocity *= self.momentum
        self.velocity += grad
        values -= self.lr * self.velocity


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray):
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg):
    if cfg.optimizer == "sgd-momentum":
        return SGDMomentum(cfg.learning_rate, cfg.momentum)
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    raise ConfigurationError(f"unknown optimizer {cfg.optimizer!r}")


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffled minibatch index arrays covering one epoch."""
    if batch_size > n:
        raise ConfigurationError(f"batch_size {batch_size} exceeds training-set size {n}")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]
