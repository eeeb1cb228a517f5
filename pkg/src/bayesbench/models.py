"""Tiny feedforward models with hand-written gradients.

Everything operates on flat float64 parameter vectors so that samplers and
posterior approximations can treat a whole network as a single point in R^D.
All randomness is routed through explicit seeds; there is no global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ACTIVATIONS = ("relu", "swish")
HEADS = ("categorical", "gaussian-fixed-std", "gaussian-learned-std")
SPLITS = ("train", "val", "test-id", "test-ood")

PROB_TOL = 1e-6  # row-stochasticity tolerance for predictive distributions


class ConfigurationError(ValueError):
    """Raised when shapes, layouts, or options are inconsistent."""


class DivergenceError(FloatingPointError):
    """Raised when a loss or training step produces non-finite values."""

    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


def rng_from(seed) -> np.random.Generator:
    """Fresh, independent generator for an integer seed or SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(seed, *key: int) -> np.random.SeedSequence:
    """Deterministic sub-stream of ``seed`` identified by an integer key path."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(key))


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of a small fully connected network.

    ``layer_widths`` runs input -> hidden... -> output. The head determines how
    raw outputs are interpreted: class logits, a Gaussian mean with a fixed
    output std, or interleaved (mean, log-std) pairs.
    """

    layer_widths: tuple
    activation: str = "relu"
    head: str = "categorical"
    dropout_rate: float = 0.0
    fixed_output_std: float = 0.1
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ConfigurationError("layer_widths needs at least input and output entries")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigurationError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.head == "categorical" and self.layer_widths[-1] < 2:
            raise ConfigurationError("categorical head needs output width >= 2")
        if self.head == "gaussian-fixed-std" and self.fixed_output_std <= 0:
            raise ConfigurationError("fixed_output_std must be positive")
        if self.head == "gaussian-learned-std" and self.layer_widths[-1] % 2 != 0:
            raise ConfigurationError("gaussian-learned-std head needs an even output width")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "head": self.head,
            "dropout_rate": self.dropout_rate,
            "fixed_output_std": self.fixed_output_std,
            "bias": self.bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "MLPSpec":
        return MLPSpec(
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            head=d.get("head", "categorical"),
            dropout_rate=d.get("dropout_rate", 0.0),
            fixed_output_std=d.get("fixed_output_std", 0.1),
            bias=d.get("bias", True),
        )


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple


@dataclass(frozen=True)
class ParameterLayout:
    """Ordered (layer, weight|bias) segment table over one flat vector."""

    segments: tuple

    @property
    def size(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.segments)

    def index(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def slice_of(self, name: str) -> slice:
        s = self.index(name)
        return slice(s.offset, s.offset + int(np.prod(s.shape)))


def layout_for(spec: MLPSpec) -> ParameterLayout:
    segments = []
    offset = 0
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        segments.append(Segment(f"W{i}", offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        if spec.bias:
            segments.append(Segment(f"b{i}", offset, (fan_out,)))
            offset += fan_out
    return ParameterLayout(tuple(segments))


@dataclass
class ParameterVector:
    """Flat view of all model parameters plus its segment table."""

    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.layout.size:
            raise ConfigurationError(
                f"parameter vector length {self.values.size} does not match layout size {self.layout.size}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped to its natural shape."""
        s = self.layout.index(name)
        return self.values[s.offset : s.offset + int(np.prod(s.shape))].reshape(s.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros(self.size), self.layout)


def zero_params(spec: MLPSpec) -> ParameterVector:
    layout = layout_for(spec)
    return ParameterVector(np.zeros(layout.size), layout)


def init_params(spec: MLPSpec, seed) -> ParameterVector:
    """Seeded fan-in (LeCun) initialization: W ~ N(0, 1/fan_in), b = 0."""
    rng = rng_from(seed)
    params = zero_params(spec)
    for i in range(spec.num_layers):
        fan_in = spec.layer_widths[i]
        W = params.segment(f"W{i}")
        W[...] = rng.standard_normal(W.shape) / np.sqrt(fan_in)
    return params


def reinit_last_layer(spec: MLPSpec, params: ParameterVector, seed) -> ParameterVector:
    """Copy of ``params`` with a freshly initialized output layer (the head)."""
    out = params.copy()
    rng = rng_from(seed)
    i = spec.num_layers - 1
    W = out.segment(f"W{i}")
    W[...] = rng.standard_normal(W.shape) / np.sqrt(spec.layer_widths[i])
    if spec.bias:
        out.segment(f"b{i}")[...] = 0.0
    return out


def last_layer_slice(spec: MLPSpec, layout: ParameterLayout) -> slice:
    """Contiguous flat slice holding the output layer's weight (and bias)."""
    i = spec.num_layers - 1
    start = layout.index(f"W{i}").offset
    return slice(start, layout.size)


@dataclass
class Dataset:
    """One split of a task: inputs, targets, and optional group tags."""

    inputs: np.ndarray
    targets: np.ndarray
    groups: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ConfigurationError("inputs must be an n x d matrix")
        self.targets = np.asarray(self.targets)
        if np.issubdtype(self.targets.dtype, np.integer):
            self.targets = self.targets.astype(np.int64)
        else:
            self.targets = self.targets.astype(np.float64)
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ConfigurationError("inputs and targets row counts disagree")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape[0] != self.inputs.shape[0]:
                raise ConfigurationError("groups row count disagrees with inputs")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)

    def subset(self, idx) -> "Dataset":
        groups = self.groups[idx] if self.groups is not None else None
        return Dataset(self.inputs[idx], self.targets[idx], groups, self.split)


@dataclass
class PredictionSet:
    """Per-example predictive distributions plus the labels they are scored on.

    Classification holds a row-stochastic ``probs`` matrix; regression holds
    per-example Gaussian ``means`` and ``stds``.
    """

    kind: str
    labels: np.ndarray
    probs: np.ndarray | None = None
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigurationError(f"unknown prediction kind {self.kind!r}")
        self.labels = np.asarray(self.labels)
        if self.kind == "classification":
            if self.probs is None:
                raise ConfigurationError("classification predictions need probs")
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
                raise ConfigurationError("probs must be n x C aligned with labels")
            rows = self.probs.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > PROB_TOL) or np.any(self.probs < -PROB_TOL):
                raise ConfigurationError("probability rows must sum to 1 within 1e-6")
            self.labels = self.labels.astype(np.int64)
        else:
            if self.means is None or self.stds is None:
                raise ConfigurationError("regression predictions need means and stds")
            self.means = np.asarray(self.means, dtype=np.float64).ravel()
            self.stds = np.asarray(self.stds, dtype=np.float64).ravel()
            if self.means.shape != self.stds.shape or self.means.shape[0] != self.labels.shape[0]:
                raise ConfigurationError("means/stds must align with labels")
            if np.any(self.stds <= 0):
                raise ConfigurationError("stds must be strictly positive")
            self.labels = self.labels.astype(np.float64)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape[0] != self.labels.shape[0]:
                raise ConfigurationError("groups must align with labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        if self.kind != "classification":
            raise ConfigurationError("num_classes only applies to classification")
        return self.probs.shape[1]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    # swish: x * sigmoid(x)
    return x * _sigmoid(x)


def _activate_grad(name, x):
    if name == "relu":
        return (x > 0.0).astype(np.float64)
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _dropout_masks(spec: MLPSpec, n: int, seed):
    """Inverted-dropout masks for each hidden layer, or None when no seed."""
    if seed is None or spec.dropout_rate == 0.0:
        return None
    rng = rng_from(seed)
    keep = 1.0 - spec.dropout_rate
    masks = []
    for w in spec.layer_widths[1:-1]:
        masks.append((rng.random((n, w)) < keep).astype(np.float64) / keep)
    return masks


def _forward_cached(spec, params, inputs, dropout_seed=None):
    """Forward pass keeping pre-activations and post-dropout activations."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.layer_widths[0]:
        raise ConfigurationError(
            f"input width {X.shape[1]} does not match layer_widths[0]={spec.layer_widths[0]}"
        )
    masks = _dropout_masks(spec, X.shape[0], dropout_seed)
    acts = [X]  # activation entering each layer
    pre = []
    h = X
    for i in range(spec.num_layers):
        z = h @ params.segment(f"W{i}")
        if spec.bias:
            z = z + params.segment(f"b{i}")
        pre.append(z)
        if i < spec.num_layers - 1:
            h = _activate(spec.activation, z)
            if masks is not None:
                h = h * masks[i]
            acts.append(h)
    return pre, acts, masks


def forward(spec: MLPSpec, params: ParameterVector, inputs, dropout_seed=None) -> np.ndarray:
    """Raw network outputs: logits, means, or (mean, log-std) pairs.

    Deterministic given (params, inputs, dropout_seed); without a seed the
    expectation network is evaluated (inverted dropout needs no rescaling).
    """
    pre, _, _ = _forward_cached(spec, params, inputs, dropout_seed)
    return pre[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def split_gaussian_outputs(spec: MLPSpec, raw: np.ndarray):
    """Per-example (mean, std) implied by raw outputs under a Gaussian head."""
    if spec.head == "gaussian-fixed-std":
        mean = raw[:, 0]
        std = np.full_like(mean, spec.fixed_output_std)
    elif spec.head == "gaussian-learned-std":
        mean = raw[:, 0]
        std = np.exp(raw[:, 1])
    else:
        raise ConfigurationError("not a gaussian head")
    return mean, std


def _per_example_nll_and_delta(spec, raw, targets):
    """Per-example NLL and dNLL/draw (unscaled by batch size)."""
    n = raw.shape[0]
    if spec.head == "categorical":
        logp = log_softmax(raw)
        y = np.asarray(targets, dtype=np.int64)
        nll = -logp[np.arange(n), y]
        delta = softmax(raw)
        delta[np.arange(n), y] -= 1.0
        return nll, delta
    y = np.asarray(targets, dtype=np.float64).ravel()
    if spec.head == "gaussian-fixed-std":
        std = spec.fixed_output_std
        mean = raw[:, 0]
        nll = 0.5 * np.log(2.0 * np.pi * std**2) + (y - mean) ** 2 / (2.0 * std**2)
        delta = np.zeros_like(raw)
        delta[:, 0] = (mean - y) / std**2
        return nll, delta
    # gaussian-learned-std: raw columns are (mean, log-std)
    mean, s = raw[:, 0], raw[:, 1]
    nll = 0.5 * np.log(2.0 * np.pi) + s + (y - mean) ** 2 / (2.0 * np.exp(2.0 * s))
    delta = np.zeros_like(raw)
    delta[:, 0] = (mean - y) / np.exp(2.0 * s)
    delta[:, 1] = 1.0 - (y - mean) ** 2 / np.exp(2.0 * s)
    return nll, delta


def _backprop(spec, params, pre, acts, masks, delta_out):
    """Accumulate parameter gradients and squared per-example gradients.

    ``delta_out`` is dLoss/d(raw outputs), already carrying any 1/n factor.
    Returns (grad, sq_grad_sums) where sq_grad_sums holds the per-example
    squared-gradient totals segment by segment (used by curvature estimates).
    """
    grad = ParameterVector(np.zeros(params.size), params.layout)
    sq = ParameterVector(np.zeros(params.size), params.layout)
    delta = delta_out
    for i in reversed(range(spec.num_layers)):
        h = acts[i]
        grad.segment(f"W{i}")[...] = h.T @ delta
        sq.segment(f"W{i}")[...] = (h**2).T @ (delta**2)
        if spec.bias:
            grad.segment(f"b{i}")[...] = delta.sum(axis=0)
            sq.segment(f"b{i}")[...] = (delta**2).sum(axis=0)
        if i > 0:
            delta = delta @ params.segment(f"W{i}").T
            if masks is not None:
                delta = delta * masks[i - 1]
            delta = delta * _activate_grad(spec.activation, pre[i - 1])
    return grad, sq


def nll_and_grad(spec: MLPSpec, params: ParameterVector, batch: Dataset, dropout_seed=None):
    """Mean negative log-likelihood over the batch and its gradient."""
    if len(batch) == 0:
        raise ConfigurationError("batch must be nonempty")
    pre, acts, masks = _forward_cached(spec, params, batch.inputs, dropout_seed)
    nll, delta = _per_example_nll_and_delta(spec, pre[-1], batch.targets)
    if not np.all(np.isfinite(nll)):
        bad = int(np.flatnonzero(~np.isfinite(nll))[0])
        raise DivergenceError(f"non-finite NLL at batch index {bad}", batch_index=bad)
    n = len(batch)
    grad, _ = _backprop(spec, params, pre, acts, masks, delta / n)
    return float(nll.mean()), grad


def nll_grad_and_sqgrad(spec: MLPSpec, params: ParameterVector, batch: Dataset, dropout_seed=None):
    """Like nll_and_grad but also returns the mean squared per-example gradient.

    The squared term is the diagonal empirical Fisher of the per-example NLL,
    which curvature-based updates consume.
    """
    if len(batch) == 0:
        raise ConfigurationError("batch must be nonempty")
    pre, acts, masks = _forward_cached(spec, params, batch.inputs, dropout_seed)
    nll, delta = _per_example_nll_and_delta(spec, pre[-1], batch.targets)
    if not np.all(np.isfinite(nll)):
        bad = int(np.flatnonzero(~np.isfinite(nll))[0])
        raise DivergenceError(f"non-finite NLL at batch index {bad}", batch_index=bad)
    n = len(batch)
    grad, sq = _backprop(spec, params, pre, acts, masks, delta)
    grad.values /= n
    sq.values /= n
    return float(nll.mean()), grad, sq


def log_prior_and_grad(params: ParameterVector, prior_std: float):
    """log N(params; 0, prior_std^2 I) and its gradient -params/prior_std^2."""
    if prior_std <= 0:
        raise ConfigurationError("prior_std must be positive")
    d = params.size
    var = prior_std**2
    logp = -0.5 * d * np.log(2.0 * np.pi * var) - 0.5 * float(params.values @ params.values) / var
    grad = params.with_values(-params.values / var)
    return float(logp), grad


def predict(spec: MLPSpec, params: ParameterVector, data: Dataset, dropout_seed=None) -> PredictionSet:
    """Single-parameter-vector predictive distribution on a dataset."""
    raw = forward(spec, params, data.inputs, dropout_seed)
    if spec.head == "categorical":
        return PredictionSet("classification", data.targets, probs=softmax(raw), groups=data.groups)
    mean, std = split_gaussian_outputs(spec, raw)
    return PredictionSet("regression", data.targets, means=mean, stds=std, groups=data.groups)


def bma_predict(member_predictions) -> PredictionSet:
    """Bayesian model average of per-member predictive distributions.

    Classification averages the probability rows. Regression moment-matches
    the mixture: mean of means, std from E[sigma^2 + mu^2] - mean^2.
    """
    members = list(member_predictions)
    if not members:
        raise ConfigurationError("bma_predict needs at least one member")
    first = members[0]
    for m in members[1:]:
        if m.kind != first.kind:
            raise ConfigurationError("mixed prediction kinds in BMA")
        if len(m) != len(first) or not np.array_equal(m.labels, first.labels):
            raise ConfigurationError("BMA members must share shape and labels")
    if first.kind == "classification":
        probs = np.mean([m.probs for m in members], axis=0)
        return PredictionSet("classification", first.labels, probs=probs, groups=first.groups)
    means = np.mean([m.means for m in members], axis=0)
    second = np.mean([m.stds**2 + m.means**2 for m in members], axis=0)
    var = np.maximum(second - means**2, 1e-30)
    return PredictionSet("regression", first.labels, means=means, stds=np.sqrt(var), groups=first.groups)
