"""Calibration, likelihood, fidelity, and task accuracy metrics.

All functions are pure: they read immutable prediction sets and return
scalars or small tables, so they are safe to call from worker processes.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .models import ConfigurationError, PredictionSet

PROB_FLOOR = 1e-12


def default_confidence_levels(num: int = 10):
    """Midpoints (2m-1)/2M of M equal slices of (0,1)."""
    return tuple((2 * m - 1) / (2 * num) for m in range(1, num + 1))


@dataclass(frozen=True)
class MetricConfig:
    num_bins: int = 10
    confidence_levels: tuple = field(default_factory=default_confidence_levels)

    def __post_init__(self):
        if self.num_bins < 2:
            raise ConfigurationError("num_bins must be >= 2")
        levels = tuple(float(v) for v in self.confidence_levels)
        if not levels:
            raise ConfigurationError("need at least one confidence level")
        if any(not (0.0 < v < 1.0) for v in levels):
            raise ConfigurationError("confidence levels must lie strictly inside (0,1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigurationError("confidence levels must be strictly increasing")
        object.__setattr__(self, "confidence_levels", levels)


@dataclass
class CalibrationBins:
    """Reliability-diagram table: one row per confidence bin."""

    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count,accuracy,confidence\n")
        for m in range(len(self.counts)):
            buf.write(
                f"{self.edges[m]:.17g},{self.edges[m + 1]:.17g},"
                f"{int(self.counts[m])},{self.accuracy[m]:.17g},{self.confidence[m]:.17g}\n"
            )
        return buf.getvalue()


def _require_classification(preds: PredictionSet, what: str):
    if preds.kind != "classification":
        raise ConfigurationError(f"{what} needs classification predictions")
    if preds.labels.shape[0] == 0:
        raise ConfigurationError(f"{what} needs at least one prediction")


def ece_sece(preds: PredictionSet, cfg: MetricConfig | None = None):
    """Binned calibration error, unsigned and signed, plus the bin table.

    Signed gaps are accuracy minus confidence, so negative means overconfident.
    """
    cfg = cfg or MetricConfig()
    _require_classification(preds, "ece_sece")
    m_bins = cfg.num_bins
    conf = preds.probs.max(axis=1)
    correct = (np.argmax(preds.probs, axis=1) == preds.labels).astype(np.float64)
    n = conf.shape[0]

    # left-open right-closed bins; confidence 0 falls into bin 1
    edges = np.array([m / m_bins for m in range(m_bins + 1)])
    counts = np.zeros(m_bins, dtype=np.int64)
    accuracy = np.zeros(m_bins)
    confidence = np.zeros(m_bins)
    for m in range(m_bins):
        if m == 0:
            mask = conf <= edges[1]
        elif m == m_bins - 1:
            mask = conf > edges[m]
        else:
            mask = (conf > edges[m]) & (conf <= edges[m + 1])
        counts[m] = mask.sum()
        if counts[m]:
            accuracy[m] = correct[mask].mean()
            confidence[m] = conf[mask].mean()

    weights = counts / n
    gaps = accuracy - confidence
    ece = float(np.sum(weights * np.abs(gaps)))
    sece = float(np.sum(weights * gaps))
    return ece, sece, CalibrationBins(edges, counts, accuracy, confidence)


def qce_sqce(preds: PredictionSet, cfg: MetricConfig | None = None):
    """Central-interval coverage error for Gaussian regression predictions.

    Returns (qce, sqce, table) where table rows are (level, observed coverage).
    """
    cfg = cfg or MetricConfig()
    if preds.kind != "regression":
        raise ConfigurationError("qce_sqce needs regression predictions")
    if np.any(preds.stds <= 0):
        raise ConfigurationError("qce_sqce needs strictly positive stds")
    levels = np.asarray(cfg.confidence_levels)
    z = norm.ppf((1.0 + levels) / 2.0)
    resid = np.abs(preds.labels - preds.means)
    # coverage per level: fraction of targets inside mean +/- z*std
    inside = resid[None, :] <= z[:, None] * preds.stds[None, :]
    p_obs = inside.mean(axis=1)
    qce = float(np.mean(np.abs(p_obs - levels)))
    sqce = float(np.mean(p_obs - levels))
    return qce, sqce, np.column_stack([levels, p_obs])


def _clamped_log(p: np.ndarray, what: str) -> np.ndarray:
    if np.any(p < PROB_FLOOR):
        warnings.warn(f"{what}: probabilities below {PROB_FLOOR:g} clamped", RuntimeWarning)
    return np.log(np.clip(p, PROB_FLOOR, None))


def _label_probabilities(preds: PredictionSet) -> np.ndarray:
    if preds.kind == "classification":
        return preds.probs[np.arange(preds.labels.shape[0]), preds.labels]
    resid = preds.labels - preds.means
    return np.exp(-0.5 * (resid / preds.stds) ** 2) / (preds.stds * np.sqrt(2.0 * np.pi))


def nll(preds: PredictionSet) -> float:
    """Mean negative log-likelihood of the true targets."""
    if preds.labels.shape[0] == 0:
        raise ConfigurationError("nll needs at least one prediction")
    return float(-np.mean(_clamped_log(_label_probabilities(preds), "nll")))


def lml_pslml(per_sample_likelihoods: np.ndarray):
    """Joint and per-sample log marginal likelihood from an n x S likelihood matrix.

    Both include the 1/S normalization, i.e. they are log-means over samples.
    """
    likes = np.asarray(per_sample_likelihoods, dtype=np.float64)
    if likes.ndim != 2 or likes.shape[0] == 0 or likes.shape[1] == 0:
        raise ConfigurationError("need a nonempty n x S likelihood matrix")
    if np.any(likes < 0):
        raise ConfigurationError("likelihoods must be nonnegative")
    log_likes = _clamped_log(likes, "lml_pslml")
    log_s = np.log(likes.shape[1])
    lml = float(logsumexp(log_likes.sum(axis=0)) - log_s)
    pslml = float(np.sum(logsumexp(log_likes, axis=1) - log_s))
    return lml, pslml


def _check_aligned(preds_a: PredictionSet, preds_b: PredictionSet, what: str):
    if preds_a.kind != "classification" or preds_b.kind != "classification":
        raise ConfigurationError(f"{what} needs classification predictions")
    if preds_a.probs.shape != preds_b.probs.shape:
        raise ConfigurationError(f"{what}: prediction sets have mismatched shapes")
    if not np.array_equal(preds_a.labels, preds_b.labels):
        raise ConfigurationError(f"{what}: prediction sets score different targets")


def total_variation(preds_a: PredictionSet, preds_b: PredictionSet) -> float:
    """Mean pointwise total variation distance between two predictive sets."""
    _check_aligned(preds_a, preds_b, "total_variation")
    return float(np.mean(0.5 * np.abs(preds_a.probs - preds_b.probs).sum(axis=1)))


def top1_agreement(preds_a: PredictionSet, preds_b: PredictionSet) -> float:
    """Fraction of examples on which the two argmax predictions coincide."""
    _check_aligned(preds_a, preds_b, "top1_agreement")
    return float(np.mean(np.argmax(preds_a.probs, axis=1) == np.argmax(preds_b.probs, axis=1)))


def _group_accuracies(preds: PredictionSet) -> np.ndarray:
    if preds.groups is None:
        raise ConfigurationError("group metrics need group tags on the predictions")
    correct = np.argmax(preds.probs, axis=1) == preds.labels
    return np.array([correct[preds.groups == g].mean() for g in np.unique(preds.groups)])


def task_accuracy(preds: PredictionSet, kind: str, quantile: float | None = None) -> float:
    """Headline task metric: accuracy, macro_f1, pearson, worst_group, or quantile_accuracy."""
    if kind == "accuracy":
        _require_classification(preds, "accuracy")
        return float(np.mean(np.argmax(preds.probs, axis=1) == preds.labels))
    if kind == "macro_f1":
        _require_classification(preds, "macro_f1")
        predicted = np.argmax(preds.probs, axis=1)
        scores = []
        for c in range(preds.probs.shape[1]):
            tp = np.sum((predicted == c) & (preds.labels == c))
            fp = np.sum((predicted == c) & (preds.labels != c))
            fn = np.sum((predicted != c) & (preds.labels == c))
            denom = 2 * tp + fp + fn
            # absent classes keep F1 = 0 rather than being skipped
            scores.append(2.0 * tp / denom if denom > 0 else 0.0)
        return float(np.mean(scores))
    if kind == "pearson":
        if preds.kind != "regression":
            raise ConfigurationError("pearson needs regression predictions")
        t = preds.labels - preds.labels.mean()
        m = preds.means - preds.means.mean()
        denom = np.sqrt(np.sum(t * t) * np.sum(m * m))
        if denom == 0:
            raise ConfigurationError("pearson is undefined for constant targets or means")
        return float(np.sum(t * m) / denom)
    if kind == "worst_group":
        _require_classification(preds, "worst_group")
        return float(_group_accuracies(preds).min())
    if kind == "quantile_accuracy":
        _require_classification(preds, "quantile_accuracy")
        if quantile is None or not (0.0 <= quantile <= 1.0):
            raise ConfigurationError("quantile_accuracy needs a quantile in [0,1]")
        return float(np.quantile(_group_accuracies(preds), quantile))
    raise ConfigurationError(f"unknown task metric {kind!r}")


@dataclass
class MetricReport:
    """Named scalar metrics plus the reliability bin table when applicable."""

    values: dict
    bins: CalibrationBins | None = None

    def __post_init__(self):
        for name, value in self.values.items():
            if not np.isfinite(value):
                raise ConfigurationError(f"metric {name!r} is not finite")
        if "ece" in self.values and abs(self.values["sece"]) > self.values["ece"] + 1e-12:
            raise ConfigurationError("|sece| must not exceed ece")
        if "qce" in self.values and abs(self.values["sqce"]) > self.values["qce"] + 1e-12:
            raise ConfigurationError("|sqce| must not exceed qce")

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.values.items()}


def compute_report(
    preds: PredictionSet,
    cfg: MetricConfig | None = None,
    likelihoods: np.ndarray | None = None,
    quantile: float = 0.1,
) -> MetricReport:
    """Bundle the per-kind metric subset for one prediction set."""
    cfg = cfg or MetricConfig()
    values = {}
    bins = None
    if preds.kind == "classification":
        values["accuracy"] = task_accuracy(preds, "accuracy")
        values["macro_f1"] = task_accuracy(preds, "macro_f1")
        if preds.groups is not None:
            values["worst_group_accuracy"] = task_accuracy(preds, "worst_group")
            values["quantile_accuracy"] = task_accuracy(preds, "quantile_accuracy", quantile=quantile)
        ece, sece, bins = ece_sece(preds, cfg)
        values["ece"] = ece
        values["sece"] = sece
    else:
        values["pearson"] = task_accuracy(preds, "pearson")
        qce, sqce, _ = qce_sqce(preds, cfg)
        values["qce"] = qce
        values["sqce"] = sqce
    values["nll"] = nll(preds)
    if likelihoods is not None:
        lml, pslml = lml_pslml(likelihoods)
        values["lml"] = lml
        values["pslml"] = pslml
    return MetricReport(values=values, bins=bins)


def as_binary_classification(preds: PredictionSet, threshold: float = 0.0) -> PredictionSet:
    """Turn Gaussian regression predictions into exceed-threshold class probabilities.

    Class 1 is "target above threshold"; fidelity metrics defined on
    classification sets then apply to regression models as well.
    """
    if preds.kind != "regression":
        raise ConfigurationError("as_binary_classification needs regression predictions")
    p1 = norm.cdf((preds.means - threshold) / preds.stds)
    probs = np.column_stack([1.0 - p1, p1])
    labels = (preds.labels > threshold).astype(np.int64)
    return PredictionSet("classification", labels, probs=probs, groups=preds.groups)
