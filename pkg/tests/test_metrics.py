"""Calibration, likelihood, and agreement metrics against independent oracles."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from bayesbench.metrics import (
    MetricConfig,
    MetricReport,
    as_binary_classification,
    compute_report,
    default_confidence_levels,
    ece_sece,
    lml_pslml,
    nll,
    qce_sqce,
    task_accuracy,
    top1_agreement,
    total_variation,
)
from bayesbench.models import ConfigurationError, PredictionSet, rng_from, softmax


def random_classification(seed, n=None, num_classes=None):
    rng = rng_from(seed)
    n = n if n is not None else int(rng.integers(1, 60))
    C = num_classes if num_classes is not None else int(rng.integers(2, 6))
    probs = softmax(rng.standard_normal((n, C)) * rng.uniform(0.5, 3.0))
    return PredictionSet("classification", rng.integers(0, C, size=n), probs=probs)


def random_regression(seed, n=None):
    rng = rng_from(seed)
    n = n if n is not None else int(rng.integers(1, 60))
    return PredictionSet(
        "regression",
        rng.standard_normal(n),
        means=rng.standard_normal(n),
        stds=rng.uniform(0.1, 2.0, size=n),
    )


def binary_at_confidence(conf_correct_pairs):
    """Rows [c, 1-c] labeled so each example is correct or not as requested."""
    probs, labels = [], []
    for conf, correct in conf_correct_pairs:
        probs.append([conf, 1.0 - conf])
        labels.append(0 if correct else 1)
    return PredictionSet("classification", np.array(labels), probs=np.array(probs))


# ---------------------------------------------------------------- ECE / sECE


def brute_force_ece(preds, num_bins):
    """Literal per-bin masks and means; only the final reduction is shared."""
    conf = preds.probs.max(axis=1)
    correct = (np.argmax(preds.probs, axis=1) == preds.labels).astype(float)
    edges = [m / num_bins for m in range(num_bins + 1)]
    n = len(conf)
    weights = np.zeros(num_bins)
    gaps = np.zeros(num_bins)
    table = []
    for m in range(num_bins):
        if m == 0:
            mask = conf <= edges[1]
        elif m == num_bins - 1:
            mask = conf > edges[m]
        else:
            mask = (conf > edges[m]) & (conf <= edges[m + 1])
        count = int(mask.sum())
        acc = correct[mask].mean() if count else 0.0
        avg = conf[mask].mean() if count else 0.0
        table.append((count, acc, avg))
        weights[m] = count / n
        gaps[m] = acc - avg
    return float(np.sum(weights * np.abs(gaps))), float(np.sum(weights * gaps)), table


def test_single_bin_hand_example():
    # all four examples land in the top bin: acc 0.5, conf 0.95
    preds = binary_at_confidence([(0.95, True), (0.95, True), (0.95, False), (0.95, False)])
    ece, sece, bins = ece_sece(preds)
    assert np.isclose(ece, 0.45)
    assert np.isclose(sece, -0.45)
    assert bins.counts.sum() == 4
    assert bins.counts[-1] == 4


def test_signed_error_can_vanish_while_unsigned_does_not():
    # bin (0.5,0.6]: gap +0.2; bin (0.8,0.9]: gap -0.2; equal mass
    pairs = [(0.6, i < 8) for i in range(10)] + [(0.9, i < 7) for i in range(10)]
    preds = binary_at_confidence(pairs)
    ece, sece, _ = ece_sece(preds)
    assert np.isclose(ece, 0.2)
    assert abs(sece) < 1e-15


def test_underconfidence_is_positive():
    preds = binary_at_confidence([(0.55, True)] * 20)
    _, sece, _ = ece_sece(preds)
    assert np.isclose(sece, 0.45)


def test_matches_brute_force_bit_for_bit():
    for seed in range(200):
        preds = random_classification(seed)
        ece, sece, bins = ece_sece(preds)
        b_ece, b_sece, table = brute_force_ece(preds, 10)
        assert ece == b_ece, f"seed {seed}"
        assert sece == b_sece, f"seed {seed}"
        for m, (count, acc, avg) in enumerate(table):
            assert bins.counts[m] == count
            assert bins.accuracy[m] == acc
            assert bins.confidence[m] == avg


@given(st.integers(0, 100_000))
def test_signed_never_exceeds_unsigned(seed):
    ece, sece, _ = ece_sece(random_classification(seed))
    assert abs(sece) <= ece + 1e-12
    assert 0.0 <= ece <= 1.0


@given(st.integers(0, 10_000))
def test_binning_is_permutation_invariant(seed):
    preds = random_classification(seed, n=40)
    perm = rng_from(seed + 1).permutation(40)
    shuffled = PredictionSet("classification", preds.labels[perm], probs=preds.probs[perm])
    a = ece_sece(preds)
    b = ece_sece(shuffled)
    assert np.isclose(a[0], b[0], rtol=1e-12, atol=1e-15)
    assert np.isclose(a[1], b[1], rtol=1e-12, atol=1e-15)


def test_confidence_zero_and_above_one_stay_binned():
    # rows may carry 1e-6 slack; the outer bins absorb both extremes
    probs = np.array([[1.0 + 5e-7, -5e-7], [0.5, 0.5]])
    preds = PredictionSet("classification", np.array([0, 0]), probs=probs)
    _, _, bins = ece_sece(preds)
    assert bins.counts.sum() == 2
    assert bins.counts[-1] == 1


def test_bin_table_csv_shape():
    preds = random_classification(3, n=30)
    _, _, bins = ece_sece(preds, MetricConfig(num_bins=5))
    lines = bins.to_csv().strip().split("\n")
    assert lines[0] == "bin_lo,bin_hi,count,accuracy,confidence"
    assert len(lines) == 6
    assert sum(int(l.split(",")[2]) for l in lines[1:]) == 30


def test_ece_rejects_regression():
    with pytest.raises(ConfigurationError):
        ece_sece(random_regression(0))


# ---------------------------------------------------------------- QCE / sQCE


def brute_force_qce(preds, levels):
    qce_terms, s_terms, table = [], [], []
    for rho in levels:
        z = norm.ppf((1.0 + rho) / 2.0)
        hits = 0
        for y, m, s in zip(preds.labels, preds.means, preds.stds):
            if abs(y - m) <= z * s:
                hits += 1
        p = hits / len(preds)
        table.append(p)
        qce_terms.append(abs(p - rho))
        s_terms.append(p - rho)
    return np.mean(qce_terms), np.mean(s_terms), table


def test_exact_predictions_cover_every_level():
    y = np.linspace(-1, 1, 7)
    preds = PredictionSet("regression", y, means=y.copy(), stds=np.full(7, 0.5))
    qce, sqce, table = qce_sqce(preds)
    assert np.all(table[:, 1] == 1.0)
    # default levels average 0.5, so both errors equal 1 - 0.5
    assert np.isclose(qce, 0.5)
    assert np.isclose(sqce, 0.5)


def test_well_specified_gaussians_have_small_error():
    rng = rng_from(0)
    n = 20_000
    means = rng.standard_normal(n)
    stds = rng.uniform(0.2, 2.0, size=n)
    y = means + stds * rng.standard_normal(n)
    preds = PredictionSet("regression", y, means=means, stds=stds)
    qce, _, _ = qce_sqce(preds)
    assert qce < 0.02


def test_dispersion_sets_the_sign():
    rng = rng_from(1)
    n = 4000
    means = np.zeros(n)
    y = rng.standard_normal(n)
    wide = PredictionSet("regression", y, means=means, stds=np.full(n, 3.0))
    narrow = PredictionSet("regression", y, means=means, stds=np.full(n, 1.0 / 3.0))
    assert qce_sqce(wide)[1] > 0.1  # overdispersed: observed coverage too high
    assert qce_sqce(narrow)[1] < -0.1


def test_qce_matches_brute_force():
    levels = default_confidence_levels(10)
    for seed in range(100):
        preds = random_regression(seed)
        qce, sqce, table = qce_sqce(preds)
        b_qce, b_sqce, b_table = brute_force_qce(preds, levels)
        assert np.isclose(qce, b_qce, rtol=1e-15)
        assert np.isclose(sqce, b_sqce, rtol=1e-15)
        assert np.allclose(table[:, 1], b_table)


@given(st.integers(0, 100_000))
def test_signed_coverage_error_is_bounded_by_unsigned(seed):
    qce, sqce, _ = qce_sqce(random_regression(seed))
    assert abs(sqce) <= qce + 1e-12


def test_qce_rejects_classification():
    with pytest.raises(ConfigurationError):
        qce_sqce(random_classification(0))


# ---------------------------------------------------------------- NLL / LML


def test_uniform_probabilities_give_log_num_classes():
    n, C = 12, 10
    preds = PredictionSet(
        "classification", np.zeros(n, dtype=np.int64), probs=np.full((n, C), 1.0 / C)
    )
    assert np.isclose(nll(preds), np.log(10.0), rtol=1e-12)


def test_zero_probability_clamps_with_a_warning():
    preds = PredictionSet("classification", np.array([1]), probs=np.array([[1.0, 0.0]]))
    with pytest.warns(RuntimeWarning, match="clamped"):
        val = nll(preds)
    assert np.isclose(val, -np.log(1e-12))


def test_regression_nll_at_the_mode():
    s = 0.7
    y = np.arange(5.0)
    preds = PredictionSet("regression", y, means=y.copy(), stds=np.full(5, s))
    assert np.isclose(nll(preds), 0.5 * np.log(2 * np.pi * s**2), rtol=1e-12)


def test_lml_pslml_hand_example():
    lik = np.array([[0.5, 0.25], [0.1, 0.2]])
    lml, pslml = lml_pslml(lik)
    # joint: mean over draws of the product down each column
    assert np.isclose(lml, np.log(0.5 * (0.5 * 0.1 + 0.25 * 0.2)), rtol=1e-12)
    assert np.isclose(pslml, np.log(0.375) + np.log(0.15), rtol=1e-12)


def test_single_draw_collapses_both_scores():
    rng = rng_from(0)
    lik = rng.uniform(0.01, 1.0, size=(20, 1))
    lml, pslml = lml_pslml(lik)
    expect = float(np.log(lik[:, 0]).sum())
    assert lml == pslml == expect


def test_constant_likelihoods_collapse_joint_and_per_sample_scores():
    # draws identical across columns: no correlation structure to separate them
    lik = np.full((7, 4), 0.3)
    lml, pslml = lml_pslml(lik)
    assert np.isclose(lml, 7 * np.log(0.3), rtol=1e-12)
    assert np.isclose(pslml, 7 * np.log(0.3), rtol=1e-12)


def test_likelihood_matrix_validation():
    with pytest.raises(ConfigurationError):
        lml_pslml(np.array([[0.5, -0.1]]))
    with pytest.raises(ConfigurationError):
        lml_pslml(np.zeros((0, 3)))


# ---------------------------------------------------------------- agreement


def test_total_variation_hand_values():
    labels = np.array([0])
    mk = lambda row: PredictionSet("classification", labels, probs=np.array([row]))
    a, b = mk([1.0, 0.0]), mk([0.0, 1.0])
    assert total_variation(a, a) == 0.0
    assert np.isclose(total_variation(a, b), 1.0)
    assert np.isclose(total_variation(a, mk([0.5, 0.5])), 0.5)


@given(st.integers(0, 50_000))
def test_total_variation_metric_axioms(seed):
    a = random_classification(seed, n=10, num_classes=3)
    b = PredictionSet("classification", a.labels, probs=random_classification(seed + 1, n=10, num_classes=3).probs)
    c = PredictionSet("classification", a.labels, probs=random_classification(seed + 2, n=10, num_classes=3).probs)
    ab, ba = total_variation(a, b), total_variation(b, a)
    assert np.isclose(ab, ba, rtol=1e-15)
    assert 0.0 <= ab <= 1.0
    assert total_variation(a, c) <= ab + total_variation(b, c) + 1e-12


def test_agreement_counts_matching_argmax_rows():
    labels = np.zeros(3, dtype=np.int64)
    a = PredictionSet("classification", labels, probs=np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]))
    b = PredictionSet("classification", labels, probs=np.array([[0.7, 0.3], [0.9, 0.1], [0.55, 0.45]]))
    assert np.isclose(top1_agreement(a, b), 2.0 / 3.0)


def test_argmax_ties_resolve_to_the_lowest_index():
    labels = np.zeros(1, dtype=np.int64)
    tied = PredictionSet("classification", labels, probs=np.array([[0.5, 0.5]]))
    first = PredictionSet("classification", labels, probs=np.array([[0.6, 0.4]]))
    assert top1_agreement(tied, first) == 1.0


def test_comparisons_demand_aligned_labels():
    a = random_classification(0, n=5, num_classes=3)
    moved = PredictionSet("classification", (a.labels + 1) % 3, probs=a.probs)
    with pytest.raises(ConfigurationError):
        total_variation(a, moved)
    short = PredictionSet("classification", a.labels[:4], probs=a.probs[:4])
    with pytest.raises(ConfigurationError):
        top1_agreement(a, short)


# ---------------------------------------------------------------- task scores


def test_accuracy_and_macro_f1():
    probs = np.array(
        [[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.8, 0.1], [0.2, 0.7, 0.1]]
    )
    labels = np.array([0, 0, 1, 1])
    preds = PredictionSet("classification", labels, probs=probs)
    assert np.isclose(task_accuracy(preds, "accuracy"), 0.75)
    # class 0: P=1 R=1/2 F1=2/3; class 1: P=2/3 R=1 F1=4/5; class 2 absent: 0
    assert np.isclose(task_accuracy(preds, "macro_f1"), (2 / 3 + 4 / 5 + 0) / 3)


def test_group_scores():
    probs = np.array([[0.9, 0.1]] * 6)
    labels = np.array([0, 0, 1, 0, 1, 1])  # acc per group: 1.0, 0.5, 0.0
    groups = np.array([0, 0, 1, 1, 2, 2])
    preds = PredictionSet("classification", labels, probs=probs, groups=groups)
    assert np.isclose(task_accuracy(preds, "worst_group"), 0.0)
    # np.quantile linear interpolation over [0.0, 0.5, 1.0]
    assert np.isclose(task_accuracy(preds, "quantile_accuracy", quantile=0.25), 0.25)
    with pytest.raises(ConfigurationError):
        task_accuracy(preds, "quantile_accuracy", quantile=1.5)
    with pytest.raises(ConfigurationError):
        task_accuracy(PredictionSet("classification", labels, probs=probs), "worst_group")


def test_pearson_on_affine_predictions():
    y = np.linspace(0, 1, 9)
    preds = PredictionSet("regression", y, means=3.0 * y + 1.0, stds=np.ones(9))
    assert np.isclose(task_accuracy(preds, "pearson"), 1.0, rtol=1e-12)
    flipped = PredictionSet("regression", y, means=-y, stds=np.ones(9))
    assert np.isclose(task_accuracy(flipped, "pearson"), -1.0, rtol=1e-12)


def test_pearson_undefined_for_constant_series():
    y = np.zeros(5)
    preds = PredictionSet("regression", y, means=np.arange(5.0), stds=np.ones(5))
    with pytest.raises(ConfigurationError, match="undefined"):
        task_accuracy(preds, "pearson")


def test_unknown_score_kind_rejected():
    with pytest.raises(ConfigurationError):
        task_accuracy(random_classification(0), "auroc")


# ---------------------------------------------------------------- reports


def test_classification_report_keys():
    preds = random_classification(1, n=40, num_classes=3)
    report = compute_report(preds)
    assert set(report.values) == {"accuracy", "macro_f1", "ece", "sece", "nll"}
    assert report.bins is not None


def test_grouped_report_adds_group_metrics():
    base = random_classification(2, n=30, num_classes=2)
    groups = rng_from(3).integers(0, 3, size=30)
    preds = PredictionSet("classification", base.labels, probs=base.probs, groups=groups)
    report = compute_report(preds)
    assert "worst_group_accuracy" in report.values
    assert "quantile_accuracy" in report.values


def test_regression_report_keys_and_likelihood_scores():
    preds = random_regression(4, n=25)
    lik = rng_from(5).uniform(0.05, 1.0, size=(25, 6))
    report = compute_report(preds, likelihoods=lik)
    assert set(report.values) == {"pearson", "qce", "sqce", "nll", "lml", "pslml"}
    assert report.bins is None
    lml, pslml = lml_pslml(lik)
    assert report.values["lml"] == lml
    assert report.values["pslml"] == pslml


def test_report_rejects_inconsistent_values():
    with pytest.raises(ConfigurationError):
        MetricReport(values={"ece": 0.1, "sece": 0.5})
    with pytest.raises(ConfigurationError):
        MetricReport(values={"nll": float("nan")})


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MetricConfig(num_bins=1)
    with pytest.raises(ConfigurationError):
        MetricConfig(confidence_levels=(0.2, 0.2))
    with pytest.raises(ConfigurationError):
        MetricConfig(confidence_levels=(0.0, 0.5))
    assert default_confidence_levels(10)[0] == 0.05
    assert default_confidence_levels(10)[-1] == 0.95


# ---------------------------------------------------------------- conversion


def test_binary_conversion_matches_the_gaussian_cdf():
    preds = random_regression(6, n=15)
    binary = as_binary_classification(preds, threshold=0.3)
    expect = norm.cdf((preds.means - 0.3) / preds.stds)
    assert np.allclose(binary.probs[:, 1], expect, rtol=1e-12)
    assert np.allclose(binary.probs.sum(axis=1), 1.0)
    assert np.array_equal(binary.labels, (preds.labels > 0.3).astype(np.int64))


def test_binary_conversion_is_half_at_the_threshold():
    preds = PredictionSet("regression", np.array([1.0]), means=np.array([0.3]), stds=np.array([0.5]))
    binary = as_binary_classification(preds, threshold=0.3)
    assert np.isclose(binary.probs[0, 1], 0.5)


def test_binary_conversion_rejects_classification():
    with pytest.raises(ConfigurationError):
        as_binary_classification(random_classification(0))
