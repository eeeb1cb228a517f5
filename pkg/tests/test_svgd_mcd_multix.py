"""Particle inference, dropout sampling, and ensembles of either."""

import numpy as np
import pytest

from bayesbench.models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    bma_predict,
    init_params,
    child_seed,
    layout_for,
    log_prior_and_grad,
    nll_and_grad,
    rng_from,
)
from bayesbench.posteriors import (
    EnsembleError,
    EnsemblePosterior,
    EnsembleState,
    MAPPosterior,
    MCDropoutPosterior,
    SVGDPosterior,
    SVGDState,
    TrainConfig,
    VIConfig,
    mcd_predict,
    svgd_update,
    train_multix,
    train_svgd,
)
from bayesbench.posteriors._optim import epoch_batches


def clf_data(n=30, seed=0):
    rng = rng_from(seed)
    x = rng.standard_normal((n, 2))
    return Dataset(x, (x[:, 0] + x[:, 1] > 0).astype(np.int64))


# ---------------------------------------------------------------- SVGD


def test_single_particle_update_is_plain_gradient_ascent():
    spec = MLPSpec((2, 2))
    p = init_params(spec, 0)
    g = rng_from(1).standard_normal(p.size)
    out = svgd_update([p], [g], learning_rate=0.1)
    assert np.array_equal(out[0].values, p.values + 0.1 * g)


def test_single_particle_training_tracks_gradient_ascent_bitwise():
    """With one particle the kernel drops out of the update entirely."""
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=20, seed=3)
    cfg = TrainConfig(learning_rate=1e-3, epochs=100, batch_size=20, seed=5)
    st = train_svgd(spec, data, cfg, n_particles=1, prior_std=0.8)

    theta = init_params(spec, child_seed(cfg.seed, 21, 0))
    shuffle_rng = rng_from(child_seed(cfg.seed, 1))
    n = len(data)
    for _ in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.batch_size, shuffle_rng):
            batch = data.subset(idx)
            _, g_nll = nll_and_grad(spec, theta, batch)
            _, g_prior = log_prior_and_grad(theta, 0.8)
            step = -n * g_nll.values + g_prior.values
            theta = theta.with_values(theta.values + cfg.learning_rate * step)
    assert np.array_equal(st.particles[0].values, theta.values)


def test_repulsion_separates_coincident_particles():
    spec = MLPSpec((2, 2), bias=False)
    layout = layout_for(spec)
    a = ParameterVector(np.zeros(layout.size), layout)
    b = ParameterVector(np.full(layout.size, 1e-3), layout)
    zero = np.zeros(layout.size)
    moved = svgd_update([a, b], [zero, zero], learning_rate=0.1)
    before = np.linalg.norm(a.values - b.values)
    after = np.linalg.norm(moved[0].values - moved[1].values)
    assert after > before


def test_two_particles_settle_symmetrically_on_a_standard_normal():
    # long-run fixed point of the two-particle system on logpi = -x^2/2
    spec = MLPSpec((1, 1), bias=False, head="gaussian-fixed-std")
    layout = layout_for(spec)
    parts = [
        ParameterVector(np.array([-2.0]), layout),
        ParameterVector(np.array([0.5]), layout),
    ]
    for _ in range(5000):
        grads = [-p.values.copy() for p in parts]
        parts = svgd_update(parts, grads, learning_rate=0.05)
    x0, x1 = parts[0].values[0], parts[1].values[0]
    assert abs(x0 + x1) < 1e-6
    assert 0.3 < abs(x0) < 0.8


def test_bandwidth_mode_changes_the_update():
    spec = MLPSpec((2, 2), bias=False)
    layout = layout_for(spec)
    rng = rng_from(2)
    parts = [ParameterVector(rng.standard_normal(layout.size), layout) for _ in range(3)]
    grads = [rng.standard_normal(layout.size) for _ in range(3)]
    a = svgd_update(parts, grads, 0.1, bandwidth_mode="median-heuristic")
    b = svgd_update(parts, grads, 0.1, bandwidth_mode="fixed", fixed_bandwidth=5.0)
    assert not np.array_equal(a[0].values, b[0].values)


def test_svgd_state_validation():
    spec = MLPSpec((2, 2), bias=False)
    p = init_params(spec, 0)
    with pytest.raises(ConfigurationError):
        SVGDState([])
    with pytest.raises(ConfigurationError):
        SVGDState([p], bandwidth_mode="adaptive")
    with pytest.raises(ConfigurationError):
        SVGDState([p], fixed_bandwidth=0.0)
    with pytest.raises(ConfigurationError):
        svgd_update([p, p], [np.zeros(p.size)], 0.1)


def test_svgd_divergence_raises():
    spec = MLPSpec((2, 1), bias=False, head="gaussian-fixed-std")
    rng = rng_from(0)
    data = Dataset(rng.standard_normal((8, 2)), np.full(8, 1e200))
    with np.errstate(over="ignore"), pytest.raises(DivergenceError):
        train_svgd(spec, data, TrainConfig(learning_rate=0.1, epochs=2, batch_size=8), n_particles=2)


def test_svgd_posterior_predicts_over_all_particles():
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=25, seed=1)
    cfg = TrainConfig(learning_rate=5e-3, epochs=60, batch_size=25, seed=0)
    post = SVGDPosterior(spec, train_svgd(spec, data, cfg, n_particles=4))
    members = post.member_predictions(data, eval_samples=1, seed=0)
    assert len(members) == 4  # the particle set, not eval_samples, is the budget
    mix = post.predict(data, eval_samples=1, seed=0)
    assert np.allclose(mix.probs, bma_predict(members).probs)


# ---------------------------------------------------------------- MC dropout


def test_mcd_requires_a_dropout_architecture():
    spec = MLPSpec((2, 4, 2))  # dropout_rate 0
    params = init_params(spec, 0)
    with pytest.raises(ConfigurationError):
        MCDropoutPosterior(spec, params)
    with pytest.raises(ConfigurationError):
        mcd_predict(spec, params, clf_data(n=4), mc_samples=4, seed=0)


def test_mcd_prediction_is_the_average_over_seeded_passes():
    spec = MLPSpec((2, 16, 2), dropout_rate=0.3)
    params = init_params(spec, 0)
    data = clf_data(n=10, seed=2)
    post = MCDropoutPosterior(spec, params)
    members = post.member_predictions(data, eval_samples=8, seed=4)
    assert len(members) == 8
    mix = post.predict(data, eval_samples=8, seed=4)
    assert np.allclose(mix.probs, bma_predict(members).probs)
    assert np.allclose(mix.probs, mcd_predict(spec, params, data, 8, seed=4).probs)


def test_mcd_passes_are_seed_deterministic_and_distinct():
    spec = MLPSpec((2, 16, 2), dropout_rate=0.5)
    params = init_params(spec, 0)
    data = clf_data(n=6, seed=1)
    a = mcd_predict(spec, params, data, 4, seed=0)
    b = mcd_predict(spec, params, data, 4, seed=0)
    c = mcd_predict(spec, params, data, 4, seed=1)
    assert np.array_equal(a.probs, b.probs)
    assert not np.array_equal(a.probs, c.probs)
    with pytest.raises(ConfigurationError):
        mcd_predict(spec, params, data, 0, seed=0)


# ---------------------------------------------------------------- MultiX


def test_multix_needs_two_members_and_a_known_algorithm():
    spec = MLPSpec((2, 2))
    data = clf_data(n=8)
    cfg = TrainConfig(epochs=1, batch_size=8)
    with pytest.raises(ConfigurationError):
        train_multix("map", spec, data, cfg, members=1)
    with pytest.raises(ConfigurationError):
        train_multix("hmc", spec, data, cfg, members=2)


def test_multix_members_use_offset_seeds_and_differ():
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=20, seed=0)
    cfg = TrainConfig(learning_rate=0.05, epochs=5, batch_size=10, seed=10)
    post = train_multix("map", spec, data, cfg, members=3)
    assert post.algorithm == "multi-map"
    assert post.state.member_seeds == [10, 11, 12]
    p0 = post.members[0].params.values
    p1 = post.members[1].params.values
    assert not np.array_equal(p0, p1)


def test_multix_shared_init_shares_the_body_but_not_the_head():
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=20, seed=0)
    shared = init_params(spec, 99)
    cfg = TrainConfig(learning_rate=0.05, epochs=0, batch_size=10, seed=0)
    post = train_multix("map", spec, data, cfg, members=2, shared_init=shared)
    layout = layout_for(spec)
    body = slice(0, layout.slice_of("W1").start)
    m0, m1 = (m.params.values for m in post.members)
    assert np.array_equal(m0[body], shared.values[body])
    assert np.array_equal(m1[body], shared.values[body])
    assert not np.array_equal(m0[body.stop :], m1[body.stop :])


def test_ensemble_of_identical_members_collapses_to_one_member():
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=12, seed=5)
    member = MAPPosterior(spec, init_params(spec, 3))
    solo = member.predict(data, eval_samples=2, seed=0)
    duo = EnsemblePosterior(EnsembleState("map", [member, member], [0, 1]))
    mix = duo.predict(data, eval_samples=2, seed=0)
    assert np.array_equal(mix.probs, solo.probs)


def test_member_failure_reports_its_index():
    spec = MLPSpec((2, 1), bias=False, head="gaussian-fixed-std")
    rng = rng_from(0)
    data = Dataset(rng.standard_normal((8, 2)), np.full(8, 1e200))
    cfg = TrainConfig(learning_rate=0.1, epochs=2, batch_size=8, seed=0)
    with np.errstate(over="ignore"), pytest.raises(EnsembleError) as e:
        train_multix("map", spec, data, cfg, members=2)
    assert e.value.member_index == 0
    assert "member 0" in str(e.value)


def test_multix_swag_members_are_swag_posteriors():
    spec = MLPSpec((2, 4, 2))
    data = clf_data(n=24, seed=0)
    cfg = TrainConfig(learning_rate=0.05, epochs=9, batch_size=12, seed=0)
    post = train_multix("swag", spec, data, cfg, members=2, snapshots=3, rank_k=2)
    assert post.algorithm == "multi-swag"
    for m in post.members:
        assert m.state.snapshots_taken == 3
    preds = post.predict(data, eval_samples=6, seed=0)
    assert preds.probs.shape == (24, 2)
