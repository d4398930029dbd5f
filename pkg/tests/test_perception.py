import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanline import phantom
from scanline.errors import DegenerateLikelihood, InvalidPrior, ShapeMismatch
from scanline.perception import (
    Belief,
    Observation,
    ensemble,
    export_snapshot,
    init_belief,
    pixel_variance,
    posterior_samples,
    predict,
    systematic_resample,
    thin,
    update,
    weighted_pixel_variance,
)

H, W = 48, 64


def small_prior(**changes):
    prior = phantom.default_prior(H, W)
    return phantom.PriorSpec(**{**prior.__dict__, **changes})


def belief_from(params, weights=None, frame_index=0, seed=0) -> Belief:
    params = np.atleast_2d(np.asarray(params, dtype=float))
    n = len(params)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return Belief(params=params, weights=w, frame_index=frame_index, height=H, width=W, seed=seed)


def small_state(**changes):
    s = phantom.LatentState(23.5, 31.5, 10.0, 18.0, 3.0, phase=1.0)
    return s.replace(**changes)


def test_init_gives_uniform_weights():
    b = init_belief(small_prior(), 32, 0, height=H, width=W)
    assert b.n_particles == 32
    assert np.allclose(b.weights, 1 / 32)
    assert len(b.particles) == 32


def test_init_is_deterministic():
    a = init_belief(small_prior(), 16, 5, height=H, width=W)
    b = init_belief(small_prior(), 16, 5, height=H, width=W)
    assert np.array_equal(a.params, b.params)


def test_point_prior_gives_identical_particles_and_zero_variance():
    prior = phantom.PriorSpec.point(small_state())
    b = init_belief(prior, 8, 0, height=H, width=W)
    assert np.all(b.params == b.params[0])
    assert np.all(ensemble(b).variance() == 0)
    assert np.all(pixel_variance(posterior_samples(b)) == 0)


@pytest.mark.parametrize(
    "changes",
    [
        {"cavity_semi_axis_r": (12.0, 10.0)},
        {"wall_thickness": (0.0, 2.0)},
        {"cavity_center_row": (5.0, 6.0)},
        {"cavity_semi_axis_c": (10.0, 40.0)},
        {"phase": (0.0, math.inf)},
    ],
)
def test_invalid_prior_rejected(changes):
    with pytest.raises(InvalidPrior):
        init_belief(small_prior(**changes), 8, 0, height=H, width=W)


def test_too_few_particles_rejected():
    with pytest.raises(InvalidPrior):
        init_belief(small_prior(), 1, 0, height=H, width=W)


def test_predict_with_static_dynamics_changes_only_the_frame():
    b = belief_from([small_state().to_array(), small_state(wall_thickness=4.0).to_array()], [0.3, 0.7])
    out = predict(b, 0.0)
    assert np.array_equal(out.params, b.params)
    assert np.array_equal(out.weights, b.weights)
    assert out.frame_index == b.frame_index + 1


def test_predict_does_not_reduce_variance_on_average():
    deltas = []
    for seed in range(20):
        b = init_belief(small_prior(phase_rate=(0.0, 0.0)), 32, seed, height=H, width=W)
        before = ensemble(b).variance().mean()
        after = ensemble(predict(b, 1.0)).variance().mean()
        deltas.append(after - before)
    assert np.mean(deltas) >= 0


def _obs_from(state, cols, frame_index=0):
    img = phantom.render_params(state.to_array(), H, W)
    cols = np.asarray(cols)
    return Observation(frame_index, cols, img[:, cols])


def test_matching_particle_takes_all_weight():
    truth = small_state()
    other = small_state(cavity_center_row=20.0)
    b = belief_from([truth.to_array(), other.to_array()])
    out = update(b, _obs_from(truth, np.arange(W)), obs_noise_sigma=1e-3, ess_threshold_fraction=1e-6)
    assert out.weights[0] == pytest.approx(1.0, abs=1e-12)


def test_two_particle_weight_ratio_matches_hand_likelihood():
    truth = small_state()
    other = small_state(cavity_semi_axis_r=10.6)
    cols = np.array([20, 31, 40])
    sigma = 0.5
    b = belief_from([truth.to_array(), other.to_array()])
    out = update(b, _obs_from(truth, cols), sigma, ess_threshold_fraction=1e-6)
    E = np.sum((phantom.render_params(other.to_array(), H, W)[:, cols]
                - phantom.render_params(truth.to_array(), H, W)[:, cols]) ** 2)
    assert E > 0
    expected = math.exp(E / (2 * sigma**2 * H * len(cols)))
    assert out.weights[0] / out.weights[1] == pytest.approx(expected, rel=1e-9)


def test_concentration_on_exact_particle():
    b = init_belief(small_prior(), 16, 3, height=H, width=W)
    renders = phantom.render_batch(b.params, H, W)
    target = renders[5]
    assert all(np.sum((r - target) ** 2) >= 1 for i, r in enumerate(renders) if i != 5)
    obs = Observation(0, np.arange(W), target)
    out = update(b, obs, obs_noise_sigma=1e-3, ess_threshold_fraction=1e-6)
    assert out.weights[5] > 0.99


def test_empty_mask_rejected():
    b = belief_from([small_state().to_array()] * 2)
    with pytest.raises(ValueError):
        update(b, Observation(0, np.array([], dtype=int), np.empty((H, 0))), 0.1)


def test_frame_mismatch_rejected():
    b = belief_from([small_state().to_array()] * 2)
    with pytest.raises(ValueError):
        update(b, _obs_from(small_state(), [3], frame_index=1), 0.1)


def test_observation_shape_checked():
    with pytest.raises(ShapeMismatch):
        Observation(0, np.array([1, 2]), np.zeros((H, 3)))
    with pytest.raises(ValueError):
        Observation(0, np.array([1, 1]), np.zeros((H, 2)))


def test_underflow_resets_weights_and_flags():
    b = belief_from([small_state(cavity_center_row=22.0).to_array(), small_state(cavity_center_row=25.0).to_array()])
    with pytest.warns(DegenerateLikelihood):
        out = update(b, _obs_from(small_state(), np.arange(W)), obs_noise_sigma=1e-200)
    assert out.flagged
    assert np.allclose(out.weights, 0.5)


def test_weights_normalised_after_update():
    b = init_belief(small_prior(), 32, 1, height=H, width=W)
    out = update(b, _obs_from(small_state(), [5, 30, 50]), 0.05)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(out.weights >= 0)


def test_resampling_restores_uniform_weights_when_ess_low():
    b = init_belief(small_prior(), 32, 2, height=H, width=W)
    out = update(b, _obs_from(small_state(), np.arange(W)), 0.01)
    assert out.is_uniform()


def test_update_is_deterministic():
    b = init_belief(small_prior(), 32, 2, height=H, width=W)
    obs = _obs_from(small_state(), [1, 10, 33])
    a, c = update(b, obs, 0.02), update(b, obs, 0.02)
    assert np.array_equal(a.params, c.params) and np.array_equal(a.weights, c.weights)


def test_posterior_samples_count_and_point_mass():
    b = belief_from([small_state().to_array()] * 6, [0.1, 0.2, 0.3, 0.1, 0.2, 0.1])
    samples = posterior_samples(b)
    assert samples.shape == (6, H, W)
    assert np.all(samples == samples[0])


def test_rendered_cache_matches_render():
    b = init_belief(small_prior(), 4, 0, height=H, width=W)
    for p, img in zip(b.params, b.rendered):
        assert np.array_equal(img, phantom.render_params(p, H, W))


def test_sample_mean_converges_to_weighted_mean():
    gaps = {}
    for n in (8, 512):
        vals = []
        for seed in range(5):
            b = init_belief(small_prior(), n, seed, height=H, width=W)
            w = np.random.default_rng(seed).dirichlet(np.ones(n))
            b = belief_from(b.params, w, seed=seed)
            exact = np.tensordot(w, b.rendered, axes=1)
            vals.append(np.max(np.abs(posterior_samples(b).mean(axis=0) - exact)))
        gaps[n] = np.mean(vals)
    assert gaps[512] < gaps[8]


def test_systematic_resample_counts_are_close_to_expected():
    w = np.array([0.1, 0.6, 0.3])
    idx = systematic_resample(w, np.random.default_rng(0), 10)
    counts = np.bincount(idx, minlength=3)
    assert np.all(np.abs(counts - 10 * w) < 1)


def test_pixel_variance_examples(rng):
    x = rng.uniform(size=(5, 7))
    assert np.all(pixel_variance([x, x, x]) == 0)
    y = x.copy()
    y[2, 3] += 0.4
    v = pixel_variance([x, y])
    assert v[2, 3] == pytest.approx(0.4**2 / 2, abs=1e-15)
    assert np.count_nonzero(v) == 1


def test_pixel_variance_matches_two_pass(rng):
    samples = rng.normal(size=(9, 4, 6))
    mean = sum(samples) / len(samples)
    two_pass = sum((s - mean) ** 2 for s in samples) / (len(samples) - 1)
    assert np.max(np.abs(pixel_variance(list(samples)) - two_pass)) < 1e-12


def test_pixel_variance_rejects_mixed_shapes():
    with pytest.raises(ShapeMismatch):
        pixel_variance([np.zeros((2, 2)), np.zeros((2, 3))])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 1000))
def test_counted_variance_equals_expanded(counts, seed):
    counts = np.array(counts)
    if counts.sum() < 2:
        counts[0] += 1
    imgs = np.random.default_rng(seed).normal(size=(len(counts), 3, 4))
    expanded = np.repeat(imgs, counts, axis=0)
    assert np.allclose(weighted_pixel_variance(imgs, counts), pixel_variance(expanded), atol=1e-12)


def test_ensemble_expands_to_resampled_particles():
    b = init_belief(small_prior(), 12, 4, height=H, width=W)
    ens = ensemble(b)
    assert ens.n_samples == 12
    assert np.array_equal(ens.expand(), phantom.render_batch(b.params, H, W))
    assert ens.counts.sum() == 12


def test_observed_column_variance_drops_on_average():
    drops = []
    for seed in range(20):
        b = init_belief(small_prior(), 32, seed, height=H, width=W)
        truth = phantom.simulate_sequence(1, 100 + seed, height=H, width=W).state(0)
        cols = np.random.default_rng(seed).choice(W, size=4, replace=False)
        before = ensemble(b).variance()[:, cols].mean()
        after = ensemble(update(b, _obs_from(truth, cols), 0.05)).variance()[:, cols].mean()
        drops.append(before - after)
    assert np.mean(drops) > 0


def test_thin_keeps_requested_count():
    b = init_belief(small_prior(), 64, 0, height=H, width=W)
    b = update(b, _obs_from(small_state(), [10, 20]), 0.2, ess_threshold_fraction=1e-6)
    t = thin(b, 16)
    assert t.n_particles == 16 and t.is_uniform()
    with pytest.raises(ValueError):
        thin(b, 128)


def test_snapshot_export(tmp_path):
    b0 = init_belief(small_prior(), 4, 0, height=H, width=W)
    b1 = predict(b0, 1.0)
    path = tmp_path / "snap.csv"
    export_snapshot(path, [b0, b1])
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,particle," + ",".join(phantom.PARAM_NAMES) + ",weight"
    assert len(lines) == 1 + 8
    assert lines[5].startswith("1,0,")


def test_no_warning_on_ordinary_update():
    b = init_belief(small_prior(), 8, 0, height=H, width=W)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateLikelihood)
        update(b, _obs_from(small_state(), [3, 4]), 0.05)
