import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scanline import phantom
from scanline.errors import DegenerateDistance, ShapeMismatch
from scanline.selftest import relative_error, small_renders
from scanline.task import (
    AnchorDistanceTask,
    Task,
    default_task,
    jacobian,
    jacobian_fd,
    linear_task,
    soft_argmax,
    wall_templates,
)


class SumSin(Task):
    """f(x) = sum(sin x); smooth, with a known gradient."""

    def values(self, xs):
        return np.sin(np.asarray(xs)).reshape(len(xs), -1).sum(axis=1, keepdims=True)

    def gradients(self, xs):
        return np.cos(np.asarray(xs)).reshape(len(xs), 1, -1)


class Constant(Task):
    def values(self, xs):
        return np.full((len(xs), 2), 3.0)


def test_linear_one_hot_projects_a_pixel(rng):
    x = rng.uniform(size=(4, 5))
    w = np.zeros((1, 20))
    w[0, 7] = 1.0
    assert linear_task(w)(x).value == x.flat[7]


def test_linear_jacobian_is_weights_everywhere(rng):
    w = rng.normal(size=(3, 20))
    f = linear_task(w)
    for _ in range(3):
        assert np.array_equal(jacobian(f, rng.normal(size=(4, 5))).matrix, w)


def test_linear_of_zero_is_zero(rng):
    f = linear_task(rng.normal(size=(2, 12)))
    assert np.all(f(np.zeros((3, 4))).values == 0)


def test_linear_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        linear_task(np.ones((1, 5))).values(np.zeros((1, 2, 2)))


def test_soft_argmax_point_mass():
    h = np.zeros((6, 9))
    h[4, 2] = 1.0
    assert soft_argmax(h) == (4.0, 2.0)


def test_soft_argmax_uniform_is_centroid():
    h = np.full((6, 9), 1 / 54)
    r, c = soft_argmax(h)
    assert r == pytest.approx(2.5) and c == pytest.approx(4.0)


def test_distance_between_point_mass_anchors():
    ha, hb = np.zeros((8, 8)), np.zeros((8, 8))
    ha[0, 0] = hb[3, 4] = 1.0
    assert math.dist(soft_argmax(ha), soft_argmax(hb)) == 5.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)))
def test_soft_argmax_stays_in_hull(raw):
    if raw.sum() == 0:
        raw = np.ones_like(raw)
    r, c = soft_argmax(raw / raw.sum())
    assert -1e-9 <= r <= 4 + 1e-9 and -1e-9 <= c <= 6 + 1e-9


@pytest.fixture(scope="module")
def frame():
    return phantom.simulate_sequence(1, 3).frame(0)


def test_task_output_heatmaps_and_anchors(frame):
    out = default_task()(frame)
    assert len(out.heatmaps) == 2
    for h in out.heatmaps:
        assert h.shape == frame.shape
        assert h.min() >= 0
        assert h.sum() == pytest.approx(1.0, abs=1e-9)
    for r, c in out.anchors:
        assert 0 <= r < frame.shape[0] and 0 <= c < frame.shape[1]
    assert out.value == pytest.approx(math.dist(*out.anchors), abs=1e-9)


def test_default_task_tracks_true_diameter():
    # The arc of each wall pulls the soft anchors inward, so the surrogate
    # reads short by a few pixels; it must still follow the true signal.
    seq = phantom.simulate_sequence(60, 5)
    est = default_task().values(seq.frames())[:, 0]
    truth = np.array([m.value for m in seq.measurements()])
    assert np.corrcoef(est, truth)[0, 1] > 0.99
    assert 0.8 < np.polyfit(truth, est, 1)[0] < 1.1
    assert -10 < np.mean(est - truth) < 0


def test_anchors_follow_heatmap_centre_of_mass(frame):
    out = default_task()(frame)
    for h, anchor in zip(out.heatmaps, out.anchors):
        assert soft_argmax(h) == pytest.approx(anchor, abs=1e-9)


def test_shift_invariance(frame):
    task = default_task()
    a = task.values(frame[None])[0, 0]
    b = task.values((frame + 0.37)[None])[0, 0]
    assert abs(a - b) < 1e-9


def test_gradients_match_finite_differences(task_small):
    for x in small_renders(2, seed=40):
        assert relative_error(task_small.gradients(x[None])[0], jacobian_fd(task_small, x).matrix) < 1e-3


def test_full_size_gradients_match_on_sampled_pixels(frame):
    """Central differences on a random subset of pixels of a default-size render."""
    task = default_task()
    J = task.gradients(frame[None])[0, 0]
    rng = np.random.default_rng(0)
    hot = np.flatnonzero(np.abs(J) > 1e-3 * np.abs(J).max())
    idx = np.concatenate([rng.choice(hot, 150, replace=False), rng.choice(J.size, 50, replace=False)])
    h = 1e-4
    xs = np.repeat(frame.ravel()[None], 2 * len(idx), axis=0)
    xs[np.arange(len(idx)), idx] += h
    xs[len(idx) + np.arange(len(idx)), idx] -= h
    vals = task.values(xs.reshape(-1, *frame.shape))[:, 0]
    fd = (vals[: len(idx)] - vals[len(idx):]) / (2 * h)
    assert np.max(np.abs(fd - J[idx])) / np.max(np.abs(J)) < 1e-3


def test_float32_task_is_close_to_float64(frame):
    v64 = default_task().values(frame[None])[0, 0]
    v32 = default_task(dtype=np.float32).values(frame[None])[0, 0]
    assert abs(v64 - v32) < 1e-3


def test_jacobian_zero_outside_template_regions():
    top, bottom = wall_templates(wall=3, band=2, width=5)
    task = AnchorDistanceTask(top, bottom, region_a=(0, 24, 0, 32), region_b=(24, 48, 0, 32))
    x = small_renders(1, seed=7)[0]
    J = task.gradients(x[None])[0, 0].reshape(x.shape)
    assert np.all(J[:, 32:] == 0)
    assert np.any(J[:, :32] != 0)


def test_region_must_fit_template():
    top, bottom = wall_templates()
    task = AnchorDistanceTask(top, bottom, region_a=(0, 10, 0, 10))
    with pytest.raises(ValueError):
        task.values(np.zeros((1, 64, 64)))


def test_coincident_anchors_raise():
    top, _ = wall_templates(wall=3, band=2, width=5)
    task = AnchorDistanceTask(top, top)
    x = small_renders(1)[0]
    assert task.values(x[None])[0, 0] == 0.0
    with pytest.raises(DegenerateDistance):
        task.gradients(x[None])


def test_nonpositive_temperature_rejected():
    top, bottom = wall_templates()
    with pytest.raises(ValueError):
        AnchorDistanceTask(top, bottom, softmax_temperature=0.0)


def test_mean_heatmap_anchor_equals_weighted_anchor_mean():
    task = default_task()
    xs = phantom.simulate_sequence(4, 8).frames()
    fw = task.forward(xs)
    w = np.array([1.0, 3.0, 2.0, 2.0])
    value, anchors = task.measure_mean_heatmap(fw, weights=w)
    literal = [soft_argmax(h) for h in task.mean_heatmaps(fw, weights=w)]
    assert np.allclose(anchors, literal, atol=1e-9)
    assert value == pytest.approx(math.dist(*literal), abs=1e-9)


def test_fd_on_linear_task_equals_weights(rng):
    w = rng.normal(size=(2, 30))
    J = jacobian_fd(linear_task(w), rng.normal(size=(5, 6))).matrix
    assert np.max(np.abs(J - w)) < 1e-9


def test_fd_on_constant_is_zero(rng):
    assert np.all(jacobian_fd(Constant(), rng.normal(size=(3, 3))).matrix == 0)


def test_fd_error_shrinks_fourfold_when_step_halves(rng):
    f = SumSin()
    x = rng.uniform(-1, 1, size=(3, 4))
    exact = f.gradients(x[None])[0]
    e1 = np.max(np.abs(jacobian_fd(f, x, step=0.1).matrix - exact))
    e2 = np.max(np.abs(jacobian_fd(f, x, step=0.05).matrix - exact))
    assert 3.5 < e1 / e2 < 4.5


def test_fd_rejects_nonpositive_step(rng):
    with pytest.raises(ValueError):
        jacobian_fd(SumSin(), rng.normal(size=(2, 2)), step=0)
