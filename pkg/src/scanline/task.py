"""Differentiable downstream measurements f: image -> R^m.

Two tasks are provided. ``LinearTask`` is f(x) = A @ vec(x), whose Jacobian
is A everywhere. ``AnchorDistanceTask`` is a weight-free stand-in for a
keypoint network: each anchor gets a heatmap from a softmax over normalised
cross-correlation with a template, the anchor is the heatmap centre of mass
(soft-argmax), and the output is the Euclidean distance between the two
anchors. Its Jacobian is computed in closed form with FFT correlations.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import fft as sfft

from .errors import DegenerateDistance, ShapeMismatch
from .phantom import BACKGROUND_LEVEL, CAVITY_LEVEL, WALL_LEVEL

DEFAULT_TEMPERATURE = 25.0
DEFAULT_CONTRAST_FLOOR = 1e-2


@dataclass
class TaskOutput:
    values: np.ndarray
    heatmaps: list[np.ndarray] | None = None
    anchors: list[tuple[float, float]] | None = None

    @property
    def value(self) -> float:
        return float(self.values[0])


@dataclass
class Jacobian:
    matrix: np.ndarray  # (m, H*W)
    reference_input_id: Any = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


class Task:
    """Interface shared by all tasks; subclasses work on (N, H, W) batches."""

    n_outputs: int = 1

    def values(self, xs: np.ndarray) -> np.ndarray:
        """Task outputs for a batch, shape (N, m)."""
        raise NotImplementedError

    def gradients(self, xs: np.ndarray) -> np.ndarray:
        """Per-sample Jacobians, shape (N, m, H*W)."""
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> TaskOutput:
        return TaskOutput(values=self.values(np.asarray(x, dtype=float)[None])[0])

    def jacobian(self, x: np.ndarray, reference_input_id: Any = None) -> Jacobian:
        return jacobian(self, x, reference_input_id)


class LinearTask(Task):
    def __init__(self, weights: np.ndarray):
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        if not np.all(np.isfinite(weights)):
            raise ValueError("linear task weights must be finite")
        self.weights = weights
        self.n_outputs = weights.shape[0]

    def values(self, xs):
        xs = np.asarray(xs, dtype=float)
        flat = xs.reshape(len(xs), -1)
        if flat.shape[1] != self.weights.shape[1]:
            raise ShapeMismatch(
                f"weights expect {self.weights.shape[1]} pixels, got {flat.shape[1]}"
            )
        return flat @ self.weights.T

    def gradients(self, xs):
        return np.broadcast_to(self.weights, (len(xs),) + self.weights.shape).copy()


def linear_task(weights: np.ndarray) -> LinearTask:
    return LinearTask(weights)


def soft_argmax(heatmap: np.ndarray, origin: tuple[float, float] = (0.0, 0.0)) -> tuple[float, float]:
    """Centre of mass of a nonnegative map that sums to one."""
    heatmap = np.asarray(heatmap, dtype=float)
    rows = np.arange(heatmap.shape[0]) + origin[0]
    cols = np.arange(heatmap.shape[1]) + origin[1]
    return float(heatmap.sum(axis=1) @ rows), float(heatmap.sum(axis=0) @ cols)


@functools.lru_cache(maxsize=32)
def _box_spectrum(shape: tuple[int, int], th: int, tw: int, dtype: np.dtype) -> np.ndarray:
    return sfft.rfft2(np.ones((th, tw), dtype=dtype), s=shape)


@dataclass
class _Window:
    """Crop plus local statistics shared by anchors with equal window geometry.

    Every sum over template-sized windows is a circular FFT correlation on
    the crop, which is exact at the positions where the template fits.
    """

    bounds: tuple[int, int, int, int]
    th: int
    tw: int
    crop: np.ndarray  # (N, h, w)
    spectrum: np.ndarray  # rfft2 of crop
    box: np.ndarray  # rfft2 of the th x tw box on the crop grid
    mu: np.ndarray  # (N, Hv, Wv) local mean
    sigma: np.ndarray  # local std with contrast floor

    @classmethod
    def build(cls, xs, bounds, th, tw, floor):
        r0, r1, c0, c1 = bounds
        crop = xs[:, r0:r1, c0:c1]
        shape = crop.shape[-2:]
        hv, wv = shape[0] - th + 1, shape[1] - tw + 1
        n = th * tw
        spec = sfft.rfft2(crop)
        box = _box_spectrum(shape, th, tw, crop.dtype)
        conj_box = np.conj(box)
        mu = sfft.irfft2(spec * conj_box, s=shape)[:, :hv, :wv] / n
        sq = sfft.irfft2(sfft.rfft2(crop * crop) * conj_box, s=shape)[:, :hv, :wv] / n
        sigma = np.sqrt(np.maximum(sq - mu * mu, 0.0) + floor)
        return cls(bounds, th, tw, crop, spec, box, mu, sigma)


@dataclass
class _AnchorForward:
    window: _Window
    ncc: np.ndarray  # (N, Hv, Wv)
    heat: np.ndarray  # (N, Hv, Wv) softmax over valid positions
    anchors: np.ndarray  # (N, 2) absolute (row, col)


@dataclass
class AnchorForward:
    """Everything the backward pass needs, plus the user-facing results."""

    values: np.ndarray  # (N, 1)
    per_anchor: list[_AnchorForward] = field(default_factory=list)
    shape: tuple[int, int] = (0, 0)


class _AnchorSearch:
    """Template correlation, softmax and soft-argmax for one anchor."""

    def __init__(self, template, region, temperature, contrast_floor):
        t = np.asarray(template, dtype=float)
        if t.ndim != 2 or t.std() == 0:
            raise ValueError("template must be a non-constant 2-D patch")
        self.th, self.tw = t.shape
        self.n = t.size
        # Zero-mean, scaled so that sum(t_hat * (x - mean)) / std(x) is the NCC.
        self.t_hat = (t - t.mean()) / (t.std() * self.n)
        self.offset = (self.th // 2, self.tw // 2)
        self.region = region
        self.temperature = float(temperature)
        self.floor = float(contrast_floor)
        self._spectra: dict[tuple[int, int], np.ndarray] = {}

    def bounds(self, shape) -> tuple[int, int, int, int]:
        h, w = shape
        r0, r1, c0, c1 = self.region if self.region is not None else (0, h, 0, w)
        r0, c0 = max(r0, 0), max(c0, 0)
        r1, c1 = min(r1, h), min(c1, w)
        if r1 - r0 < self.th or c1 - c0 < self.tw:
            raise ValueError(f"template {self.th}x{self.tw} does not fit the search region")
        return r0, r1, c0, c1

    def window_key(self, shape):
        return self.bounds(shape), self.th, self.tw, self.floor

    def spectrum(self, shape, dtype=np.float64):
        key = (shape, np.dtype(dtype))
        if key not in self._spectra:
            self._spectra[key] = sfft.rfft2(self.t_hat.astype(dtype), s=shape)
        return self._spectra[key]

    def _grid(self, win: _Window):
        hv, wv = win.mu.shape[-2:]
        r0, _, c0, _ = win.bounds
        return np.arange(hv) + (r0 + self.offset[0]), np.arange(wv) + (c0 + self.offset[1])

    def forward(self, win: _Window) -> _AnchorForward:
        h, w = win.crop.shape[-2:]
        hv, wv = win.mu.shape[-2:]
        # Circular correlation is exact on the positions where the template fits.
        corr = sfft.irfft2(win.spectrum * np.conj(self.spectrum((h, w), win.crop.dtype)), s=(h, w))
        ncc = corr[:, :hv, :wv] / win.sigma
        logits = self.temperature * ncc
        logits -= logits.max(axis=(1, 2), keepdims=True)
        heat = np.exp(logits)
        heat /= heat.sum(axis=(1, 2), keepdims=True)
        rows, cols = self._grid(win)
        rows, cols = rows.astype(heat.dtype), cols.astype(heat.dtype)
        anchors = np.stack([heat.sum(axis=2) @ rows, heat.sum(axis=1) @ cols], axis=1)
        return _AnchorForward(win, ncc, heat, anchors)

    def backward(self, fw: _AnchorForward, grad_anchor: np.ndarray):
        """Pull (N, 2) anchor gradients back to the window statistics.

        Returns the adjoint-correlated gradient in the frequency domain and
        the gradients w.r.t. the two local box sums (sum x, sum x^2).
        """
        win = fw.window
        rows, cols = self._grid(win)
        rows, cols = rows.astype(fw.heat.dtype), cols.astype(fw.heat.dtype)
        dr = rows[None, :, None] - fw.anchors[:, 0, None, None]
        dc = cols[None, None, :] - fw.anchors[:, 1, None, None]
        g_ncc = self.temperature * fw.heat * (
            grad_anchor[:, 0, None, None] * dr + grad_anchor[:, 1, None, None] * dc
        )
        g_corr = g_ncc / win.sigma
        g_sigma = -g_ncc * fw.ncc / win.sigma
        g_s2 = g_sigma / (2.0 * win.sigma * self.n)
        g_s1 = -2.0 * g_s2 * win.mu
        shape = win.crop.shape[-2:]
        g_spec = sfft.rfft2(g_corr, s=shape) * self.spectrum(shape, win.crop.dtype)
        return g_spec, g_s1, g_s2

    def full_heatmap(self, heat: np.ndarray, shape) -> np.ndarray:
        r0, _, c0, _ = self.bounds(shape)
        out = np.zeros(tuple(shape))
        rr, cc = r0 + self.offset[0], c0 + self.offset[1]
        out[rr:rr + heat.shape[0], cc:cc + heat.shape[1]] = heat
        return out


class AnchorDistanceTask(Task):
    """Distance between two soft-argmax anchors found by template matching.

    Args:
        template_a, template_b: 2-D patches; the anchor is the patch pixel at
            (rows // 2, cols // 2).
        softmax_temperature: multiplier on NCC before the softmax.
        region_a, region_b: optional (row0, row1, col0, col1) windows the
            template must lie in. Pixels outside both windows never affect
            the output.
        contrast_floor: added to the local variance before the square root,
            which keeps flat, speckle-only patches from producing confident
            spurious matches.
    """

    n_outputs = 1

    def __init__(
        self,
        template_a: np.ndarray,
        template_b: np.ndarray,
        softmax_temperature: float = DEFAULT_TEMPERATURE,
        *,
        region_a: Sequence[int] | None = None,
        region_b: Sequence[int] | None = None,
        contrast_floor: float = DEFAULT_CONTRAST_FLOOR,
        dtype=np.float64,
    ):
        if softmax_temperature <= 0:
            raise ValueError("softmax_temperature must be positive")
        self.searches = [
            _AnchorSearch(template_a, region_a, softmax_temperature, contrast_floor),
            _AnchorSearch(template_b, region_b, softmax_temperature, contrast_floor),
        ]
        self.dtype = np.dtype(dtype)

    def forward(self, xs: np.ndarray) -> AnchorForward:
        xs = np.asarray(xs, dtype=self.dtype)
        if xs.ndim == 2:
            xs = xs[None]
        shape = xs.shape[-2:]
        windows: dict = {}
        per = []
        for s in self.searches:
            key = s.window_key(shape)
            if key not in windows:
                windows[key] = _Window.build(xs, *key)
            per.append(s.forward(windows[key]))
        diff = per[0].anchors - per[1].anchors
        values = np.sqrt((diff * diff).sum(axis=1))[:, None].astype(float)
        return AnchorForward(values=values, per_anchor=per, shape=shape)

    def backward(self, fw: AnchorForward) -> np.ndarray:
        """Image gradients of the distance, shape (N, 1, H*W)."""
        a, b = fw.per_anchor
        diff = a.anchors - b.anchors
        dist = fw.values[:, 0]
        if np.any(dist == 0):
            raise DegenerateDistance("anchors coincide; the distance is not differentiable")
        unit = (diff / dist[:, None]).astype(self.dtype)
        # Accumulate per window so shared windows share the inverse FFTs.
        acc: dict[int, list] = {}
        for search, part, g in zip(self.searches, fw.per_anchor, (unit, -unit)):
            g_spec, g_s1, g_s2 = search.backward(part, g)
            slot = acc.setdefault(id(part.window), [part.window, 0, 0, 0])
            slot[1] = slot[1] + g_spec
            slot[2] = slot[2] + g_s1
            slot[3] = slot[3] + g_s2
        n = len(dist)
        out = np.zeros((n,) + tuple(fw.shape), dtype=self.dtype)
        for win, g_spec, g_s1, g_s2 in acc.values():
            shape = win.crop.shape[-2:]
            g_crop = sfft.irfft2(g_spec + sfft.rfft2(g_s1, s=shape) * win.box, s=shape)
            g_crop += 2.0 * win.crop * sfft.irfft2(sfft.rfft2(g_s2, s=shape) * win.box, s=shape)
            r0, r1, c0, c1 = win.bounds
            out[:, r0:r1, c0:c1] += g_crop
        return out.reshape(n, 1, -1)

    def values(self, xs):
        return self.forward(xs).values

    def gradients(self, xs):
        return self.backward(self.forward(xs))

    def __call__(self, x) -> TaskOutput:
        fw = self.forward(x)
        return TaskOutput(
            values=fw.values[0],
            heatmaps=[s.full_heatmap(p.heat[0], fw.shape) for s, p in zip(self.searches, fw.per_anchor)],
            anchors=[tuple(map(float, p.anchors[0])) for p in fw.per_anchor],
        )

    def measure_mean_heatmap(
        self, fw: AnchorForward, weights: np.ndarray | None = None
    ) -> tuple[float, list[tuple[float, float]]]:
        """Average each anchor's heatmaps over the batch, then locate and measure.

        The centre of mass is linear in the map, so the anchor of the averaged
        heatmap is the (weighted) mean of the per-sample anchors; that is how
        it is computed here.
        """
        anchors = [
            tuple(float(v) for v in np.average(part.anchors, axis=0, weights=weights))
            for part in fw.per_anchor
        ]
        return math.dist(anchors[0], anchors[1]), anchors

    def mean_heatmaps(self, fw: AnchorForward, weights: np.ndarray | None = None) -> list[np.ndarray]:
        """Per-anchor heatmaps averaged over the batch, on the full grid."""
        return [
            search.full_heatmap(np.average(part.heat, axis=0, weights=weights), fw.shape)
            for search, part in zip(self.searches, fw.per_anchor)
        ]


def anchor_distance_task(
    template_a: np.ndarray,
    template_b: np.ndarray,
    softmax_temperature: float = DEFAULT_TEMPERATURE,
    **kwargs,
) -> AnchorDistanceTask:
    return AnchorDistanceTask(template_a, template_b, softmax_temperature, **kwargs)


def wall_templates(wall: int = 8, band: int = 4, width: int = 11) -> tuple[np.ndarray, np.ndarray]:
    """Templates for the top and bottom inner wall of the phantom cavity.

    The top template reads background, wall, then cavity going down; its
    reference pixel sits on the wall/cavity edge. The bottom one is its
    vertical mirror.
    """
    profile = np.concatenate(
        [
            np.full(band, BACKGROUND_LEVEL),
            np.full(wall, WALL_LEVEL),
            [(WALL_LEVEL + CAVITY_LEVEL) / 2],
            np.full(band + wall, CAVITY_LEVEL),
        ]
    )
    top = np.repeat(profile[:, None], width, axis=1)
    return top, top[::-1].copy()


def default_task(**kwargs) -> AnchorDistanceTask:
    """Inner vertical cavity diameter of the phantom."""
    top, bottom = wall_templates()
    return AnchorDistanceTask(top, bottom, **kwargs)


def jacobian(f: Task, x: np.ndarray, reference_input_id: Any = None) -> Jacobian:
    """Analytic Jacobian of ``f`` at a single image."""
    x = np.asarray(x, dtype=float)
    return Jacobian(f.gradients(x[None])[0], reference_input_id)


def jacobian_fd(f: Task, x: np.ndarray, step: float = 1e-4, batch_size: int = 256) -> Jacobian:
    """Central-difference Jacobian, one pixel at a time.

    Perturbed images are pushed through ``f.values`` in batches, which is the
    only thing this oracle relies on.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    n_pix = x.size
    m = f.values(x[None]).shape[1]
    out = np.empty((m, n_pix))
    flat = x.ravel()
    for start in range(0, n_pix, batch_size):
        idx = np.arange(start, min(start + batch_size, n_pix))
        plus = np.repeat(flat[None], len(idx), axis=0)
        minus = plus.copy()
        plus[np.arange(len(idx)), idx] += step
        minus[np.arange(len(idx)), idx] -= step
        fp = f.values(plus.reshape((len(idx),) + x.shape))
        fm = f.values(minus.reshape((len(idx),) + x.shape))
        out[:, idx] = ((fp - fm) / (2.0 * step)).T
    return Jacobian(out)
