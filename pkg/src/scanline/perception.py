"""Particle-filter belief over the phantom's latent state.

The belief stands in for a generative posterior sampler: it only has to
hand out posterior image samples and their pixel-wise variance. Particles
are kept as an (N, N_PARAMS) array for speed; ``Belief.particles`` gives
the (LatentState, weight) view.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import phantom
from .errors import DegenerateLikelihood, InvalidPrior, ShapeMismatch
from .phantom import LatentState, PriorSpec

DEFAULT_N_PARTICLES = 32
DEFAULT_ESS_FRACTION = 0.5


@dataclass(frozen=True)
class Observation:
    frame_index: int
    mask: np.ndarray  # (k,) column indices
    columns: np.ndarray  # (H, k) observed intensities

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=int)
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2 or cols.shape[1] != len(mask):
            raise ShapeMismatch(f"{len(mask)} mask entries but columns of shape {cols.shape}")
        if len(np.unique(mask)) != len(mask):
            raise ValueError("mask contains duplicate columns")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "columns", cols)


@dataclass(frozen=True)
class Ensemble:
    """Posterior image samples stored once per distinct particle.

    ``images[index]`` expands to the full list of N_p samples.
    """

    params: np.ndarray  # (U, N_PARAMS)
    images: np.ndarray  # (U, H, W)
    index: np.ndarray  # (N_p,) into the unique rows
    counts: np.ndarray  # (U,)

    @property
    def n_samples(self) -> int:
        return len(self.index)

    def expand(self) -> np.ndarray:
        return self.images[self.index]

    def variance(self) -> np.ndarray:
        return weighted_pixel_variance(self.images, self.counts)


@dataclass(frozen=True)
class Belief:
    params: np.ndarray  # (N, N_PARAMS)
    weights: np.ndarray  # (N,)
    frame_index: int
    height: int
    width: int
    seed: int
    speckle_seed: int | None = None
    flagged: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.params) < 2:
            raise ValueError("a belief needs at least two particles")

    @property
    def n_particles(self) -> int:
        return len(self.params)

    @property
    def particles(self) -> list[tuple[LatentState, float]]:
        return [(LatentState.from_array(p), float(w)) for p, w in zip(self.params, self.weights)]

    @property
    def rendered(self) -> np.ndarray:
        if "rendered" not in self._cache:
            self._cache["rendered"] = phantom.render_batch(
                self.params, self.height, self.width, self.speckle_seed
            )
        return self._cache["rendered"]

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n_particles, rtol=0, atol=1e-12))

    def rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.frame_index, purpose])


def init_belief(
    prior_spec: PriorSpec,
    n_particles: int = DEFAULT_N_PARTICLES,
    rng_seed: int = 0,
    *,
    height: int = phantom.DEFAULT_HEIGHT,
    width: int = phantom.DEFAULT_WIDTH,
    speckle_seed: int | None = None,
) -> Belief:
    """Draw particles uniformly from the prior ranges, with equal weights."""
    if n_particles < 2:
        raise InvalidPrior("need at least two particles to estimate variance")
    bounds = prior_spec.bounds()
    if np.any(bounds[:, 0] > bounds[:, 1]) or not np.all(np.isfinite(bounds)):
        raise InvalidPrior("every prior range must be a finite (low, high) with low <= high")
    if bounds[phantom.AXIS_R, 0] <= 0 or bounds[phantom.AXIS_C, 0] <= 0 or bounds[phantom.WALL, 0] <= 0:
        raise InvalidPrior("semi-axes and wall thickness must be positive")
    # Largest shape at each of the four centre corners must fit.
    largest = bounds[:, 1].copy()
    largest[phantom.AMP] = np.abs(bounds[phantom.AMP]).max()
    for r in bounds[phantom.ROW]:
        for c in bounds[phantom.COL]:
            corner = largest.copy()
            corner[phantom.ROW], corner[phantom.COL] = r, c
            if not phantom.geometry_fits(corner, height, width):
                raise InvalidPrior(f"prior allows geometry outside the {height}x{width} grid")
    rng = np.random.default_rng([rng_seed, 0xB1])
    params = prior_spec.sample(n_particles, rng)
    params[:, phantom.PHASE] = phantom.wrap_phase(params[:, phantom.PHASE])
    return Belief(
        params=params,
        weights=np.full(n_particles, 1.0 / n_particles),
        frame_index=0,
        height=height,
        width=width,
        seed=rng_seed,
        speckle_seed=speckle_seed,
    )


def predict(belief: Belief, process_noise_scale: float, rng_seed: int | None = None) -> Belief:
    """Push every particle through the phantom dynamics; weights are kept."""
    rng = np.random.default_rng(rng_seed) if rng_seed is not None else belief.rng(0)
    params = phantom.step_params(
        belief.params, process_noise_scale, rng, belief.height, belief.width
    )
    return replace(
        belief, params=params, frame_index=belief.frame_index + 1, flagged=False, _cache={}
    )


def systematic_resample(weights: np.ndarray, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    n = len(weights) if n is None else n
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left")


def log_likelihood(
    predicted: np.ndarray, observed: np.ndarray, obs_noise_sigma: float
) -> np.ndarray:
    """Gaussian column likelihood with per-pixel normalisation.

    ``predicted`` is (N, H, k), ``observed`` is (H, k); returns (N,).
    """
    sse = ((predicted - observed[None]) ** 2).sum(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = -sse / (2.0 * obs_noise_sigma**2 * observed.size)
    return np.where(sse == 0, 0.0, ll)


def update(
    belief: Belief,
    obs: Observation,
    obs_noise_sigma: float,
    ess_threshold_fraction: float = DEFAULT_ESS_FRACTION,
    rng_seed: int | None = None,
) -> Belief:
    """Reweight by the masked-column likelihood and resample if ESS is low.

    If every particle has zero likelihood the weights are reset to uniform,
    the belief is flagged and a ``DegenerateLikelihood`` warning is emitted.
    """
    if len(obs.mask) == 0:
        raise ValueError("observation mask is empty")
    if obs.frame_index != belief.frame_index:
        raise ValueError(
            f"observation is for frame {obs.frame_index}, belief is at {belief.frame_index}"
        )
    if obs_noise_sigma <= 0:
        raise ValueError("obs_noise_sigma must be positive")
    if not 0 < ess_threshold_fraction <= 1:
        raise ValueError("ess_threshold_fraction must be in (0, 1]")
    if obs.columns.shape[0] != belief.height:
        raise ShapeMismatch("observation height does not match the belief grid")

    if len(obs.mask) == belief.width and "rendered" in belief._cache:
        predicted = belief.rendered[:, :, obs.mask]
    else:
        predicted = phantom.render_batch(
            belief.params, belief.height, belief.width, belief.speckle_seed, columns=obs.mask
        )
    ll = log_likelihood(predicted, obs.columns, obs_noise_sigma)
    logw = np.log(belief.weights) + ll
    flagged = False
    if not np.any(np.isfinite(logw)) or np.any(np.isnan(logw)):
        warnings.warn(
            f"all particles have zero likelihood at frame {belief.frame_index}",
            DegenerateLikelihood,
            stacklevel=2,
        )
        weights = np.full(belief.n_particles, 1.0 / belief.n_particles)
        flagged = True
    else:
        weights = np.exp(logw - logw.max())
        weights /= weights.sum()

    params = belief.params
    cache = {}
    if 1.0 / np.sum(weights**2) < ess_threshold_fraction * belief.n_particles:
        rng = np.random.default_rng(rng_seed) if rng_seed is not None else belief.rng(1)
        idx = systematic_resample(weights, rng)
        params = params[idx]
        weights = np.full(belief.n_particles, 1.0 / belief.n_particles)
    return replace(belief, params=params, weights=weights, flagged=flagged, _cache=cache)


def thin(belief: Belief, n_particles: int, rng_seed: int | None = None) -> Belief:
    """Systematically resample down to ``n_particles`` equally weighted particles."""
    if not 2 <= n_particles <= belief.n_particles:
        raise ValueError(f"n_particles must be in [2, {belief.n_particles}]")
    if n_particles == belief.n_particles:
        return belief
    rng = np.random.default_rng(rng_seed) if rng_seed is not None else belief.rng(4)
    idx = systematic_resample(belief.weights, rng, n_particles)
    return replace(
        belief,
        params=belief.params[idx],
        weights=np.full(n_particles, 1.0 / n_particles),
        _cache={},
    )


def _unique_rows(params: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uniq, first, inverse, counts = np.unique(
        params, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    # Keep first-appearance order so results do not depend on sort order.
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return uniq[order], rank[inverse.ravel()], counts[order]


def ensemble(belief: Belief) -> Ensemble:
    """Posterior samples for the belief, rendered once per distinct state."""
    if "ensemble" in belief._cache:
        return belief._cache["ensemble"]
    if belief.is_uniform():
        chosen = belief.params
    else:
        chosen = belief.params[systematic_resample(belief.weights, belief.rng(2))]
    uniq, index, counts = _unique_rows(chosen)
    images = phantom.render_batch(uniq, belief.height, belief.width, belief.speckle_seed)
    ens = Ensemble(uniq, images, index, counts)
    belief._cache["ensemble"] = ens
    return ens


def posterior_samples(belief: Belief) -> np.ndarray:
    """N_p posterior image samples as an (N_p, H, W) array."""
    return ensemble(belief).expand()


def pixel_variance(samples: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Unbiased per-pixel variance across samples (divides by N - 1)."""
    if isinstance(samples, np.ndarray):
        stack = samples.astype(float, copy=False)
    else:
        shapes = {np.shape(s) for s in samples}
        if len(shapes) != 1:
            raise ShapeMismatch(f"samples have differing shapes {sorted(shapes)}")
        stack = np.stack([np.asarray(s, dtype=float) for s in samples])
    if len(stack) < 2:
        raise ValueError("need at least two samples")
    var = stack.var(axis=0, ddof=1)
    # Exact zero where every sample agrees, not mean-rounding residue.
    var[np.all(stack == stack[0], axis=0)] = 0.0
    return var


def weighted_pixel_variance(images: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """``pixel_variance`` of ``images`` repeated ``counts`` times, without the copies."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n < 2:
        raise ValueError("need at least two samples")
    if len(images) == 1:
        return np.zeros(images.shape[1:])
    mean = np.tensordot(counts, images, axes=1) / n
    dev = images - mean
    var = np.tensordot(counts, dev * dev, axes=1) / (n - 1)
    var[np.all(images == images[0], axis=0)] = 0.0
    return var


def export_snapshot(path: str | Path, beliefs: Sequence[Belief]) -> None:
    """CSV of particle parameters and weights, one block of rows per frame."""
    with open(path, "w") as fh:
        fh.write("frame,particle," + ",".join(phantom.PARAM_NAMES) + ",weight\n")
        for b in beliefs:
            for i, (p, w) in enumerate(zip(b.params, b.weights)):
                fh.write(f"{b.frame_index},{i}," + ",".join(repr(float(v)) for v in p) + f",{float(w)!r}\n")
