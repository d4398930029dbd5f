"""Synthetic beating-cavity phantom.

A dark elliptical cavity surrounded by a bright wall on a mid-grey
background. The cavity semi-axes are modulated by ``1 + amplitude*cos(phase)``
so the vertical inner diameter oscillates like a ventricle over the cardiac
cycle. One scan line is one image column.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import GeometryOutOfBounds

TWO_PI = 2.0 * math.pi

DEFAULT_HEIGHT = 128
DEFAULT_WIDTH = 256

BACKGROUND_LEVEL = 0.30
WALL_LEVEL = 0.85
CAVITY_LEVEL = 0.05
SPECKLE_STRENGTH = 0.15

# Order of the flat parameter vector used for vectorised particle work.
PARAM_NAMES = (
    "cavity_center_row",
    "cavity_center_col",
    "cavity_semi_axis_r",
    "cavity_semi_axis_c",
    "wall_thickness",
    "phase",
    "phase_rate",
    "drift_row",
    "drift_col",
    "amplitude",
)
N_PARAMS = len(PARAM_NAMES)
(ROW, COL, AXIS_R, AXIS_C, WALL, PHASE, RATE, DRIFT_R, DRIFT_C, AMP) = range(N_PARAMS)

# Per-frame process noise std at process_noise_scale == 1.
PROCESS_NOISE_STD = np.array([0.25, 0.25, 0.3, 0.3, 0.05, 0.04, 0.002, 0.0, 0.0, 0.0])

MIN_AXIS = 2.0
MIN_WALL = 1.0


@dataclass(frozen=True)
class LatentState:
    cavity_center_row: float
    cavity_center_col: float
    cavity_semi_axis_r: float
    cavity_semi_axis_c: float
    wall_thickness: float
    phase: float = 0.0
    phase_rate: float = 0.0
    drift_velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.2

    def to_array(self) -> np.ndarray:
        return np.array(
            [
                self.cavity_center_row,
                self.cavity_center_col,
                self.cavity_semi_axis_r,
                self.cavity_semi_axis_c,
                self.wall_thickness,
                self.phase,
                self.phase_rate,
                self.drift_velocity[0],
                self.drift_velocity[1],
                self.amplitude,
            ],
            dtype=float,
        )

    @classmethod
    def from_array(cls, p: Sequence[float]) -> "LatentState":
        p = [float(v) for v in p]
        return cls(
            cavity_center_row=p[ROW],
            cavity_center_col=p[COL],
            cavity_semi_axis_r=p[AXIS_R],
            cavity_semi_axis_c=p[AXIS_C],
            wall_thickness=p[WALL],
            phase=p[PHASE],
            phase_rate=p[RATE],
            drift_velocity=(p[DRIFT_R], p[DRIFT_C]),
            amplitude=p[AMP],
        )

    def replace(self, **changes) -> "LatentState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class GroundTruthMeasurement:
    value: float
    anchor_a: tuple[float, float]
    anchor_b: tuple[float, float]


def wrap_phase(phase):
    """Map to [0, 2*pi); np.mod alone can round tiny negatives up to 2*pi."""
    out = np.mod(phase, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


def outer_extent(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest row/col half-extent of the wall over a full cardiac cycle."""
    params = np.asarray(params, dtype=float)
    swing = 1.0 + np.abs(params[..., AMP])
    ext_r = params[..., AXIS_R] * swing + params[..., WALL]
    ext_c = params[..., AXIS_C] * swing + params[..., WALL]
    return ext_r, ext_c


def geometry_fits(params: np.ndarray, height: int, width: int) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    ext_r, ext_c = outer_extent(params)
    positive = (
        (params[..., AXIS_R] > 0) & (params[..., AXIS_C] > 0) & (params[..., WALL] > 0)
    )
    inside = (
        (params[..., ROW] - ext_r >= 0)
        & (params[..., ROW] + ext_r <= height - 1)
        & (params[..., COL] - ext_c >= 0)
        & (params[..., COL] + ext_c <= width - 1)
    )
    return positive & inside


def clamp_params(params: np.ndarray, height: int, width: int) -> np.ndarray:
    """Project parameter rows back onto the valid geometry for the grid.

    Works in place on a float array of shape (..., N_PARAMS) and returns it.
    """
    p = params
    swing = 1.0 + np.abs(p[..., AMP])
    max_wall = (min(height, width) - 1) / 2.0 - MIN_AXIS * swing
    p[..., WALL] = np.clip(p[..., WALL], MIN_WALL, np.maximum(max_wall, MIN_WALL))
    # Axes first so that a centred ellipse always fits, then the centre.
    max_axis_r = ((height - 1) / 2.0 - p[..., WALL]) / swing
    max_axis_c = ((width - 1) / 2.0 - p[..., WALL]) / swing
    p[..., AXIS_R] = np.clip(p[..., AXIS_R], MIN_AXIS, np.maximum(max_axis_r, MIN_AXIS))
    p[..., AXIS_C] = np.clip(p[..., AXIS_C], MIN_AXIS, np.maximum(max_axis_c, MIN_AXIS))
    ext_r, ext_c = outer_extent(p)
    p[..., ROW] = np.clip(p[..., ROW], ext_r, height - 1 - ext_r)
    p[..., COL] = np.clip(p[..., COL], ext_c, width - 1 - ext_c)
    p[..., PHASE] = wrap_phase(p[..., PHASE])
    return p


def step_params(
    params: np.ndarray,
    process_noise_scale: float,
    rng: np.random.Generator | None,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
) -> np.ndarray:
    """Vectorised transition for an (N, N_PARAMS) array of states."""
    out = np.array(params, dtype=float, copy=True)
    out[..., PHASE] += out[..., RATE]
    out[..., ROW] += out[..., DRIFT_R]
    out[..., COL] += out[..., DRIFT_C]
    if process_noise_scale > 0:
        if rng is None:
            raise ValueError("an rng is required when process noise is on")
        out += rng.standard_normal(out.shape) * (PROCESS_NOISE_STD * process_noise_scale)
    out[..., PHASE] = wrap_phase(out[..., PHASE])
    if process_noise_scale > 0 or np.any(out[..., DRIFT_R:DRIFT_C + 1] != 0):
        clamp_params(out, height, width)
    return out


def step_latent(
    state: LatentState,
    process_noise_scale: float,
    rng_seed: int,
    *,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
) -> LatentState:
    """Advance one frame: phase by phase_rate, centre by drift, plus noise."""
    rng = np.random.default_rng(rng_seed)
    return LatentState.from_array(
        step_params(state.to_array(), process_noise_scale, rng, height, width)
    )


@functools.lru_cache(maxsize=64)
def speckle_field(height: int, width: int, seed: int, strength: float = SPECKLE_STRENGTH) -> np.ndarray:
    """Fixed multiplicative texture, mean ~1, one per sequence."""
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=1.0)
    noise /= noise.std()
    field = 1.0 + strength * noise
    field.setflags(write=False)
    return field


def _coverage(dr: np.ndarray, dc: np.ndarray, a: float, b: float) -> np.ndarray:
    """Anti-aliased ellipse coverage from a first-order signed distance."""
    u = dr / a
    v = dc / b
    rho = np.sqrt(u * u + v * v)
    gnorm = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = (rho - 1.0) * rho / gnorm
    dist = np.where(gnorm > 0, dist, -np.inf)
    return np.clip(0.5 - dist, 0.0, 1.0)


def _paint(p: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Clean (speckle-free) intensities on the rows x cols sub-grid."""
    scale = 1.0 + p[AMP] * math.cos(p[PHASE])
    a_in = p[AXIS_R] * scale
    b_in = p[AXIS_C] * scale
    dr = (rows - p[ROW])[:, None]
    dc = (cols - p[COL])[None, :]
    outer = _coverage(dr, dc, a_in + p[WALL], b_in + p[WALL])
    inner = _coverage(dr, dc, a_in, b_in)
    return (
        BACKGROUND_LEVEL
        + (WALL_LEVEL - BACKGROUND_LEVEL) * outer
        + (CAVITY_LEVEL - WALL_LEVEL) * inner
    )


def _bbox(p: np.ndarray, height: int, width: int) -> tuple[slice, slice]:
    ext_r, ext_c = outer_extent(p)
    ratio = max(p[AXIS_R], p[AXIS_C]) / min(p[AXIS_R], p[AXIS_C])
    margin = 3.0 + ratio
    r0 = max(int(math.floor(p[ROW] - ext_r - margin)), 0)
    r1 = min(int(math.ceil(p[ROW] + ext_r + margin)) + 1, height)
    c0 = max(int(math.floor(p[COL] - ext_c - margin)), 0)
    c1 = min(int(math.ceil(p[COL] + ext_c + margin)) + 1, width)
    return slice(r0, r1), slice(c0, c1)


def render_params(
    p: np.ndarray,
    height: int,
    width: int,
    speckle_seed: int | None = None,
    columns: np.ndarray | None = None,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Render one parameter vector; optionally only the given columns."""
    if columns is None:
        img = np.full((height, width), BACKGROUND_LEVEL) if out is None else out
        if out is not None:
            img.fill(BACKGROUND_LEVEL)
        rs, cs = _bbox(p, height, width)
        img[rs, cs] = _paint(p, np.arange(rs.start, rs.stop), np.arange(cs.start, cs.stop))
        if speckle_seed is not None:
            img *= speckle_field(height, width, speckle_seed)
    else:
        columns = np.asarray(columns, dtype=int)
        img = _paint(p, np.arange(height, dtype=float), columns.astype(float))
        if speckle_seed is not None:
            img *= speckle_field(height, width, speckle_seed)[:, columns]
    np.clip(img, 0.0, 1.0, out=img)
    return img


def render(
    state: LatentState,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    *,
    speckle_seed: int | None = None,
) -> np.ndarray:
    """Render a state to an (height, width) image with values in [0, 1].

    Raises:
        GeometryOutOfBounds: if the wall does not fit inside the grid.
    """
    p = state.to_array()
    if not bool(geometry_fits(p, height, width)):
        raise GeometryOutOfBounds(
            f"state {state} does not fit in a {height}x{width} grid"
        )
    return render_params(p, height, width, speckle_seed)


def render_batch(
    params: np.ndarray,
    height: int,
    width: int,
    speckle_seed: int | None = None,
    columns: np.ndarray | None = None,
) -> np.ndarray:
    """Render an (N, N_PARAMS) array; returns (N, H, W) or (N, H, len(columns))."""
    params = np.atleast_2d(params)
    n_cols = width if columns is None else len(columns)
    stack = np.empty((len(params), height, n_cols))
    for i, p in enumerate(params):
        if columns is None:
            render_params(p, height, width, speckle_seed, out=stack[i])
        else:
            stack[i] = render_params(p, height, width, speckle_seed, columns=columns)
    return stack


def ground_truth_measurement(state: LatentState) -> GroundTruthMeasurement:
    """Inner cavity diameter along the vertical line through the centre."""
    half = state.cavity_semi_axis_r * (1.0 + state.amplitude * math.cos(state.phase))
    r, c = state.cavity_center_row, state.cavity_center_col
    a = (r - half, c)
    b = (r + half, c)
    return GroundTruthMeasurement(value=math.dist(a, b), anchor_a=a, anchor_b=b)


@dataclass(frozen=True)
class PriorSpec:
    """Closed (low, high) ranges for every latent parameter."""

    cavity_center_row: tuple[float, float]
    cavity_center_col: tuple[float, float]
    cavity_semi_axis_r: tuple[float, float]
    cavity_semi_axis_c: tuple[float, float]
    wall_thickness: tuple[float, float]
    phase: tuple[float, float] = (0.0, TWO_PI)
    phase_rate: tuple[float, float] = (0.0, 0.0)
    drift_row: tuple[float, float] = (0.0, 0.0)
    drift_col: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.2, 0.2)

    def bounds(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        b = self.bounds()
        return b[:, 0] + (b[:, 1] - b[:, 0]) * rng.random((n, N_PARAMS))

    @classmethod
    def point(cls, state: LatentState) -> "PriorSpec":
        p = state.to_array()
        return cls(**{name: (p[i], p[i]) for i, name in enumerate(PARAM_NAMES)})


def default_prior(height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> PriorSpec:
    """Plausible spread of cavities, scaled to the grid size."""
    sr = height / DEFAULT_HEIGHT
    sc = width / DEFAULT_WIDTH
    return PriorSpec(
        cavity_center_row=(height / 2 - 5 * sr, height / 2 + 5 * sr),
        cavity_center_col=(width / 2 - 20 * sc, width / 2 + 20 * sc),
        cavity_semi_axis_r=(26 * sr, 34 * sr),
        cavity_semi_axis_c=(45 * sc, 65 * sc),
        wall_thickness=(6 * sr, 9 * sr),
        phase_rate=(TWO_PI / 32, TWO_PI / 26),
    )


@dataclass(frozen=True)
class PhantomSequence:
    """Ground-truth cine: per-frame latent states and a fixed speckle seed."""

    states: np.ndarray  # (n_frames, N_PARAMS)
    height: int
    width: int
    speckle_seed: int | None

    @property
    def n_frames(self) -> int:
        return len(self.states)

    def state(self, t: int) -> LatentState:
        return LatentState.from_array(self.states[t])

    def frame(self, t: int) -> np.ndarray:
        return render_params(self.states[t], self.height, self.width, self.speckle_seed)

    def frames(self) -> np.ndarray:
        return render_batch(self.states, self.height, self.width, self.speckle_seed)

    def measurements(self) -> list[GroundTruthMeasurement]:
        return [ground_truth_measurement(self.state(t)) for t in range(self.n_frames)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.states).tobytes())
        h.update(repr((self.height, self.width, self.speckle_seed)).encode())
        return h.hexdigest()


def simulate_sequence(
    n_frames: int,
    seed: int,
    *,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    prior: PriorSpec | None = None,
    process_noise_scale: float = 1.0,
    initial_state: LatentState | None = None,
    speckle: bool = True,
) -> PhantomSequence:
    """Draw an initial state from the prior and roll it forward."""
    rng = np.random.default_rng([seed, 0xC1E])
    if initial_state is None:
        prior = prior or default_prior(height, width)
        p = clamp_params(prior.sample(1, rng)[0], height, width)
    else:
        p = initial_state.to_array()
    states = np.empty((n_frames, N_PARAMS))
    for t in range(n_frames):
        states[t] = p
        p = step_params(p, process_noise_scale, rng, height, width)
    return PhantomSequence(states, height, width, seed if speckle else None)


def export_sequence(path: str | Path, frames: np.ndarray) -> None:
    """Header ``height width n_frames`` then one block of H text rows per frame."""
    frames = np.asarray(frames)
    n, h, w = frames.shape
    with open(path, "w") as fh:
        fh.write(f"{h} {w} {n}\n")
        for frame in frames:
            np.savetxt(fh, frame, fmt="%.17g")


def load_sequence(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        h, w, n = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    return data.reshape(n, h, w)


def export_ground_truth(path: str | Path, measurements: Sequence[GroundTruthMeasurement]) -> None:
    with open(path, "w") as fh:
        fh.write("frame,value,anchor_a_row,anchor_a_col,anchor_b_row,anchor_b_col\n")
        for t, m in enumerate(measurements):
            fh.write(
                f"{t},{m.value!r},{m.anchor_a[0]!r},{m.anchor_a[1]!r},"
                f"{m.anchor_b[0]!r},{m.anchor_b[1]!r}\n"
            )
