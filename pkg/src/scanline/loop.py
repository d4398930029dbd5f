"""Perception-action loop over one phantom sequence.

Per frame t: acquire the columns chosen at t-1, update the belief, estimate
the measurement, choose the columns for t+1, then predict to t+1. The first
``init_full_frames`` frames are fully sampled to warm the belief up.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import phantom
from .errors import ConfigError, DegenerateLikelihood
from .perception import (
    DEFAULT_ESS_FRACTION,
    Belief,
    Observation,
    ensemble,
    init_belief,
    predict,
    thin,
    update,
)
from .policy import POLICIES, LineBudgetAction, select_action, task_forward
from .task import AnchorDistanceTask, Task, default_task

log = logging.getLogger(__name__)

FULL_POLICY = "full"


@dataclass(frozen=True)
class LoopConfig:
    n_frames: int = 100
    budget_k: int = 5
    n_particles: int = 32
    policy: str = "tbig"
    obs_noise_sigma: float = 0.03
    process_noise_scale: float = 1.0
    filter_noise_inflation: float = 5.0
    init_oversample: int = 16
    rng_seed: int = 0
    init_full_frames: int = 3
    height: int = phantom.DEFAULT_HEIGHT
    width: int = phantom.DEFAULT_WIDTH
    ess_threshold_fraction: float = DEFAULT_ESS_FRACTION
    n_reference: int | None = None
    record_timing: bool = False

    def validate(self) -> "LoopConfig":
        if self.n_frames < 1:
            raise ConfigError(f"n_frames must be >= 1, got {self.n_frames}")
        if not 1 <= self.budget_k <= self.width:
            raise ConfigError(f"budget_k must be in [1, width={self.width}], got {self.budget_k}")
        if self.init_full_frames < 0:
            raise ConfigError("init_full_frames must be >= 0")
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.obs_noise_sigma <= 0:
            raise ConfigError("obs_noise_sigma must be positive")
        if self.process_noise_scale < 0:
            raise ConfigError("process_noise_scale must be nonnegative")
        if self.init_oversample < 1:
            raise ConfigError("init_oversample must be >= 1")
        if self.filter_noise_inflation < 0:
            raise ConfigError("filter_noise_inflation must be nonnegative")
        if not 0 < self.ess_threshold_fraction <= 1:
            raise ConfigError("ess_threshold_fraction must be in (0, 1]")
        if self.n_reference is not None and not 1 <= self.n_reference <= self.n_particles:
            raise ConfigError("n_reference must be in [1, n_particles]")
        return self

    def replace(self, **changes) -> "LoopConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class FrameRecord:
    frame_index: int
    action: LineBudgetAction
    target_measurement: float
    estimated_measurement: float
    estimate_std: float
    uncertainty_estimate: float
    wall_time_ms: float
    flagged: bool = False
    anchors: list = field(default_factory=list, repr=False)


def acquire(truth: np.ndarray, action: LineBudgetAction) -> Observation:
    """Keep only the selected columns of the true frame."""
    cols = np.asarray(action.columns, dtype=int)
    if cols.size and (cols.min() < 0 or cols.max() >= truth.shape[1]):
        raise ValueError("action columns outside the image")
    return Observation(action.frame_index, cols, truth[:, cols].copy())


def estimate_measurement(belief: Belief, task: Task) -> tuple[float, float]:
    """Point estimate from the mean heatmaps and the spread of per-sample values."""
    ens = ensemble(belief)
    if isinstance(task, AnchorDistanceTask):
        fw = task_forward(belief, task)
        value, _ = task.measure_mean_heatmap(fw, weights=ens.counts)
        per_sample = fw.values[:, 0][ens.index]
    else:
        per_sample = task.values(ens.images)[:, 0][ens.index]
        value = float(per_sample.mean())
    return float(value), float(per_sample.std(ddof=1))


def truth_sequence(config: LoopConfig, phantom_seed: int) -> phantom.PhantomSequence:
    return phantom.simulate_sequence(
        config.n_frames,
        phantom_seed,
        height=config.height,
        width=config.width,
        process_noise_scale=config.process_noise_scale,
    )


def run_episode(
    config: LoopConfig,
    phantom_seed: int,
    *,
    task: Task | None = None,
    prior: phantom.PriorSpec | None = None,
    on_select: Callable[[Belief, LineBudgetAction], None] | None = None,
) -> list[FrameRecord]:
    """Run the loop for ``config.n_frames`` frames; deterministic in both seeds."""
    config.validate()
    task = task or default_task(dtype=np.float32)
    truth = truth_sequence(config, phantom_seed)
    belief = init_belief(
        prior or phantom.default_prior(config.height, config.width),
        config.n_particles * config.init_oversample,
        config.rng_seed,
        height=config.height,
        width=config.width,
        speckle_seed=truth.speckle_seed,
    )
    everything = tuple(range(config.width))
    pending: LineBudgetAction | None = None
    records: list[FrameRecord] = []
    for t in range(config.n_frames):
        start = time.perf_counter()
        if t < config.init_full_frames:
            action = LineBudgetAction(everything, t, FULL_POLICY)
        else:
            action = pending
            assert action is not None and action.frame_index == t
            assert action.k == config.budget_k
        image = truth.frame(t)
        obs = acquire(image, action)
        flagged = False
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateLikelihood)
            belief = update(belief, obs, config.obs_noise_sigma, config.ess_threshold_fraction)
        if caught:
            flagged = True
            log.warning("frame %d: degenerate likelihood, weights reset", t)
        if belief.n_particles > config.n_particles:
            belief = thin(belief, config.n_particles)
        estimate, std = estimate_measurement(belief, task)
        target = float(task.values(image[None])[0, 0])

        u = math.nan
        if t + 1 < config.n_frames and t + 1 >= config.init_full_frames:
            pending = select_action(
                config.policy,
                belief,
                task,
                config.budget_k,
                rng_seed=config.rng_seed,
                n_reference=config.n_reference,
            )
            u = pending.uncertainty
            flagged = flagged or pending.flagged
            if on_select is not None:
                on_select(belief, pending)
        elapsed = (time.perf_counter() - start) * 1e3
        records.append(
            FrameRecord(t, action, target, estimate, std, u, elapsed, flagged)
        )
        if t + 1 < config.n_frames:
            belief = predict(belief, config.process_noise_scale * config.filter_noise_inflation)
    return records


def _fmt(x: float) -> str:
    return repr(float(x))


def frames_csv(records: Sequence[FrameRecord], budget_k: int, *, record_timing: bool = False) -> str:
    """FrameRecord table; fully sampled frames leave the column fields empty."""
    buf = io.StringIO()
    cols = [f"col_{i + 1}" for i in range(budget_k)]
    buf.write(",".join(["frame", "policy", "k", "target", "estimate", "std", "uncertainty", *cols, "wall_ms"]) + "\n")
    for r in records:
        a = r.action
        if a.policy_name == FULL_POLICY:
            col_fields = [""] * budget_k
        else:
            col_fields = [str(c) for c in a.columns]
        wall = _fmt(r.wall_time_ms) if record_timing else "nan"
        row = [
            str(r.frame_index), a.policy_name, str(a.k),
            _fmt(r.target_measurement), _fmt(r.estimated_measurement), _fmt(r.estimate_std),
            _fmt(r.uncertainty_estimate), *col_fields, wall,
        ]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def actions_csv(actions: Sequence[LineBudgetAction], budget_k: int) -> str:
    buf = io.StringIO()
    cols = [f"col_{i + 1}" for i in range(budget_k)]
    buf.write(",".join(["frame", "policy", *cols, "uncertainty_estimate"]) + "\n")
    for a in actions:
        buf.write(",".join([str(a.frame_index), a.policy_name, *map(str, a.columns), _fmt(a.uncertainty)]) + "\n")
    return buf.getvalue()


def write_frames_csv(path: str | Path, records, budget_k: int, *, record_timing: bool = False) -> None:
    Path(path).write_text(frames_csv(records, budget_k, record_timing=record_timing))


def read_frames_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Load the numeric columns of a frames.csv."""
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no frame rows")
    out: dict[str, np.ndarray] = {}
    for key in ("frame", "k"):
        out[key] = np.array([int(r[key]) for r in rows])
    for key in ("target", "estimate", "std", "uncertainty"):
        out[key] = np.array([float(r[key]) for r in rows])
    out["policy"] = np.array([r["policy"] for r in rows])
    return out
