"""Scan-line selection: K-greedy minimisation over column-aggregated scores."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import BudgetExceedsWidth, DegenerateDistance
from .perception import Belief, ensemble
from .saliency import SaliencyMap, expected_gram_diagonal, saliency_map, uncertainty
from .task import AnchorDistanceTask, Task

log = logging.getLogger(__name__)

ADAPTIVE_POLICIES = ("tbig", "gig")
BASELINE_POLICIES = ("uniform_rotating", "random")
POLICIES = ADAPTIVE_POLICIES + BASELINE_POLICIES


@dataclass(frozen=True)
class LineBudgetAction:
    columns: tuple[int, ...]
    frame_index: int
    policy_name: str
    uncertainty: float = math.nan
    flagged: bool = False

    @property
    def k(self) -> int:
        return len(self.columns)


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray  # (H, W), nonnegative
    kind: str = "saliency"


def k_greedy_minimization(
    score: ScoreMap | np.ndarray,
    k: int,
    *,
    frame_index: int = 0,
    policy_name: str = "greedy",
) -> LineBudgetAction:
    """Pick k columns, each time the one holding the most remaining score.

    A picked column's score is zeroed, i.e. observing a line removes the
    uncertainty of every pixel on it. Ties go to the lowest column index.
    """
    values = np.asarray(score.values if isinstance(score, ScoreMap) else score, dtype=float)
    width = values.shape[-1]
    if not 1 <= k <= width:
        raise BudgetExceedsWidth(f"budget k={k} must be between 1 and the width {width}")
    remaining = values.reshape(-1, width).sum(axis=0)
    picked: list[int] = []
    for _ in range(k):
        col = int(np.argmax(remaining))  # first maximum on ties
        picked.append(col)
        remaining[col] = -np.inf
    return LineBudgetAction(tuple(picked), frame_index, policy_name)


def brute_force_best_subset(column_scores: np.ndarray, k: int) -> tuple[int, ...]:
    """Exhaustive search for the k columns removing the most score."""
    best, best_val = None, -np.inf
    for subset in combinations(range(len(column_scores)), k):
        val = float(np.sum(column_scores[list(subset)]))
        if val > best_val:
            best, best_val = subset, val
    return best


def task_saliency(
    belief: Belief,
    task: Task,
    *,
    n_reference: int | None = None,
    average_jacobians_first: bool = False,
) -> SaliencyMap:
    """Saliency of the current belief for ``task``.

    Jacobians are taken at the posterior samples (optionally a seeded subset
    of ``n_reference`` of them) and the variance is estimated from all of
    them.
    """
    ens = ensemble(belief)
    variance = ens.variance()
    counts = ens.counts.astype(float)
    if n_reference is not None and n_reference < ens.n_samples:
        pick = belief.rng(3).choice(ens.n_samples, size=n_reference, replace=False)
        counts = np.bincount(ens.index[pick], minlength=len(ens.images)).astype(float)
    used = counts > 0
    grads = _gradients(belief, task, ens, used)
    gram = expected_gram_diagonal(grads, weights=counts[used],
                                  average_jacobians_first=average_jacobians_first)
    return saliency_map(gram, variance, int(counts.sum()))


def _gradients(belief, task, ens, used) -> np.ndarray:
    images = ens.images[used]
    if isinstance(task, AnchorDistanceTask):
        fw = task_forward(belief, task)
        if not np.all(used):
            fw = task.forward(images)
        return task.backward(fw)
    return task.gradients(images)


def task_forward(belief: Belief, task: AnchorDistanceTask):
    """Task forward pass on the distinct posterior samples, cached on the belief."""
    key = ("forward", id(task))
    if key not in belief._cache:
        belief._cache[key] = task.forward(ensemble(belief).images)
    return belief._cache[key]


def tbig_action(
    belief: Belief,
    task: Task,
    k: int,
    *,
    n_reference: int | None = None,
    average_jacobians_first: bool = False,
) -> LineBudgetAction:
    """Task-based selection: greedy over the task saliency map."""
    try:
        sal = task_saliency(
            belief, task, n_reference=n_reference, average_jacobians_first=average_jacobians_first
        )
    except DegenerateDistance:
        log.warning("frame %d: degenerate task Jacobian, using variance scores", belief.frame_index)
        action = gig_action(belief, k)
        return LineBudgetAction(action.columns, action.frame_index, "tbig", action.uncertainty, True)
    u = uncertainty(sal).value
    if u == 0:
        log.info("frame %d: task uncertainty is zero", belief.frame_index)
    action = k_greedy_minimization(
        ScoreMap(sal.values, "saliency"), k, frame_index=belief.frame_index + 1, policy_name="tbig"
    )
    return LineBudgetAction(action.columns, action.frame_index, "tbig", u)


def gig_action(belief: Belief, k: int) -> LineBudgetAction:
    """Task-agnostic selection: greedy over the pixel-variance map."""
    variance = ensemble(belief).variance()
    action = k_greedy_minimization(
        ScoreMap(variance, "variance"), k, frame_index=belief.frame_index + 1, policy_name="gig"
    )
    return LineBudgetAction(action.columns, action.frame_index, "gig", float(variance.sum()))


def baseline_action(kind: str, width: int, k: int, frame_index: int, rng_seed: int = 0) -> LineBudgetAction:
    """Non-adaptive lines: equispaced with a per-frame shift, or seeded random."""
    if not 1 <= k <= width:
        raise BudgetExceedsWidth(f"budget k={k} must be between 1 and the width {width}")
    if kind == "uniform_rotating":
        cols = tuple(int((frame_index + (i * width) // k) % width) for i in range(k))
    elif kind == "random":
        rng = np.random.default_rng([rng_seed, frame_index, 0x5A])
        cols = tuple(int(c) for c in rng.choice(width, size=k, replace=False))
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return LineBudgetAction(cols, frame_index, kind)


def select_action(
    policy: str,
    belief: Belief,
    task: Task,
    k: int,
    *,
    rng_seed: int = 0,
    n_reference: int | None = None,
) -> LineBudgetAction:
    """Columns to acquire at frame ``belief.frame_index + 1``."""
    if policy == "tbig":
        return tbig_action(belief, task, k, n_reference=n_reference)
    if policy == "gig":
        return gig_action(belief, k)
    if policy in BASELINE_POLICIES:
        return baseline_action(policy, belief.width, k, belief.frame_index + 1, rng_seed)
    raise ValueError(f"unknown policy {policy!r}")
