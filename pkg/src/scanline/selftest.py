"""Quick oracle suites behind ``scanline selftest``.

Each suite returns a ``SuiteResult``; ``run_all`` runs them in order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import phantom
from .perception import pixel_variance, weighted_pixel_variance
from .policy import brute_force_best_subset, k_greedy_minimization
from .saliency import gram_diagonal
from .task import AnchorDistanceTask, jacobian_fd, linear_task, wall_templates

SMALL_HEIGHT, SMALL_WIDTH = 48, 64


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def small_task(dtype=np.float64) -> AnchorDistanceTask:
    """Anchor-distance task sized for the 48x64 grid."""
    top, bottom = wall_templates(wall=3, band=2, width=5)
    return AnchorDistanceTask(top, bottom, dtype=dtype)


def small_renders(n: int, seed: int = 0) -> np.ndarray:
    """``n`` speckled phantom frames on the small grid, one per sequence."""
    return np.stack(
        [
            phantom.simulate_sequence(1, seed + i, height=SMALL_HEIGHT, width=SMALL_WIDTH).frame(0)
            for i in range(n)
        ]
    )


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    scale = np.max(np.abs(reference))
    return float(np.max(np.abs(analytic - reference)) / scale) if scale > 0 else float(np.max(np.abs(analytic)))


def trace_identity(n_cases: int = 200, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        m, p = rng.integers(1, 4), rng.integers(1, 13)
        J = rng.normal(size=(m, p))
        var = rng.uniform(0, 2, size=p)
        lhs = float(np.sum(gram_diagonal(J) * var))
        rhs = float(np.trace(J @ np.diag(var) @ J.T))
        worst = max(worst, abs(lhs - rhs))
    return SuiteResult("trace identity", worst < tol, f"max |diff| {worst:.2e} over {n_cases} cases")


def jacobian_check(
    n_renders: int = 2, seed: int = 0, tol: float = 1e-3, inject: float = 0.0
) -> SuiteResult:
    """Analytic gradients against central differences; ``inject`` perturbs the analytic side."""
    task = small_task()
    worst = 0.0
    for x in small_renders(n_renders, seed):
        J = task.gradients(x[None])[0]
        if inject:
            J = J.copy()
            J.flat[int(np.argmax(np.abs(J)))] += inject * np.max(np.abs(J))
        worst = max(worst, relative_error(J, jacobian_fd(task, x).matrix))
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 6 * 5))
    lin = linear_task(A)
    x = rng.normal(size=(6, 5))
    lin_err = float(np.max(np.abs(lin.gradients(x[None])[0] - jacobian_fd(lin, x).matrix)))
    lin_exact = float(np.max(np.abs(lin.gradients(x[None])[0] - A)))
    ok = worst < tol and lin_exact == 0.0 and lin_err < 1e-9
    return SuiteResult(
        "jacobian vs finite differences",
        ok,
        f"anchor task rel err {worst:.2e} on {n_renders} renders; linear exact {lin_exact:.1e}, fd {lin_err:.1e}",
    )


def greedy_check(n_maps: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_maps):
        width = int(rng.integers(1, 13))
        k = int(rng.integers(1, min(4, width) + 1))
        score = rng.uniform(size=(int(rng.integers(1, 5)), width))
        got = sorted(k_greedy_minimization(score, k).columns)
        best = sorted(brute_force_best_subset(score.sum(axis=0), k))
        bad += got != best
    return SuiteResult("greedy vs brute force", bad == 0, f"{bad} mismatches over {n_maps} maps")


def variance_check(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 5, 7))
    two = float(np.max(np.abs(pixel_variance([a, b]) - (a - b) ** 2 / 2)))
    imgs = rng.normal(size=(4, 5, 7))
    counts = np.array([3, 1, 2, 4])
    weighted = float(
        np.max(np.abs(weighted_pixel_variance(imgs, counts) - pixel_variance(np.repeat(imgs, counts, axis=0))))
    )
    ok = two < 1e-12 and weighted < 1e-12
    return SuiteResult("pixel variance", ok, f"two-sample {two:.1e}, counted {weighted:.1e}")


def run_all(inject_jacobian_error: float = 0.0) -> list[SuiteResult]:
    suites: list[Callable[[], SuiteResult]] = [
        trace_identity,
        lambda: jacobian_check(inject=inject_jacobian_error),
        greedy_check,
        variance_check,
    ]
    results = []
    for suite in suites:
        t0 = time.perf_counter()
        res = suite()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
