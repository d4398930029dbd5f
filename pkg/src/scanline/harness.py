"""Benchmark runner: paired-seed episodes over policies and budgets, MAE summaries.

Every run is persisted as ``<root>/<spec-hash>/<policy>/<budget>/<seed>/frames.csv``
and the summary table can be rebuilt from those files alone.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LengthMismatch
from .loop import LoopConfig, frames_csv, read_frames_csv, run_episode, truth_sequence
from .policy import POLICIES

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05
SUMMARY_HEADER = ("policy", "budget", "n_runs", "median_mae", "iqr_mae", "winrate_vs_gig")
REFERENCE_POLICY = "gig"


def mae(target, estimate, skip: int = 0) -> float:
    """Mean absolute difference, ignoring the first ``skip`` frames."""
    target = np.asarray(target, dtype=float).ravel()
    estimate = np.asarray(estimate, dtype=float).ravel()
    if len(target) != len(estimate):
        raise LengthMismatch(f"target has {len(target)} frames, estimate has {len(estimate)}")
    if len(target) == 0:
        raise LengthMismatch("signals are empty")
    if skip:
        log.debug("MAE excludes the first %d frames", skip)
    if skip >= len(target):
        raise LengthMismatch(f"skip={skip} leaves no frames out of {len(target)}")
    return float(np.mean(np.abs(target[skip:] - estimate[skip:])))


@dataclass(frozen=True)
class BenchmarkSpec:
    budgets: tuple[int, ...] = (1, 3, 5)
    policies: tuple[str, ...] = POLICIES
    n_seeds: int = 50
    n_frames: int = 100
    base_seed: int = 0
    # Frames excluded from MAE; None means the warm-up frames.
    mae_skip: int | None = None
    loop: LoopConfig = field(default_factory=LoopConfig)

    def validate(self) -> "BenchmarkSpec":
        if not self.budgets or not self.policies:
            raise ConfigError("budgets and policies must be non-empty")
        for b in self.budgets:
            if not 1 <= b <= self.loop.width:
                raise ConfigError(f"budget {b} outside [1, width={self.loop.width}]")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        self.config_for(self.policies[0], self.budgets[0], self.base_seed).validate()
        if self.skip >= self.n_frames:
            raise ConfigError("MAE window is empty")
        return self

    @property
    def skip(self) -> int:
        return self.loop.init_full_frames if self.mae_skip is None else self.mae_skip

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_seeds)]

    def config_for(self, policy: str, budget: int, seed: int) -> LoopConfig:
        return self.loop.replace(policy=policy, budget_k=budget, n_frames=self.n_frames, rng_seed=seed)

    def to_text(self) -> str:
        """Flat ``key: value`` lines; everything needed to redo the runs."""
        lines = [
            f"budgets: {','.join(map(str, self.budgets))}",
            f"policies: {','.join(self.policies)}",
            f"n_seeds: {self.n_seeds}",
            f"n_frames: {self.n_frames}",
            f"base_seed: {self.base_seed}",
            f"mae_skip: {self.skip}",
        ]
        for f in fields(self.loop):
            if f.name in ("policy", "budget_k", "n_frames", "rng_seed", "record_timing"):
                continue
            lines.append(f"loop.{f.name}: {getattr(self.loop, f.name)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


@dataclass
class BenchmarkResult:
    spec: BenchmarkSpec
    maes: dict[tuple[str, int, int], float]
    missing: list[tuple[str, int, int]] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def n_expected(self) -> int:
        return len(self.spec.policies) * len(self.spec.budgets) * self.spec.n_seeds

    @property
    def failure_rate(self) -> float:
        return len(self.missing) / self.n_expected

    @property
    def ok(self) -> bool:
        return self.failure_rate <= MAX_FAILURE_RATE

    def values(self, policy: str, budget: int) -> np.ndarray:
        return np.array(
            [self.maes[(policy, budget, s)] for s in self.spec.seeds if (policy, budget, s) in self.maes]
        )

    def median(self, policy: str, budget: int) -> float:
        v = self.values(policy, budget)
        return float(np.median(v)) if len(v) else float("nan")

    def iqr(self, policy: str, budget: int) -> float:
        v = self.values(policy, budget)
        if not len(v):
            return float("nan")
        q1, q3 = np.percentile(v, [25, 75])
        return float(q3 - q1)

    def winrate(self, policy: str, budget: int, reference: str = REFERENCE_POLICY) -> float:
        """Fraction of paired seeds where ``policy`` has strictly lower MAE."""
        pairs = [
            (self.maes[(policy, budget, s)], self.maes[(reference, budget, s)])
            for s in self.spec.seeds
            if (policy, budget, s) in self.maes and (reference, budget, s) in self.maes
        ]
        if not pairs:
            return float("nan")
        return float(np.mean([a < b for a, b in pairs]))

    def summary_rows(self) -> list[tuple]:
        rows = []
        for p in self.spec.policies:
            for b in self.spec.budgets:
                rows.append((p, b, len(self.values(p, b)), self.median(p, b), self.iqr(p, b), self.winrate(p, b)))
        return rows

    def summary_csv(self) -> str:
        out = [",".join(SUMMARY_HEADER)]
        for p, b, n, med, iqr, wr in self.summary_rows():
            out.append(f"{p},{b},{n},{med!r},{iqr!r},{wr!r}")
        return "\n".join(out) + "\n"

    def mae_csv(self) -> str:
        out = ["policy,budget,seed,mae"]
        for (p, b, s) in sorted(self.maes):
            out.append(f"{p},{b},{s},{self.maes[(p, b, s)]!r}")
        return "\n".join(out) + "\n"


def default_runs_root() -> Path:
    return Path(os.environ.get("SCANLINE_RUNS_DIR", "runs"))


def run_path(root: Path, policy: str, budget: int, seed: int) -> Path:
    return root / policy / str(budget) / str(seed) / "frames.csv"


def _episode(args) -> tuple[tuple[str, int, int], str | None, str, str | None]:
    """Worker: run one episode, return its CSV text (or the error) and the truth digest."""
    config, key = args
    seed = key[2]
    digest = truth_sequence(config, seed).digest()
    try:
        records = run_episode(config, seed)
    except Exception as exc:  # recorded as a missing run
        return key, None, digest, f"{type(exc).__name__}: {exc}"
    return key, frames_csv(records, config.budget_k), digest, None


def _mae_from_csv(path: Path, skip: int) -> float:
    data = read_frames_csv(path)
    return mae(data["target"], data["estimate"], skip)


def run_benchmark(
    spec: BenchmarkSpec,
    root: str | Path | None = None,
    *,
    workers: int | None = None,
    resume: bool = True,
) -> BenchmarkResult:
    """Run every (policy, budget, seed) episode and write the result tables.

    Runs whose frames.csv already exists are reused when ``resume`` is set.
    The same phantom seed is used for every policy and budget, and the
    sequences are checked to be identical.
    """
    spec.validate()
    root = Path(root) if root is not None else default_runs_root()
    run_dir = root / spec.digest()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "spec.txt").write_text(spec.to_text())

    keys = sorted((p, b, s) for p in spec.policies for b in spec.budgets for s in spec.seeds)
    todo = [k for k in keys if not (resume and run_path(run_dir, *k).exists())]
    jobs = [(spec.config_for(*k), k) for k in todo]
    workers = workers or os.cpu_count() or 1
    log.info("benchmark %s: %d runs, %d to do, %d workers", spec.digest(), len(keys), len(todo), workers)

    digests: dict[int, str] = {}
    errors: dict[tuple, str] = {}

    def store(outcomes):
        # Each run is written as soon as it finishes, so an interrupted benchmark resumes.
        for key, text, digest, err in outcomes:
            seed = key[2]
            if digests.setdefault(seed, digest) != digest:
                raise AssertionError(f"seed {seed}: phantom sequence differs between runs")
            if err is not None:
                errors[key] = err
                log.error("run %s failed: %s", key, err)
                continue
            path = run_path(run_dir, *key)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            store(pool.map(_episode, jobs))
    else:
        store(map(_episode, jobs))

    maes, missing = {}, []
    for key in keys:
        path = run_path(run_dir, *key)
        if key in errors or not path.exists():
            missing.append(key)
            continue
        maes[key] = _mae_from_csv(path, spec.skip)
    result = BenchmarkResult(spec, maes, missing, run_dir)
    (run_dir / "summary.csv").write_text(result.summary_csv())
    (run_dir / "mae.csv").write_text(result.mae_csv())
    if errors:
        (run_dir / "failures.txt").write_text("".join(f"{k}: {v}\n" for k, v in sorted(errors.items())))
    if not result.ok:
        log.error("%.1f%% of runs failed", 100 * result.failure_rate)
    return result


def summary_from_runs(run_dir: str | Path, spec: BenchmarkSpec) -> BenchmarkResult:
    """Rebuild the result from the persisted frames.csv files."""
    run_dir = Path(run_dir)
    maes, missing = {}, []
    for p in spec.policies:
        for b in spec.budgets:
            for s in spec.seeds:
                path = run_path(run_dir, p, b, s)
                if path.exists():
                    maes[(p, b, s)] = _mae_from_csv(path, spec.skip)
                else:
                    missing.append((p, b, s))
    return BenchmarkResult(spec, maes, missing, run_dir)


def read_summary_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["budget"] = int(r["budget"])
        r["n_runs"] = int(r["n_runs"])
        for k in ("median_mae", "iqr_mae", "winrate_vs_gig"):
            r[k] = float(r[k])
    return rows


def read_mae_csv(path: str | Path) -> dict[tuple[str, int, int], float]:
    with open(path, newline="") as fh:
        return {(r["policy"], int(r["budget"]), int(r["seed"])): float(r["mae"]) for r in csv.DictReader(fh)}


def iter_frame_files(run_dir: str | Path) -> Iterable[Path]:
    return sorted(Path(run_dir).glob("*/*/*/frames.csv"))


def check_budget_compliance(path: str | Path, budget: int, width: int) -> bool:
    """Every adaptive row of a frames.csv lists exactly ``budget`` distinct in-range columns."""
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["policy"] == "full":
                continue
            cols = [row.get(f"col_{i + 1}", "") for i in range(budget)]
            if any(c == "" for c in cols) or int(row["k"]) != budget:
                return False
            ints = [int(c) for c in cols]
            if len(set(ints)) != budget or min(ints) < 0 or max(ints) >= width:
                return False
            if f"col_{budget + 1}" in row:
                return False
    return True


def format_summary(result: BenchmarkResult, columns: Sequence[str] = SUMMARY_HEADER) -> str:
    """Human-readable summary table."""
    lines = ["{:<18}{:>7}{:>7}{:>12}{:>10}{:>16}".format(*columns)]
    for p, b, n, med, iqr, wr in result.summary_rows():
        lines.append(f"{p:<18}{b:>7}{n:>7}{med:>12.3f}{iqr:>10.3f}{wr:>16.2f}")
    return "\n".join(lines)
