"""``scanline`` command line: phantom, episode, bench, plot, selftest.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, phantom, plots, selftest
from .errors import ConfigError, DegenerateDistance
from .harness import BenchmarkSpec, default_runs_root, format_summary, run_benchmark
from .loop import LoopConfig, actions_csv, run_episode, write_frames_csv
from .perception import ensemble
from .policy import POLICIES, task_saliency
from .task import default_task

log = logging.getLogger("scanline")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
LOOP_FIELDS = {f.name: f for f in dataclasses.fields(LoopConfig)}
EPISODE_KEYS = set(LOOP_FIELDS) | {"phantom_seed"}
BENCH_KEYS = {"budgets", "policies", "n_seeds", "n_frames", "base_seed", "mae_skip", "workers"}
BENCH_LOOP_KEYS = set(LOOP_FIELDS) - {"policy", "budget_k", "n_frames", "rng_seed"}


# config parsing


def parse_pairs(lines: Sequence[str], source: str) -> dict[str, str]:
    """``key: value`` or ``key=value`` entries; blank lines and ``#`` comments skipped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        seps = [i for i in (line.find(":"), line.find("=")) if i > 0]
        if not seps:
            raise ConfigError(f"{source}:{n}: expected 'key: value', got {raw.strip()!r}")
        i = min(seps)
        out[line[:i].strip()] = line[i + 1 :].strip()
    return out


def read_config(path: str | Path | None, overrides: Sequence[str]) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        pairs.update(parse_pairs(text.splitlines(), str(path)))
    pairs.update(parse_pairs(overrides, "override"))
    return pairs


def _coerce(key: str, text: str, kind):
    kind = str(kind)
    try:
        if text.lower() == "none" and "None" in kind:
            return None
        if kind.startswith("bool"):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from None


def loop_config(pairs: dict[str, str], allowed: set[str]) -> LoopConfig:
    unknown = sorted(set(pairs) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, LOOP_FIELDS[k].type) for k, v in pairs.items() if k in LOOP_FIELDS}
    return LoopConfig(**values).validate()


def echo_config(config: LoopConfig, extra: dict | None = None) -> str:
    lines = [f"{f}: {getattr(config, f)}" for f in LOOP_FIELDS]
    lines += [f"{k}: {v}" for k, v in (extra or {}).items()]
    return "\n".join(lines) + "\n"


# verbs


def cmd_phantom(args) -> int:
    out = Path(args.out or default_runs_root() / "phantoms" / f"seed_{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    seq = phantom.simulate_sequence(args.frames, args.seed, height=args.height, width=args.width)
    phantom.export_sequence(out / "sequence.txt", seq.frames())
    phantom.export_ground_truth(out / "ground_truth.csv", seq.measurements())
    (out / "config.txt").write_text(
        f"seed: {args.seed}\nframes: {args.frames}\nheight: {args.height}\nwidth: {args.width}\n"
        f"sha256: {seq.digest()}\n"
    )
    print(out)
    return EXIT_OK


def cmd_episode(args) -> int:
    pairs = read_config(args.config, args.overrides)
    for key, flag in (("policy", args.policy), ("budget_k", args.k), ("n_frames", args.frames), ("rng_seed", args.seed)):
        if flag is not None:
            pairs[key] = str(flag)
    phantom_seed = pairs.pop("phantom_seed", None)
    config = loop_config(pairs, EPISODE_KEYS)
    phantom_seed = config.rng_seed if phantom_seed is None else _coerce("phantom_seed", phantom_seed, "int")

    out = Path(args.out or default_runs_root() / "episodes" / f"{config.policy}_k{config.budget_k}_seed{phantom_seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(echo_config(config, {"phantom_seed": phantom_seed}))

    task = default_task(dtype=np.float32)
    dumps = []
    hook = None
    if args.dump_saliency:
        (out / "saliency").mkdir(exist_ok=True)

        def hook(belief, action):
            if config.policy == "tbig":
                try:
                    values, kind = task_saliency(belief, task, n_reference=config.n_reference).values, "saliency"
                except DegenerateDistance:
                    return
            else:
                values, kind = ensemble(belief).variance(), "variance"
            dumps.append((action.frame_index, values, action.columns, kind))

    records = run_episode(config, phantom_seed, task=task, on_select=hook)
    write_frames_csv(out / "frames.csv", records, config.budget_k, record_timing=config.record_timing)
    (out / "actions.csv").write_text(actions_csv([r.action for r in records if r.action.policy_name != "full"], config.budget_k))
    for frame, values, cols, kind in dumps:
        plots.write_saliency(out / "saliency" / f"frame_{frame:04d}.csv", values, cols, frame, kind)
    flagged = sum(r.flagged for r in records)
    if flagged:
        log.warning("%d frames flagged", flagged)
    print(out)
    return EXIT_OK


def bench_spec(pairs: dict[str, str]) -> tuple[BenchmarkSpec, int | None]:
    unknown = sorted(set(pairs) - BENCH_KEYS - BENCH_LOOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    loop = loop_config({k: v for k, v in pairs.items() if k in BENCH_LOOP_KEYS}, BENCH_LOOP_KEYS)
    kw = {}
    if "budgets" in pairs:
        kw["budgets"] = tuple(_coerce("budgets", b, "int") for b in pairs["budgets"].split(","))
    if "policies" in pairs:
        kw["policies"] = tuple(p.strip() for p in pairs["policies"].split(","))
    for key in ("n_seeds", "n_frames", "base_seed"):
        if key in pairs:
            kw[key] = _coerce(key, pairs[key], "int")
    if "mae_skip" in pairs:
        kw["mae_skip"] = _coerce("mae_skip", pairs["mae_skip"], "int | None")
    workers = _coerce("workers", pairs["workers"], "int") if "workers" in pairs else None
    return BenchmarkSpec(loop=loop, **kw).validate(), workers


def cmd_bench(args) -> int:
    pairs = read_config(args.config, args.overrides)
    spec, workers = bench_spec(pairs)
    root = Path(args.out) if args.out else default_runs_root()
    result = run_benchmark(spec, root, workers=workers or args.workers)
    print(format_summary(result))
    print(result.run_dir)
    if not result.ok:
        print(f"{len(result.missing)} of {result.n_expected} runs failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.input)
    if args.kind == "timeseries":
        out = Path(args.out or src.with_suffix(".svg"))
        plots.timeseries(src, out)
    elif args.kind == "mae_box":
        mae_file = src / "mae.csv" if src.is_dir() else src
        out = Path(args.out or mae_file.parent / "mae_box.svg")
        plots.mae_box(plots.load_mae_csv(mae_file), out)
    else:
        out = Path(args.out or src.with_suffix(".svg"))
        plots.saliency(src, out)
    print(out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_all(inject_jacobian_error=args.inject_jacobian_error)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.detail}  ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scanline", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="simulate a phantom sequence and its ground truth")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--frames", type=int, default=100)
    ph.add_argument("--height", type=int, default=phantom.DEFAULT_HEIGHT)
    ph.add_argument("--width", type=int, default=phantom.DEFAULT_WIDTH)
    ph.add_argument("--out")
    ph.set_defaults(func=cmd_phantom)

    ep = sub.add_parser("episode", help="run one perception-action episode")
    ep.add_argument("--policy", choices=POLICIES)
    ep.add_argument("--k", type=int)
    ep.add_argument("--frames", type=int)
    ep.add_argument("--seed", type=int)
    ep.add_argument("--config")
    ep.add_argument("--out")
    ep.add_argument("--dump-saliency", action="store_true")
    ep.add_argument("overrides", nargs="*", metavar="key=value")
    ep.set_defaults(func=cmd_episode)

    be = sub.add_parser("bench", help="run the policy/budget/seed benchmark")
    be.add_argument("--config")
    be.add_argument("--out")
    be.add_argument("--workers", type=int)
    be.add_argument("overrides", nargs="*", metavar="key=value")
    be.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="write an SVG figure")
    pl.add_argument("kind", choices=("timeseries", "mae_box", "saliency"))
    pl.add_argument("input", help="frames.csv, mae.csv (or its run directory), or a saliency dump")
    pl.add_argument("-o", "--out")
    pl.set_defaults(func=cmd_plot)

    st = sub.add_parser("selftest", help="run the oracle suites")
    st.add_argument("--inject-jacobian-error", type=float, default=0.0, help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
