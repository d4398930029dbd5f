"""SVG figures: measurement time series, MAE box plots, saliency snapshots."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import mae  # noqa: E402

# Deterministic SVG output: fixed ids and no timestamp.
plt.rcParams["svg.hashsalt"] = "scanline"
plt.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None, "Creator": None}


class PlotInputError(ValueError):
    """An input file is empty or has a row that does not parse."""


def load_frames(path: str | Path) -> dict[str, np.ndarray]:
    """frames.csv columns needed for plotting; names the first bad row on failure."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise PlotInputError(f"{path}: empty file")
        missing = {"frame", "policy", "target", "estimate", "std"} - set(reader.fieldnames)
        if missing:
            raise PlotInputError(f"{path}: header lacks {sorted(missing)}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append(
                    (int(row["frame"]), row["policy"], float(row["target"]), float(row["estimate"]), float(row["std"]))
                )
            except (TypeError, ValueError) as exc:
                raise PlotInputError(f"{path}: line {line_no} does not parse ({exc})") from None
    if not rows:
        raise PlotInputError(f"{path}: no frame rows")
    frame, policy, target, estimate, std = zip(*rows)
    return {
        "frame": np.array(frame),
        "policy": np.array(policy),
        "target": np.array(target),
        "estimate": np.array(estimate),
        "std": np.array(std),
    }


def timeseries(frames_csv: str | Path, out: str | Path, title: str | None = None) -> Path:
    """Target and estimate with a one-std band; MAE over adaptive frames in the legend."""
    d = load_frames(frames_csv)
    skip = int(np.sum(d["policy"] == "full"))
    score = mae(d["target"], d["estimate"], skip) if skip < len(d["frame"]) else math.nan
    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.fill_between(
        d["frame"], d["estimate"] - d["std"], d["estimate"] + d["std"],
        color="tab:orange", alpha=0.25, linewidth=0, gid="std-band", label="estimate ± 1 std",
    )
    ax.plot(d["frame"], d["target"], color="black", lw=1.4, gid="target", label="target")
    ax.plot(d["frame"], d["estimate"], color="tab:orange", lw=1.2, gid="estimate", label="estimate")
    ax.set_xlabel("frame")
    ax.set_ylabel("diameter [px]")
    ax.set_title(title or Path(frames_csv).parent.name)
    ax.text(0.01, 0.97, f"MAE {score:.2f} px", transform=ax.transAxes, va="top", gid="mae-label")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, out)


def mae_box(maes: dict[tuple[str, int, int], float], out: str | Path, policies: Sequence[str] | None = None) -> Path:
    """One box per (policy, budget), budgets grouped left to right."""
    if not maes:
        raise PlotInputError("no MAE values to plot")
    budgets = sorted({b for _, b, _ in maes})
    policies = list(policies or dict.fromkeys(p for p, _, _ in sorted(maes)))
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(budgets) * len(policies) / 2, 3.6))
    colors = plt.get_cmap("tab10")
    width = 0.8 / len(policies)
    for j, pol in enumerate(policies):
        data, pos = [], []
        for i, b in enumerate(budgets):
            vals = [v for (p, bb, _), v in maes.items() if p == pol and bb == b]
            if vals:
                data.append(vals)
                pos.append(i + (j - (len(policies) - 1) / 2) * width)
        if not data:
            continue
        bp = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True, showfliers=True)
        for box in bp["boxes"]:
            box.set_facecolor(colors(j))
            box.set_alpha(0.6)
            box.set_gid(f"box-{pol}")
        ax.plot([], [], color=colors(j), lw=6, alpha=0.6, label=pol)
    ax.set_xticks(range(len(budgets)))
    ax.set_xticklabels([f"k={b}" for b in budgets])
    ax.set_ylabel("MAE [px]")
    ax.legend(fontsize=8)
    return _save(fig, out)


def load_mae_csv(path: str | Path) -> dict[tuple[str, int, int], float]:
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[(row["policy"], int(row["budget"]), int(row["seed"]))] = float(row["mae"])
            except (KeyError, TypeError, ValueError) as exc:
                raise PlotInputError(f"{path}: line {line_no} does not parse ({exc})") from None
    if not out:
        raise PlotInputError(f"{path}: no MAE rows")
    return out


def write_saliency(path: str | Path, values: np.ndarray, columns: Sequence[int], frame_index: int, kind: str) -> None:
    header = f"frame={frame_index} kind={kind} columns={','.join(map(str, columns))}"
    np.savetxt(path, values, fmt="%.9g", delimiter=",", header=header)


def read_saliency(path: str | Path) -> tuple[np.ndarray, list[int], int, str]:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise PlotInputError(f"{path}: line 1 is not a saliency header")
    meta = dict(tok.split("=", 1) for tok in first[1:].split())
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise PlotInputError(f"{path}: {exc}") from None
    cols = [int(c) for c in meta.get("columns", "").split(",") if c]
    return values, cols, int(meta.get("frame", -1)), meta.get("kind", "saliency")


def saliency(path: str | Path, out: str | Path) -> Path:
    """Heat image of a dumped score map with the selected columns outlined."""
    values, cols, frame, kind = read_saliency(path)
    fig, ax = plt.subplots(figsize=(6, 3.3))
    im = ax.imshow(values, cmap="magma", aspect="auto", interpolation="nearest")
    for c in cols:
        ax.axvline(c, color="cyan", lw=0.8, gid=f"column-{c}")
    ax.set_title(f"{kind}, frame {frame}")
    fig.colorbar(im, ax=ax)
    return _save(fig, out)


def _save(fig, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return out
