"""SVG figures: strategy comparison, sweep curves and reconstruction grids.

Figures are built on bare ``Figure`` objects (no pyplot state), so sweep
workers can render concurrently. Output is byte-stable across runs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .data import NTU_BONES

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",   # keep text as text
    "svg.hashsalt": "skelmae",
    "path.simplify": False,
}
STRATEGY_STYLE = {"random": ("tab:blue", "o"), "fixed_index": ("tab:orange", "s")}


def save_svg(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(RC):
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    return path


def _figure(w: float, h: float) -> Figure:
    with matplotlib.rc_context(RC):
        return Figure(figsize=(w, h))


def strategy_comparison(rows: Sequence[Mapping], path: str | Path, metric: str = "accuracy") -> Path:
    """One line per masking strategy over the (frame ratio, joint ratio) grid."""
    pairs = sorted({(float(r["frame_ratio"]), float(r["joint_ratio"])) for r in rows}, reverse=True)
    with matplotlib.rc_context(RC):
        fig = _figure(6.0, 3.0)
        ax = fig.add_subplot()
        x = np.arange(len(pairs))
        for strategy in sorted({r["strategy"] for r in rows}):
            by_pair = {(float(r["frame_ratio"]), float(r["joint_ratio"])): r.get(metric) for r in rows
                       if r["strategy"] == strategy}
            y = [np.nan if by_pair.get(p) in (None, "") else float(by_pair[p]) for p in pairs]
            colour, marker = STRATEGY_STYLE.get(strategy, ("tab:gray", "^"))
            ax.plot(x, y, marker=marker, color=colour, label=strategy, linewidth=1.2, markersize=4)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{a:g}/{b:g}" for a, b in pairs], rotation=45, ha="right")
        ax.set_xlabel("frame ratio / joint ratio")
        ax.set_ylabel(metric)
        ax.legend(frameon=False)
        return save_svg(fig, path)


def sweep_curve(xs: Sequence, ys: Sequence[float], path: str | Path, xlabel: str, ylabel: str,
                title: str | None = None) -> Path:
    with matplotlib.rc_context(RC):
        fig = _figure(4.0, 3.0)
        ax = fig.add_subplot()
        pos = np.arange(len(xs))
        ax.plot(pos, [np.nan if y is None else y for y in ys], marker="o", color="tab:blue", linewidth=1.2)
        ax.set_xticks(pos)
        ax.set_xticklabels([str(x) for x in xs])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return save_svg(fig, path)


def _draw_pose(ax, pose: np.ndarray, colour: str) -> None:
    """Orthographic x-y view; joints that are NaN (masked) are left out."""
    ok = ~np.isnan(pose).any(axis=1)
    for a, b in NTU_BONES:
        if a < len(pose) and b < len(pose) and ok[a] and ok[b]:
            ax.plot(pose[[a, b], 0], pose[[a, b], 1], color=colour, linewidth=0.8)
    ax.scatter(pose[ok, 0], pose[ok, 1], s=4, color=colour, zorder=3)


def reconstruction_grid(original: np.ndarray, masked: np.ndarray, reconstructed: np.ndarray,
                        frames: Sequence[int], path: str | Path) -> Path:
    """Rows: original, masked (NaN = hidden), reconstructed; one column per frame."""
    frames = list(frames)
    valid = original[frames][~np.isnan(original[frames]).any(axis=-1)]
    lo, hi = valid[:, :2].min(axis=0), valid[:, :2].max(axis=0)
    pad = 0.1 * float(max(hi - lo))
    rows = (("original", original, "black"), ("masked", masked, "tab:red"), ("reconstructed", reconstructed, "tab:blue"))
    with matplotlib.rc_context(RC):
        fig = _figure(1.0 * len(frames), 3.3)
        axes = fig.subplots(3, len(frames), squeeze=False)
        for r, (name, seq, colour) in enumerate(rows):
            for c, f in enumerate(frames):
                ax = axes[r][c]
                _draw_pose(ax, seq[f], colour)
                ax.set_xlim(lo[0] - pad, hi[0] + pad)
                ax.set_ylim(lo[1] - pad, hi[1] + pad)
                ax.set_aspect("equal")
                ax.set_xticks([])
                ax.set_yticks([])
                for side in ax.spines.values():
                    side.set_visible(False)
                if r == 0:
                    ax.set_title(f"t={f}")
                if c == 0:
                    ax.set_ylabel(name)
        return save_svg(fig, path)


def loss_curve(records: Sequence[Mapping], path: str | Path, val_label: str = "validation") -> Path:
    """Train loss and validation metric per epoch from runlog records."""
    epochs = [r["epoch"] for r in records]
    with matplotlib.rc_context(RC):
        fig = _figure(4.5, 3.0)
        ax = fig.add_subplot()
        ax.plot(epochs, [r["train_loss"] for r in records], color="tab:blue", linewidth=1.2, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        twin = ax.twinx()
        twin.plot(epochs, [r["val_metric"] for r in records], color="tab:orange", linewidth=1.2, label=val_label)
        twin.set_ylabel(val_label)
        fig.legend(frameon=False, loc="upper right")
        return save_svg(fig, path)
