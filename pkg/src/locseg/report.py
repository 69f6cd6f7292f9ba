"""PNG figures for evaluation and ablation outputs (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def roc_figure(roc, path, label: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(roc.fpr, roc.tpr, lw=1.5, label=f"{label} Az={roc.az:.3f}".strip())
    ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def dice_threshold_figure(grid, pooled_dice, threshold: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, pooled_dice, lw=1.5)
    ax.axvline(threshold, ls="--", color="grey", lw=1)
    ax.set_xlabel("threshold")
    ax.set_ylabel("validation Dice (pooled)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(f"t* = {threshold:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def ablation_figure(rows: Sequence[Dict], path) -> Path:
    rows = sorted(rows, key=lambda r: r["fraction"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([100 * r["fraction"] for r in rows], [r["test_dice"] for r in rows], marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training cases used (%)")
    ax.set_ylabel("test Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def comparison_figure(names: Sequence[str], dice_a, dice_b, path) -> Path:
    """Scatter of paired bootstrap Dice replicates."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(dice_a, dice_b, s=8)
    lo = min(min(dice_a), min(dice_b))
    hi = max(max(dice_a), max(dice_b))
    ax.plot([lo, hi], [lo, hi], ls=":", color="grey")
    ax.set_xlabel(f"Dice {names[0]}")
    ax.set_ylabel(f"Dice {names[1]}")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def summary_figure(rows: Sequence[Dict], path) -> Path:
    """Test Dice per run as horizontal bars."""
    fig, ax = plt.subplots(figsize=(5, 0.5 + 0.4 * len(rows)))
    names = [r["run"] for r in rows]
    ax.barh(range(len(rows)), [r["test_dice"] for r in rows])
    ax.set_yticks(range(len(rows)), names)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("test Dice (pooled)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)
