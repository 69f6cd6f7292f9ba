"""Volume-level metrics, threshold selection and patient-level bootstrap tests."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .rng import stream

THRESHOLD_GRID = np.round(np.arange(101) * 0.01, 2)
P_SENTINEL = "<0.01"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError(f"negative confusion count in {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    @classmethod
    def zero(cls) -> "ConfusionCounts":
        return cls(0, 0, 0, 0)


def dice(counts: ConfusionCounts) -> float:
    """``2 TP / (FP + FN + 2 TP)``; two empty masks count as perfect agreement (1.0)."""
    denom = counts.fp + counts.fn + 2 * counts.tp
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def dice_is_degenerate(counts: ConfusionCounts) -> bool:
    return counts.tp == counts.fp == counts.fn == 0


def confusion_counts(prediction: np.ndarray, reference: np.ndarray, brain_mask: np.ndarray) -> ConfusionCounts:
    """Voxel counts restricted to the brain mask."""
    prediction, reference, brain_mask = (np.asarray(a) for a in (prediction, reference, brain_mask))
    if not (prediction.shape == reference.shape == brain_mask.shape):
        raise ValidationError(
            f"dims differ: prediction {prediction.shape}, reference {reference.shape}, mask {brain_mask.shape}")
    inside = brain_mask.astype(bool)
    p = prediction.astype(bool)[inside]
    r = reference.astype(bool)[inside]
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def pooled(counts: Sequence[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts.zero()
    for c in counts:
        total = total + c
    return total


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    """Operating points ordered by increasing threshold; a point predicts ``score >= threshold``."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    az: float

    def rows(self):
        return zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist())


def roc_and_az(scores, labels) -> RocCurve:
    """ROC over every distinct score; Az by the trapezoid rule.

    Ties between a positive and a negative score contribute one half, so Az
    equals P(score+ > score-) + P(tie)/2.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    l = labels[order]
    # last index of each run of equal scores (descending)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(l)[last]
    fp = np.cumsum(~l)[last]
    tpr_desc = np.r_[0.0, tp / n_pos]
    fpr_desc = np.r_[0.0, fp / n_neg]
    thr_desc = np.r_[np.inf, s[last]]
    az = float(np.sum((fpr_desc[1:] - fpr_desc[:-1]) * (tpr_desc[1:] + tpr_desc[:-1]) / 2))
    return RocCurve(thr_desc[::-1].copy(), tpr_desc[::-1].copy(), fpr_desc[::-1].copy(), az)


def pairwise_az(scores, labels) -> float:
    """Brute-force P(score+ > score-) + P(tie)/2 over all pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("pairwise Az needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# ---------------------------------------------------------------------------
# thresholds


def counts_over_grid(prob: np.ndarray, reference: np.ndarray, brain_mask: np.ndarray,
                     grid: np.ndarray = THRESHOLD_GRID) -> List[ConfusionCounts]:
    """Confusion counts for ``prob > t`` at every grid threshold."""
    inside = brain_mask.astype(bool)
    p = np.asarray(prob, dtype=np.float64)[inside]
    r = reference.astype(bool)[inside]
    pos = np.sort(p[r])
    neg = np.sort(p[~r])
    # number of entries strictly greater than t
    tp = pos.size - np.searchsorted(pos, grid, side="right")
    fp = neg.size - np.searchsorted(neg, grid, side="right")
    fn = pos.size - tp
    tn = neg.size - fp
    return [ConfusionCounts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, fn, tn)]


@dataclass
class ThresholdResult:
    threshold: float
    dice: float
    grid: np.ndarray
    pooled_dice: np.ndarray
    mean_case_dice: np.ndarray


def optimal_threshold(probs: Sequence[np.ndarray], references: Sequence[np.ndarray],
                      brain_masks: Sequence[np.ndarray], grid: np.ndarray = THRESHOLD_GRID) -> ThresholdResult:
    """Grid threshold maximising Dice of counts pooled over cases; ties go to the smallest t."""
    if not probs:
        raise ValidationError("optimal_threshold needs at least one case")
    per_case = [counts_over_grid(p, r, m, grid) for p, r, m in zip(probs, references, brain_masks)]
    pooled_dice = np.array([dice(pooled([c[i] for c in per_case])) for i in range(len(grid))])
    mean_case = np.array([np.mean([dice(c[i]) for c in per_case]) for i in range(len(grid))])
    best = int(np.argmax(pooled_dice))  # first maximum = smallest threshold
    return ThresholdResult(float(grid[best]), float(pooled_dice[best]), grid, pooled_dice, mean_case)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    replicates: int
    dice_a: np.ndarray
    dice_b: np.ndarray
    b_greater: int
    ties: int
    p_value: Union[float, str]
    seed: int

    def as_dict(self) -> Dict:
        return {
            "replicates": self.replicates,
            "p_value": self.p_value,
            "b_greater": self.b_greater,
            "ties": self.ties,
            "tie_rule": "ties count one half",
            "seed": self.seed,
            "dice_a": [float(v) for v in self.dice_a],
            "dice_b": [float(v) for v in self.dice_b],
        }


def bootstrap_compare(counts_a: Sequence[ConfusionCounts], counts_b: Sequence[ConfusionCounts],
                      replicates: int = 100, seed: int = 0,
                      case_ids_a: Optional[Sequence[str]] = None,
                      case_ids_b: Optional[Sequence[str]] = None) -> BootstrapResult:
    """Patient-level paired bootstrap of pooled Dice.

    ``p = (#{Dice_B > Dice_A} + #{ties}/2) / replicates``, testing the null
    hypothesis that method A is no better than B. A zero numerator is reported
    as ``"<0.01"``.
    """
    if case_ids_a is not None and case_ids_b is not None and list(case_ids_a) != list(case_ids_b):
        raise ValidationError("methods A and B were evaluated on different case lists")
    if len(counts_a) != len(counts_b):
        raise ValidationError(f"case lists differ in length: {len(counts_a)} vs {len(counts_b)}")
    n = len(counts_a)
    if n < 2:
        raise ValidationError("bootstrap needs at least two cases")
    if replicates < 1:
        raise ValidationError("need at least one bootstrap replicate")
    arr_a = np.array([[c.tp, c.fp, c.fn, c.tn] for c in counts_a], dtype=np.int64)
    arr_b = np.array([[c.tp, c.fp, c.fn, c.tn] for c in counts_b], dtype=np.int64)
    da = np.empty(replicates)
    db = np.empty(replicates)
    for r in range(replicates):
        idx = stream(seed, "bootstrap", r).integers(0, n, size=n)
        da[r] = dice(ConfusionCounts(*(int(v) for v in arr_a[idx].sum(axis=0))))
        db[r] = dice(ConfusionCounts(*(int(v) for v in arr_b[idx].sum(axis=0))))
    greater = int(np.sum(db > da))
    ties = int(np.sum(db == da))
    numerator = greater + 0.5 * ties
    p: Union[float, str] = P_SENTINEL if numerator == 0 else float(numerator / replicates)
    return BootstrapResult(replicates, da, db, greater, ties, p, seed)


def p_at_most(p: Union[float, str], level: float) -> bool:
    """Whether a p-value (possibly the ``<0.01`` sentinel) is at most ``level``."""
    if p == P_SENTINEL:
        return level >= 0.01
    return float(p) <= level


# ---------------------------------------------------------------------------
# dataset-size ablation


def nested_subsets(case_ids: Sequence[str], fractions: Sequence[float], seed: int = 0) -> Dict[float, List[str]]:
    """Nested training subsets: one seeded ordering, each fraction takes a prefix."""
    if not case_ids:
        raise ValidationError("no training cases to subsample")
    order = stream(seed, "ablation-subsets").permutation(len(case_ids))
    ranked = [sorted(case_ids)[i] for i in order]
    out = {}
    for f in fractions:
        if not 0 < f <= 1:
            raise ValidationError(f"fraction {f} outside (0, 1]")
        k = int(np.floor(f * len(ranked) + 1e-9))
        if k == 0:
            raise ValidationError(f"fraction {f} of {len(ranked)} training cases selects no case")
        out[f] = sorted(ranked[:k])
    return out


def monotonicity_report(rows: Sequence[Tuple[float, float]]) -> Dict:
    """Check Dice against training fraction (rows of (fraction, dice))."""
    ordered = sorted(rows)
    drops = [(a[0], b[0], b[1] - a[1]) for a, b in zip(ordered, ordered[1:]) if b[1] < a[1]]
    return {
        "fractions": [r[0] for r in ordered],
        "dice": [r[1] for r in ordered],
        "monotone_non_decreasing": not drops,
        "drops": [{"from": a, "to": b, "change": d} for a, b, d in drops],
    }
