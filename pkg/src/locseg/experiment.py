"""End-to-end pipeline pieces shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .architectures import Network, NetworkSpec, load_checkpoint
from .errors import ValidationError
from .evaluation import (ConfusionCounts, confusion_counts, dice, dice_is_degenerate, nested_subsets,
                         optimal_threshold, pooled, roc_and_az, monotonicity_report)
from .inference import ProbabilityMap, apply_threshold, segment
from .location import ensure_location_features, prior_probability_map
from .patches import build_balanced_dataset
from .trainer import TrainConfig, TrainResult, train
from .volume import SPLITS, CaseRecord, CohortManifest, Volume, normalized_case

PRIOR_FILE = "prior.f32"


@dataclass
class PreparedCohort:
    """Normalised cases with location features, by split."""

    manifest: CohortManifest
    cases: Dict[str, List[CaseRecord]]

    def split(self, name: str) -> List[CaseRecord]:
        return self.cases.get(name, [])


def load_prior(cohort_dir, like: Volume) -> Optional[Volume]:
    path = Path(cohort_dir) / PRIOR_FILE
    if not path.exists():
        return None
    data = np.fromfile(path, dtype="<f4")
    if data.size != like.values.size:
        raise ValidationError(f"{path}: prior grid does not match the cases")
    return Volume(data.reshape(like.shape), like.voxel_size)


def prepare_cohort(cohort_dir, splits: Sequence[str] = SPLITS) -> PreparedCohort:
    """Load a cohort, attach location features and normalise intensities.

    Features stored beside the cases are used as is; otherwise they are
    computed with a prior map built from the training split.
    """
    manifest = CohortManifest.read(cohort_dir)
    raw = {s: manifest.load(s) for s in SPLITS if s in splits or s == "train"}
    if not raw.get("train"):
        raise ValidationError(f"{cohort_dir}: cohort has no training cases")
    prior = None
    if any(c.location_features is None for cases in raw.values() for c in cases):
        prior = load_prior(manifest.root, raw["train"][0].brain_mask) or prior_probability_map(raw["train"])
    cases = {s: [normalized_case(ensure_location_features(c, prior)) for c in raw[s]] for s in splits if s in raw}
    return PreparedCohort(manifest, cases)


def training_sets(cohort: PreparedCohort, spec: NetworkSpec, seed: int, train_ids: Optional[Sequence[str]] = None):
    train_cases = cohort.split("train")
    if train_ids is not None:
        wanted = set(train_ids)
        train_cases = [c for c in train_cases if c.case_id in wanted]
    return (build_balanced_dataset(train_cases, "train", seed, scales=spec.scales),
            build_balanced_dataset(cohort.split("validation"), "validation", seed, scales=spec.scales))


def segment_cases(network: Network, cases: Sequence[CaseRecord], method: str = "auto", threads: int = 1,
                  checkpoint_id: str = "") -> List[ProbabilityMap]:
    """Probability maps in case order; cases run in parallel when ``threads > 1``."""
    def one(case):
        return segment(network, case, method=method, checkpoint_id=checkpoint_id)

    if threads > 1 and len(cases) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def _case_rows(cases, maps, t) -> List[Dict]:
    rows = []
    for case, pmap in zip(cases, maps):
        counts = confusion_counts(apply_threshold(pmap, t).values, case.annotation.values, case.brain_mask.values)
        rows.append({"case_id": case.case_id, **counts.as_dict(), "dice": dice(counts),
                     "empty_masks": dice_is_degenerate(counts)})
    return rows


def _pooled_summary(rows) -> Dict:
    counts = pooled([ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"]) for r in rows])
    return {"pooled_dice": dice(counts), "mean_case_dice": float(np.mean([r["dice"] for r in rows])),
            "counts": counts.as_dict()}


def voxel_scores(cases, maps):
    scores = np.concatenate([m.values[c.brain_mask.values == 1] for c, m in zip(cases, maps)])
    labels = np.concatenate([c.annotation.values[c.brain_mask.values == 1] for c, m in zip(cases, maps)])
    return scores, labels


@dataclass
class Evaluation:
    metrics: Dict
    roc: object
    threshold_result: object


def evaluate_network(network: Network, cohort: PreparedCohort, method: str = "auto", threads: int = 1,
                     checkpoint_id: str = "") -> Evaluation:
    """Pick t* on the validation cases, then score the test cases at t*."""
    val = cohort.split("validation")
    test = cohort.split("test")
    if not val or not test:
        raise ValidationError("evaluation needs validation and test cases")
    val_maps = segment_cases(network, val, method, threads, checkpoint_id)
    th = optimal_threshold([m.values for m in val_maps], [c.annotation.values for c in val],
                           [c.brain_mask.values for c in val])
    test_maps = segment_cases(network, test, method, threads, checkpoint_id)
    test_rows = _case_rows(test, test_maps, th.threshold)
    scores, labels = voxel_scores(test, test_maps)
    roc = roc_and_az(scores, labels)
    metrics = {
        "network": json.loads(network.spec.to_json()),
        "threshold": th.threshold,
        "threshold_rule": "grid 0.00..1.00 step 0.01, pooled validation Dice, ties to smallest",
        "validation": {"pooled_dice": th.dice, "mean_case_dice": float(th.mean_case_dice[
            int(np.argmax(th.pooled_dice))])},
        "test": {**_pooled_summary(test_rows), "az": roc.az, "cases": test_rows},
        "dice_curve": {"threshold": [float(t) for t in th.grid], "validation_pooled_dice":
                       [float(d) for d in th.pooled_dice]},
    }
    return Evaluation(metrics, roc, th)


def write_roc_csv(roc, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in roc.rows():
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def per_case_counts(metrics: Dict):
    rows = metrics["test"]["cases"]
    return [r["case_id"] for r in rows], [ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"]) for r in rows]


# ---------------------------------------------------------------------------
# dataset-size ablation


def dataset_size_ablation(cohort: PreparedCohort, spec: NetworkSpec, config: TrainConfig,
                          fractions: Sequence[float] = (1.0, 0.5, 0.25, 0.125, 0.0625),
                          method: str = "auto", threads: int = 1, log: Optional[Callable] = None) -> Dict:
    """One train + evaluate per nested fraction of the training cases."""
    ids = [c.case_id for c in cohort.split("train")]
    subsets = nested_subsets(ids, fractions, config.seed)
    rows = []
    for f in sorted(fractions, reverse=True):
        train_set, val_set = training_sets(cohort, spec, config.seed, subsets[f])
        result = train(spec, train_set, val_set, config, log=log)
        ev = evaluate_network(result.network, cohort, method, threads)
        rows.append({"fraction": float(f), "cases": len(subsets[f]), "samples": len(train_set),
                     "val_az": result.best_az, "threshold": ev.metrics["threshold"],
                     "test_dice": ev.metrics["test"]["pooled_dice"]})
        if log:
            log(f"fraction {f}: {len(subsets[f])} cases, test Dice {rows[-1]['test_dice']:.4f}")
    report = monotonicity_report([(r["fraction"], r["test_dice"]) for r in rows])
    return {"rows": rows, "subsets": {str(k): v for k, v in subsets.items()}, "monotonicity": report}


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "cases", "samples", "val_az", "threshold", "test_dice"])
        for r in sorted(rows, key=lambda r: r["fraction"]):
            w.writerow([r["fraction"], r["cases"], r["samples"], repr(r["val_az"]), r["threshold"],
                        repr(r["test_dice"])])


# ---------------------------------------------------------------------------
# run summaries

SUMMARY_COLUMNS = ["run", "fusion", "injection", "alpha", "best_epoch", "val_az", "threshold", "test_dice",
                   "test_az"]


def summarize_runs(run_dirs: Sequence) -> List[Dict]:
    """One row per evaluated run directory, in the order given."""
    rows = []
    for d in map(Path, run_dirs):
        metrics_path = d / "eval" / "metrics.json"
        if not metrics_path.is_file() or not (d / "selection.json").is_file():
            raise ValidationError(f"{d}: needs selection.json and eval/metrics.json (train, then eval)")
        sel = json.loads((d / "selection.json").read_text())
        m = json.loads(metrics_path.read_text())
        net = sel["network"]
        rows.append({"run": d.name, "fusion": net["fusion"], "injection": net["injection"],
                     "alpha": net["alpha"] if net["injection"] != "none" else None,
                     "best_epoch": sel["best_epoch"], "val_az": sel["best_val_az"], "threshold": m["threshold"],
                     "test_dice": m["test"]["pooled_dice"], "test_az": m["test"]["az"]})
    return rows


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SUMMARY_COLUMNS])
