"""Command-line entry point: ``locseg <subcommand> [flags]``.

Every flag can also come from ``--config FILE`` (JSON object keyed by flag
name, dashes or underscores); explicit command-line values win. A run manifest
(``run.json``) written by a previous invocation is itself a valid config file.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import LocsegError, ValidationError

# ---------------------------------------------------------------------------
# flag table


@dataclass(frozen=True)
class Flag:
    name: str
    help: str
    type: Optional[Callable] = None
    default: Any = None
    nargs: Any = None
    choices: Optional[Sequence[str]] = None
    required: bool = False
    switch: bool = False  # store_true
    existing: bool = False  # must name an existing path

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _conv_stack(text) -> tuple:
    """``"20x7,40x5"`` (or a list of pairs) -> ((20, 7), (40, 5))."""
    if isinstance(text, (list, tuple)):
        return tuple((int(a), int(b)) for a, b in text)
    try:
        return tuple(tuple(int(v) for v in item.split("x")) for item in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"conv stack must look like 20x7,40x5,... got {text!r}")


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


COMMON = [
    Flag("config", "JSON file whose keys set any flag of this subcommand", str),
    Flag("seed", "seed for every random draw of the subcommand", int, 0),
    Flag("threads", "worker threads (results do not depend on this)", int, 1),
]

NETWORK = [
    Flag("fusion", "patch fusion mode", str, "ss", choices=("ss", "msef", "msiw", "msws")),
    Flag("inject", "location-feature injection point", str, "none", choices=("none", "lcl", "ffcl", "sfcl")),
    Flag("alpha", "scale applied to the location features", float, 1.0),
    Flag("conv-stack", "conv layers as FILTERSxKERNEL,...", _conv_stack, "20x7,40x5,80x3,110x3"),
    Flag("fc-widths", "fully connected widths, last must be 2", _int_list, "300,200,2"),
]

TRAINING = [
    Flag("epochs", "training epochs", int, 30),
    Flag("batch-size", "mini-batch size", int, 128),
    Flag("learning-rate", "RMSPROP step size", float, 1e-3),
    Flag("rho", "RMSPROP decay", float, 0.9),
    Flag("epsilon", "RMSPROP epsilon", float, 1e-8),
    Flag("dropout", "drop probability on fully connected inputs", float, 0.3),
    Flag("precision", "floating point precision", str, "float32", choices=("float32", "float64")),
    Flag("chunk-size", "samples per gradient work item", int, 32),
]

COMMANDS: Dict[str, Dict] = {
    "synth": {
        "help": "generate a synthetic cohort",
        "flags": [
            Flag("out", "output cohort directory", str, required=True),
            Flag("cases", "number of cases", int, 20),
            Flag("dims", "volume size X Y Z", int, [64, 64, 16], nargs=3),
            Flag("voxel-size", "voxel size in mm (x y z)", float, [1.0, 1.0, 5.0], nargs=3),
            Flag("lesions-per-case", "mean lesion blobs per case", float, 10.0),
            Flag("decoy-rate", "decoy blobs per lesion blob", float, 8.0),
            Flag("noise", "Gaussian noise sigma", float, 0.03),
            Flag("split", "train/validation/test fractions", float, [0.8, 0.1, 0.1], nargs=3),
            Flag("no-gates", "skip the separability gates", switch=True),
        ],
    },
    "features": {
        "help": "compute and store the eight location features",
        "flags": [
            Flag("cohort", "cohort directory (with manifest.json)", str, required=True, existing=True),
            Flag("sigma", "in-plane smoothing of the prior map (voxels)", float, 2.0),
        ],
    },
    "train": {
        "help": "train one network and keep the best validation-Az epoch",
        "flags": [
            Flag("cohort", "cohort directory", str, required=True, existing=True),
            Flag("out", "run directory", str, required=True),
            *NETWORK,
            *TRAINING,
            Flag("alpha-sweep", "alphas to try; the best by validation Az is kept", float, None, nargs="+"),
        ],
    },
    "segment": {
        "help": "write probability maps and binary segmentations",
        "flags": [
            Flag("checkpoint", "network checkpoint (.lsnn) or run directory", str, required=True, existing=True),
            Flag("cohort", "cohort directory", str, required=True, existing=True),
            Flag("out", "output directory", str, required=True),
            Flag("split", "which split to segment", str, "test", choices=("train", "validation", "test", "all")),
            Flag("threshold", "binarisation threshold (default: t* from the run's metrics, else 0.5)", float),
            Flag("method", "inference path", str, "auto", choices=("auto", "dense", "sliding")),
        ],
    },
    "eval": {
        "help": "choose t* on validation cases and score the test cases",
        "flags": [
            Flag("run", "run directory holding best.lsnn", str, required=True, existing=True),
            Flag("cohort", "cohort directory", str, required=True, existing=True),
            Flag("out", "output directory (default RUN/eval)", str),
            Flag("method", "inference path", str, "auto", choices=("auto", "dense", "sliding")),
            Flag("no-figures", "skip PNG figures", switch=True),
        ],
    },
    "compare": {
        "help": "patient-level bootstrap test of method A against method B",
        "flags": [
            Flag("method-a", "run (or eval) directory of the method claimed better", str, required=True, existing=True),
            Flag("method-b", "run (or eval) directory of the reference method", str, required=True, existing=True),
            Flag("bootstraps", "bootstrap replicates", int, 100),
            Flag("out", "output directory (default METHOD_A/compare)", str),
        ],
    },
    "table": {
        "help": "collect trained and evaluated runs into one summary table",
        "flags": [
            Flag("runs", "run directories, one row each", str, required=True, nargs="+"),
            Flag("out", "output directory", str, required=True),
        ],
    },
    "ablate": {
        "help": "train and evaluate on nested fractions of the training cases",
        "flags": [
            Flag("cohort", "cohort directory", str, required=True, existing=True),
            Flag("out", "output directory", str, required=True),
            Flag("fractions", "training fractions", float, [1.0, 0.5, 0.25, 0.125, 0.0625], nargs="+"),
            Flag("method", "inference path", str, "auto", choices=("auto", "dense", "sliding")),
            *NETWORK,
            *TRAINING,
        ],
    },
}


def flag_table(command: str) -> List[Flag]:
    return COMMON + COMMANDS[command]["flags"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locseg", description="Location-aware patch CNN lesion segmentation.")
    parser.add_argument("--version", action="version", version=f"locseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, info in COMMANDS.items():
        p = sub.add_parser(name, help=info["help"], description=info["help"],
                           argument_default=argparse.SUPPRESS)
        for f in flag_table(name):
            text = f.help + (f"; one of {', '.join(f.choices)}" if f.choices else "")
            kwargs: Dict[str, Any] = {"help": text + (f" (default: {_show(f.default)})" if f.default is not None
                                                      else "")}
            if f.switch:
                kwargs["action"] = "store_true"
            else:
                kwargs["type"] = f.type
                if f.nargs is not None:
                    kwargs["nargs"] = f.nargs
                if f.choices:
                    kwargs["choices"] = f.choices
                kwargs["metavar"] = f.dest.upper()
            p.add_argument(f"--{f.name}", dest=f.dest, **kwargs)
    return parser


def _show(v) -> str:
    return " ".join(map(str, v)) if isinstance(v, list) else str(v)


class UsageError(Exception):
    pass


def _coerce(flag: Flag, value):
    if flag.switch:
        return bool(value)
    if value is None:
        return None
    if flag.type in (_conv_stack, _int_list):
        return flag.type(value)
    if flag.nargs is not None:
        if not isinstance(value, (list, tuple)):
            value = [value]
        return [flag.type(v) for v in value]
    return flag.type(value)


def resolve(command: str, given: Dict[str, Any]) -> Dict[str, Any]:
    """defaults < config file < command line."""
    table = {f.dest: f for f in flag_table(command)}
    config: Dict[str, Any] = {}
    if given.get("config"):
        path = Path(given["config"])
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})")
        if isinstance(data, dict) and "subcommand" in data and "config" in data:
            data = data["config"]  # a run manifest
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        for key, value in data.items():
            dest = key.replace("-", "_")
            if dest not in table:
                raise UsageError(f"{path}: unknown key {key!r} for {command}")
            if dest != "config":
                config[dest] = value
    merged = {d: f.default for d, f in table.items()}
    merged.update(config)
    merged.update(given)
    for d, f in table.items():
        try:
            merged[d] = _coerce(f, merged[d])
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"--{f.name}: {exc}")
        if f.required and merged[d] is None:
            raise UsageError(f"--{f.name} is required")
        if f.choices and merged[d] is not None and merged[d] not in f.choices:
            raise UsageError(f"--{f.name}: {merged[d]!r} is not one of {list(f.choices)}")
        if f.existing and merged[d] is not None and not Path(merged[d]).exists():
            raise UsageError(f"--{f.name}: no such file or directory: {merged[d]}")
    merged.pop("config", None)
    return merged


# ---------------------------------------------------------------------------
# helpers


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _spec(cfg):
    from .architectures import NetworkSpec

    return NetworkSpec.default_for(cfg["fusion"], cfg["inject"], cfg["alpha"], conv_stack=cfg["conv_stack"],
                                   fc_widths=cfg["fc_widths"], dropout=cfg["dropout"])


def _train_config(cfg):
    from .trainer import TrainConfig

    return TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], rho=cfg["rho"],
                       epsilon=cfg["epsilon"], epochs=cfg["epochs"], dropout=cfg["dropout"], seed=cfg["seed"],
                       precision=cfg["precision"], chunk_size=cfg["chunk_size"], threads=cfg["threads"],
                       alphas=tuple(cfg.get("alpha_sweep") or ()))


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _write_manifest(out: Path, command: str, cfg: Dict, inputs: Dict, outputs: List[str], seconds: float,
                    extra: Optional[Dict] = None) -> None:
    from .experiment import write_json

    manifest = {
        "subcommand": command,
        "config": {k: _jsonable(v) for k, v in cfg.items()},
        "seed": cfg.get("seed"),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": __version__,
        "wall_seconds": round(seconds, 3),
        "normalisation": "per-case min-max over brain-mask voxels",
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    # features writes into the cohort directory, next to the synth manifest
    write_json(manifest, out / ("run.features.json" if command == "features" else "run.json"))


def _checkpoint_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "best.lsnn"
    if not p.exists():
        raise ValidationError(f"missing file: {p}")
    return p


def _metrics_path(path) -> Path:
    p = Path(path)
    for candidate in (p, p / "metrics.json", p / "eval" / "metrics.json"):
        if candidate.is_file():
            return candidate
    raise ValidationError(f"no metrics.json under {p}; run `locseg eval` first")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg) -> Dict:
    from .synth import SynthConfig, generate_cohort

    sc = SynthConfig(cases=cfg["cases"], dims=tuple(cfg["dims"]), voxel_size=tuple(cfg["voxel_size"]),
                     lesions_per_case=cfg["lesions_per_case"], decoy_rate=cfg["decoy_rate"],
                     noise_sigma=cfg["noise"], split=tuple(cfg["split"]), seed=cfg["seed"])
    out = Path(cfg["out"])
    manifest = generate_cohort(sc, out, check_gates=not cfg["no_gates"])
    meta = json.loads((out / "cohort.json").read_text())
    _log(f"wrote {len(manifest.entries)} cases to {out}; gates: {meta.get('gates')}")
    return {"out": out, "inputs": {}, "outputs": ["manifest.json", "cohort.json"]}


def cmd_features(cfg) -> Dict:
    from .location import assemble_location_features, prior_probability_map
    from .volume import CohortManifest, save_location_features

    cohort = Path(cfg["cohort"])
    manifest = CohortManifest.read(cohort)
    train_cases = manifest.load("train")
    if not train_cases:
        raise ValidationError(f"{cohort}: no training cases to build the prior map from")
    prior = prior_probability_map(train_cases, sigma=cfg["sigma"])
    np.ascontiguousarray(prior.values, dtype="<f4").tofile(cohort / "prior.f32")
    for path in manifest.paths():
        from .volume import load_case

        case = load_case(path)
        save_location_features(path, assemble_location_features(case, prior))
    _log(f"location features written for {len(manifest.entries)} cases")
    return {"out": cohort, "inputs": {"cohort": str(cohort)}, "outputs": ["prior.f32"]}


def cmd_train(cfg) -> Dict:
    from .architectures import save_checkpoint
    from .experiment import prepare_cohort, training_sets, write_json
    from .trainer import sweep_alpha, train, write_stats_csv

    out = Path(cfg["out"])
    spec = _spec(cfg)
    tc = _train_config(cfg)
    cohort = prepare_cohort(cfg["cohort"], splits=("train", "validation"))
    train_set, val_set = training_sets(cohort, spec, cfg["seed"])
    _log(f"training {spec.fusion}+{spec.injection}: {len(train_set)} train / {len(val_set)} validation samples")
    extra = {}
    if cfg.get("alpha_sweep"):
        sweep = sweep_alpha(spec, train_set, val_set, tc, log=_log)
        result = sweep.best
        extra["alpha_sweep"] = {"table": [{"alpha": a, "val_az": z} for a, z in sweep.table],
                                "chosen": sweep.best_alpha}
    else:
        result = train(spec, train_set, val_set, tc, log=_log)
    out.mkdir(parents=True, exist_ok=True)
    write_stats_csv(result.stats, out / "stats.csv")
    save_checkpoint(result.network, out / "best.lsnn")
    write_json({"best_epoch": result.best_epoch, "best_val_az": result.best_az,
                "network": json.loads(result.network.spec.to_json()), **extra}, out / "selection.json")
    return {"out": out, "inputs": {"cohort": str(cfg["cohort"])},
            "outputs": ["stats.csv", "best.lsnn", "selection.json"], "extra": extra}


def cmd_segment(cfg) -> Dict:
    from .architectures import load_checkpoint
    from .experiment import prepare_cohort
    from .inference import apply_threshold, save_probability_map, segment

    ckpt = _checkpoint_path(cfg["checkpoint"])
    network = load_checkpoint(ckpt)
    t = cfg["threshold"]
    if t is None:
        try:
            t = json.loads(_metrics_path(ckpt.parent).read_text())["threshold"]
        except ValidationError:
            t = 0.5
    splits = ("train", "validation", "test") if cfg["split"] == "all" else (cfg["split"],)
    cohort = prepare_cohort(cfg["cohort"], splits=splits)
    out = Path(cfg["out"])
    timings = {}
    for split in splits:
        for case in cohort.split(split):
            t0 = time.perf_counter()
            pmap = segment(network, case, cfg["method"], checkpoint_id=ckpt.name)
            d = out / case.case_id
            d.mkdir(parents=True, exist_ok=True)
            save_probability_map(pmap, d / "prob.f32")
            np.ascontiguousarray(apply_threshold(pmap, t).values, dtype=np.uint8).tofile(d / "segmentation.u8")
            timings[case.case_id] = round(time.perf_counter() - t0, 3)
            _log(f"{case.case_id}: {timings[case.case_id]:.2f}s")
    return {"out": out, "inputs": {"checkpoint": str(ckpt), "cohort": str(cfg["cohort"])},
            "outputs": [f"{c}/prob.f32" for c in timings] + [f"{c}/segmentation.u8" for c in timings],
            "extra": {"threshold": t, "seconds_per_case": timings}}


def cmd_eval(cfg) -> Dict:
    from .architectures import load_checkpoint
    from .experiment import evaluate_network, prepare_cohort, write_json, write_roc_csv

    ckpt = _checkpoint_path(cfg["run"])
    out = Path(cfg["out"]) if cfg["out"] else ckpt.parent / "eval"
    network = load_checkpoint(ckpt)
    cohort = prepare_cohort(cfg["cohort"], splits=("validation", "test"))
    ev = evaluate_network(network, cohort, cfg["method"], cfg["threads"], checkpoint_id=ckpt.name)
    out.mkdir(parents=True, exist_ok=True)
    write_json(ev.metrics, out / "metrics.json")
    write_roc_csv(ev.roc, out / "roc.csv")
    outputs = ["metrics.json", "roc.csv"]
    if not cfg["no_figures"]:
        from .report import dice_threshold_figure, roc_figure

        spec = network.spec
        roc_figure(ev.roc, out / "roc.png", label=f"{spec.fusion}+{spec.injection}")
        dice_threshold_figure(ev.threshold_result.grid, ev.threshold_result.pooled_dice,
                              ev.threshold_result.threshold, out / "dice_threshold.png")
        outputs += ["roc.png", "dice_threshold.png"]
    m = ev.metrics
    _log(f"t*={m['threshold']:.2f} test Dice {m['test']['pooled_dice']:.4f} Az {m['test']['az']:.4f}")
    return {"out": out, "inputs": {"checkpoint": str(ckpt), "cohort": str(cfg["cohort"])}, "outputs": outputs}


def cmd_compare(cfg) -> Dict:
    from .evaluation import bootstrap_compare, dice, pooled
    from .experiment import per_case_counts, write_json

    pa, pb = _metrics_path(cfg["method_a"]), _metrics_path(cfg["method_b"])
    ma, mb = json.loads(pa.read_text()), json.loads(pb.read_text())
    ids_a, ca = per_case_counts(ma)
    ids_b, cb = per_case_counts(mb)
    res = bootstrap_compare(ca, cb, cfg["bootstraps"], cfg["seed"], ids_a, ids_b)
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["method_a"]) / "compare"
    out.mkdir(parents=True, exist_ok=True)
    result = {
        "method_a": str(pa), "method_b": str(pb),
        "dice_a": dice(pooled(ca)), "dice_b": dice(pooled(cb)),
        "p_value": res.p_value, "ties": res.ties, "b_greater": res.b_greater,
        "replicates": res.replicates, "seed": res.seed,
        "tie_rule": "p = (#{Dice_B > Dice_A} + ties/2) / B; zero numerator reported as <0.01",
        "bootstrap": res.as_dict(),
    }
    write_json(result, out / "metrics.json")
    from .report import comparison_figure

    comparison_figure(["A", "B"], res.dice_a, res.dice_b, out / "bootstrap.png")
    _log(f"Dice A {result['dice_a']:.4f} vs B {result['dice_b']:.4f}: p = {res.p_value} (ties {res.ties})")
    return {"out": out, "inputs": {"method_a": str(pa), "method_b": str(pb)},
            "outputs": ["metrics.json", "bootstrap.png"]}


def cmd_table(cfg) -> Dict:
    from .experiment import summarize_runs, write_json, write_summary_csv
    from .report import summary_figure

    missing = [r for r in cfg["runs"] if not Path(r).is_dir()]
    if missing:
        raise ValidationError(f"not a run directory: {', '.join(missing)}")
    rows = summarize_runs(cfg["runs"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(rows, out / "summary.csv")
    write_json({"rows": rows}, out / "summary.json")
    summary_figure(rows, out / "summary.png")
    for r in rows:
        _log(f"{r['run']}: val Az {r['val_az']:.4f}, test Dice {r['test_dice']:.4f}")
    return {"out": out, "inputs": {"runs": [str(r) for r in cfg["runs"]]},
            "outputs": ["summary.csv", "summary.json", "summary.png"]}


def cmd_ablate(cfg) -> Dict:
    from .experiment import dataset_size_ablation, prepare_cohort, write_ablation_csv, write_json
    from .report import ablation_figure

    out = Path(cfg["out"])
    cohort = prepare_cohort(cfg["cohort"])
    table = dataset_size_ablation(cohort, _spec(cfg), _train_config(cfg), cfg["fractions"], cfg["method"],
                                  cfg["threads"], log=_log)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(table["rows"], out / "ablation.csv")
    write_json(table, out / "ablation.json")
    ablation_figure(table["rows"], out / "ablation.png")
    return {"out": out, "inputs": {"cohort": str(cfg["cohort"])},
            "outputs": ["ablation.csv", "ablation.json", "ablation.png"]}


HANDLERS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train, "segment": cmd_segment,
            "eval": cmd_eval, "compare": cmd_compare, "table": cmd_table,
            "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    given = {k: v for k, v in vars(args).items() if k != "command"}
    command = args.command
    try:
        cfg = resolve(command, given)
    except UsageError as exc:
        print(f"usage: locseg {command} [flags]  (see locseg {command} --help)", file=sys.stderr)
        print(f"locseg {command}: error: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        info = HANDLERS[command](cfg)
    except LocsegError as exc:
        print(f"locseg {command}: {exc}", file=sys.stderr)
        return 1
    _write_manifest(Path(info["out"]), command, cfg, info["inputs"], info["outputs"],
                    time.perf_counter() - t0, info.get("extra"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
