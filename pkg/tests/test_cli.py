import json
import subprocess
import sys

import numpy as np
import pytest

from locseg.cli import COMMANDS, build_parser, flag_table, main
from locseg.volume import CohortManifest

NET = ["--conv-stack", "3x7,4x5,4x3,5x3", "--fc-widths", "6,5,2", "--epochs", "1", "--batch-size", "64"]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "cohort"
    assert main(["synth", "--cases", "8", "--dims", "40", "40", "2", "--seed", "7", "--split", "0.5", "0.25", "0.25",
                 "--out", str(out)]) == 0
    assert main(["features", "--cohort", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def runs(cohort, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for name, extra in (("ss", []), ("ff", ["--inject", "ffcl"])):
        assert main(["train", "--cohort", str(cohort), "--out", str(root / name), *NET, *extra]) == 0
        assert main(["eval", "--run", str(root / name), "--cohort", str(cohort)]) == 0
    return root


def help_text(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_documents_every_flag(cmd, capsys):
    text = help_text(cmd, capsys)
    table = {f"--{f.name}" for f in flag_table(cmd)}
    for flag in table:
        assert flag in text
    # reflection: nothing the parser accepts is missing from the table
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    accepted = {o for a in sub._actions for o in a.option_strings if o.startswith("--")} - {"--help"}
    assert accepted == table


def test_synth_writes_loadable_cohort(cohort):
    manifest = CohortManifest.read(cohort)
    assert len(manifest.load()) == 8
    run = json.loads((cohort / "run.json").read_text())
    assert run["subcommand"] == "synth" and run["seed"] == 7 and run["config"]["cases"] == 8
    assert (cohort / "run.features.json").exists()
    assert all((p / "location" / "feat_7.f32").exists() for p in manifest.paths())


def test_train_and_eval_outputs(runs):
    for name in ("ss", "ff"):
        d = runs / name
        for f in ("best.lsnn", "stats.csv", "selection.json", "run.json", "eval/metrics.json", "eval/roc.csv",
                  "eval/roc.png", "eval/dice_threshold.png"):
            assert (d / f).exists(), f
        m = json.loads((d / "eval" / "metrics.json").read_text())
        assert 0 <= m["threshold"] <= 1 and "pooled_dice" in m["test"] and "mean_case_dice" in m["test"]
    assert json.loads((runs / "ff" / "run.json").read_text())["config"]["inject"] == "ffcl"


def test_compare_reports_p_and_ties(runs):
    assert main(["compare", "--method-a", str(runs / "ff"), "--method-b", str(runs / "ss"), "--bootstraps", "100",
                 "--seed", "3"]) == 0
    m = json.loads((runs / "ff" / "compare" / "metrics.json").read_text())
    assert "p_value" in m and "ties" in m and m["replicates"] == 100
    assert (runs / "ff" / "compare" / "bootstrap.png").exists()
    assert main(["compare", "--method-a", str(runs / "ss"), "--method-b", str(runs / "ss")]) == 0
    same = json.loads((runs / "ss" / "compare" / "metrics.json").read_text())
    assert same["p_value"] == 0.5 and same["ties"] == 100


def test_table_collects_runs(runs, tmp_path):
    out = tmp_path / "table"
    assert main(["table", "--runs", str(runs / "ss"), str(runs / "ff"), "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("run,fusion,injection,alpha") and len(lines) == 3
    rows = json.loads((out / "summary.json").read_text())["rows"]
    assert [r["injection"] for r in rows] == ["none", "ffcl"] and rows[0]["alpha"] is None
    ff = json.loads((runs / "ff" / "eval" / "metrics.json").read_text())
    assert rows[1]["test_dice"] == ff["test"]["pooled_dice"]
    assert (out / "summary.png").exists()
    assert main(["table", "--runs", str(tmp_path), "--out", str(out)]) == 1


def test_segment_writes_maps(runs, cohort, tmp_path):
    out = tmp_path / "seg"
    assert main(["segment", "--checkpoint", str(runs / "ss"), "--cohort", str(cohort), "--out", str(out)]) == 0
    t = json.loads((runs / "ss" / "eval" / "metrics.json").read_text())["threshold"]
    run = json.loads((out / "run.json").read_text())
    assert run["threshold"] == t
    test_ids = [p.name for p in CohortManifest.read(cohort).paths("test")]
    for cid in test_ids:
        prob = np.fromfile(out / cid / "prob.f32", "<f4")
        seg = np.fromfile(out / cid / "segmentation.u8", np.uint8)
        assert np.array_equal(seg, (prob > t).astype(np.uint8))


def test_ablate(cohort, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--cohort", str(cohort), "--out", str(out), "--fractions", "1", "0.5", *NET]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("fraction,cases") and len(rows) == 3
    rep = json.loads((out / "ablation.json").read_text())
    assert set(rep["subsets"]["0.5"]) <= set(rep["subsets"]["1.0"])
    assert (out / "ablation.png").exists()


def test_config_file_and_override(cohort, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cohort": str(cohort), "out": str(tmp_path / "r"), "conv-stack": "3x7,4x5,4x3,5x3",
                               "fc_widths": [6, 5, 2], "epochs": 2, "batch_size": 64, "seed": 4}))
    assert main(["train", "--config", str(cfg), "--epochs", "1"]) == 0
    run = json.loads((tmp_path / "r" / "run.json").read_text())
    assert run["config"]["epochs"] == 1 and run["config"]["seed"] == 4
    assert run["config"]["conv_stack"] == [[3, 7], [4, 5], [4, 3], [5, 3]]


def test_manifest_rerun_is_bit_exact(cohort, tmp_path):
    a = tmp_path / "a"
    assert main(["train", "--cohort", str(cohort), "--out", str(a), *NET, "--seed", "2"]) == 0
    b = tmp_path / "b"
    assert main(["train", "--config", str(a / "run.json"), "--out", str(b), "--threads", "2"]) == 0
    assert (a / "best.lsnn").read_bytes() == (b / "best.lsnn").read_bytes()

    def masked(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    assert masked(a / "stats.csv") == masked(b / "stats.csv")


def test_exit_codes(cohort, tmp_path, capsys):
    assert main(["train", "--bogus"]) == 2
    assert main(["eval", "--cohort", str(cohort)]) == 2  # required flag missing
    assert main(["train", "--cohort", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_speed": 3}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
    code = main(["train", "--cohort", str(cohort), "--out", str(tmp_path / "y"), "--fusion", "msws",
                 "--inject", "lcl", *NET])
    assert code == 1
    assert "LCL" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "locseg", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in COMMANDS:
        assert cmd in res.stdout
