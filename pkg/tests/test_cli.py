import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from promptmed.cli import main


PHANTOM_CFG = {
    "shape": [12, 64, 64],
    "bodies": [
        {"geometry": "cylinder", "center": [5.5, 32, 30], "radii": [5, 17, 18], "intensity": 1.0},
    ],
    "bg_intensity": 0.0,
    "noise_sigma": 0.01,
    "seed": 3,
}


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    cfg_path = root / "phantom.json"
    cfg_path.write_text(json.dumps(PHANTOM_CFG))
    out = root / "data"
    result = CliRunner().invoke(main, ["phantom", "gen", "--config", str(cfg_path),
                                       "--out", str(out), "--case-id", "caseA"])
    assert result.exit_code == 0, result.output
    return out


def test_phantom_gen_deterministic(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(PHANTOM_CFG))
    runner = CliRunner()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main, ["phantom", "gen", "--config", str(cfg_path), "--out", str(out)])
        assert result.exit_code == 0, result.output
        outs.append((out / "phantom0_img.nii.gz").read_bytes())
    assert outs[0] == outs[1]


def test_phantom_gen_refuses_overwrite(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(PHANTOM_CFG))
    runner = CliRunner()
    out = tmp_path / "out"
    assert runner.invoke(main, ["phantom", "gen", "--config", str(cfg_path), "--out", str(out)]).exit_code == 0
    denied = runner.invoke(main, ["phantom", "gen", "--config", str(cfg_path), "--out", str(out)])
    assert denied.exit_code == 2
    forced = runner.invoke(main, ["phantom", "gen", "--config", str(cfg_path), "--out", str(out), "--force"])
    assert forced.exit_code == 0


def test_phantom_gen_bad_config(tmp_path):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"shape": [4, 4]}))
    result = CliRunner().invoke(main, ["phantom", "gen", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


@pytest.fixture(scope="module")
def trained_run(phantom_dir, tmp_path_factory):
    run = tmp_path_factory.mktemp("run-train")
    result = CliRunner().invoke(main, [
        "assist", "train", "--data", str(phantom_dir), "--mode", "points",
        "--slices", "2", "--seed", "0", "--epochs", "60", "--out", str(run),
    ])
    assert result.exit_code == 0, result.output
    return run


def test_assist_train_outputs(trained_run):
    assert (trained_run / "checkpoint-caseA.ckpt").exists()
    assert (trained_run / "timing.csv").exists()
    header, row = (trained_run / "timing.csv").read_text().splitlines()
    assert header == "case_id,mode,n_slices,train_seconds"
    assert float(row.split(",")[-1]) > 0
    log = json.loads((trained_run / "train_log-caseA.json").read_text())
    assert log["epochs"][0]["epoch"] == 0


def test_assist_train_five_slices(phantom_dir, tmp_path):
    result = CliRunner().invoke(main, [
        "assist", "train", "--data", str(phantom_dir), "--mode", "points",
        "--slices", "5", "--seed", "1", "--epochs", "30", "--out", str(tmp_path / "run5"),
    ])
    assert result.exit_code == 0, result.output


def test_assist_eval_csv_and_summary(phantom_dir, trained_run, tmp_path):
    out = tmp_path / "eval"
    result = CliRunner().invoke(main, [
        "assist", "eval", "--data", str(phantom_dir), "--run", str(trained_run),
        "--mode", "points", "--points", "3", "--seed", "0", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    lines = (out / "eval-points.csv").read_text().splitlines()
    assert lines[0] == "case_id,n_points,dice"
    assert len(lines) > 1
    summary = json.loads((out / "eval_summary.json").read_text())
    assert set(summary["per_point_count"]) == {"1", "2", "3"}
    for stats in summary["per_point_count"].values():
        assert 0.0 <= stats["mean"] <= 1.0


def test_assist_eval_reproducible(phantom_dir, trained_run, tmp_path):
    runner = CliRunner()
    payloads = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        result = runner.invoke(main, [
            "assist", "eval", "--data", str(phantom_dir), "--run", str(trained_run),
            "--mode", "points", "--points", "2", "--seed", "7", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        payloads.append((out / "eval-points.csv").read_bytes())
    assert payloads[0] == payloads[1]


def test_assist_eval_jobs_parallel_matches_serial(phantom_dir, trained_run, tmp_path):
    runner = CliRunner()
    payloads = []
    for name, jobs in (("serial", "1"), ("parallel", "2")):
        out = tmp_path / name
        result = runner.invoke(main, [
            "assist", "eval", "--data", str(phantom_dir), "--run", str(trained_run),
            "--mode", "points", "--points", "2", "--seed", "3", "--jobs", jobs, "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        payloads.append((out / "eval-points.csv").read_bytes())
    assert payloads[0] == payloads[1]


def test_config_file_sets_defaults(phantom_dir, trained_run, tmp_path):
    cfg = tmp_path / "defaults.json"
    cfg.write_text(json.dumps({"points": 2, "seed": 9}))
    out = tmp_path / "eval-cfg"
    result = CliRunner().invoke(main, [
        "assist", "eval", "--config", str(cfg), "--data", str(phantom_dir),
        "--run", str(trained_run), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "eval_summary.json").read_text())
    assert set(summary["per_point_count"]) == {"1", "2"}
    assert summary["seed"] == 9


def test_auto_ablation_table(phantom_dir, tmp_path):
    out = tmp_path / "ablation"
    result = CliRunner().invoke(main, [
        "auto", "run", "--data", str(phantom_dir), "--slices", "4", "--seed", "0",
        "--ablation", "pe,biasdice,post", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    data = json.loads((out / "ablation.json").read_text())
    rows = data["rows"]
    assert [r["variant"] for r in rows] == ["none", "pe", "pe+biasdice", "pe+biasdice+post"]
    assert all(0.0 <= r["dice_mean"] <= 1.0 for r in rows)
    # toggling post changes only the post-processing stage output
    assert rows[2]["coarse_stage_hash"] == rows[3]["coarse_stage_hash"]
    md = (out / "ablation.md").read_text()
    assert md.count("|") > 10


def test_auto_ablation_rejects_unknown_toggle(phantom_dir, tmp_path):
    result = CliRunner().invoke(main, [
        "auto", "run", "--data", str(phantom_dir), "--ablation", "pe,psychic",
        "--out", str(tmp_path / "x"),
    ])
    assert result.exit_code == 2


def test_auto_propagate_strategy(phantom_dir, tmp_path):
    out = tmp_path / "prop"
    result = CliRunner().invoke(main, [
        "auto", "run", "--data", str(phantom_dir), "--strategy", "propagate",
        "--slices", "2", "--seed", "0", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "auto_summary.json").read_text())
    assert summary["strategy"] == "propagate"
    assert 0.0 <= summary["mean_dice"] <= 1.0


def test_report_aggregates_and_flags_absent(phantom_dir, trained_run, tmp_path):
    runs = tmp_path / "runs"
    runs.mkdir()
    out_eval = runs / "eval-points"
    result = CliRunner().invoke(main, [
        "assist", "eval", "--data", str(phantom_dir), "--run", str(trained_run),
        "--mode", "points", "--points", "2", "--seed", "0", "--out", str(out_eval),
    ])
    assert result.exit_code == 0
    (runs / "broken-run").mkdir()

    report_path = tmp_path / "report.md"
    result = CliRunner().invoke(main, ["report", "--in", str(runs), "--out", str(report_path)])
    assert result.exit_code == 3  # absent run present
    text = report_path.read_text()
    assert "eval-points" in text
    assert "broken-run" in text and "no summary" in text

    # idempotent: second invocation writes identical bytes
    result = CliRunner().invoke(main, ["report", "--in", str(runs), "--out", str(tmp_path / "r2.md")])
    assert (tmp_path / "r2.md").read_bytes() == report_path.read_bytes()


def test_report_all_present_exit_zero(phantom_dir, trained_run, tmp_path):
    runs = tmp_path / "runs"
    runs.mkdir()
    out_eval = runs / "only"
    CliRunner().invoke(main, [
        "assist", "eval", "--data", str(phantom_dir), "--run", str(trained_run),
        "--mode", "points", "--points", "1", "--seed", "0", "--out", str(out_eval),
    ])
    result = CliRunner().invoke(main, ["report", "--in", str(runs), "--out", str(tmp_path / "ok.md")])
    assert result.exit_code == 0
