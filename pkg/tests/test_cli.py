import csv
import json
import shutil
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from helpers import SMALL_SYNTHETIC, SMALL_TRAIN
from memda import experiment
from memda.cli import main
from memda.harness import REPORT_SCHEMA

TINY = {
    "train": {**SMALL_TRAIN, "max_epochs": 2},
    "synthetic": dict(SMALL_SYNTHETIC),
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    runs = {}
    for variant in ("memda", "rm_pm", "backbone"):
        run = root / variant
        assert main(["train", "--config", str(cfg), "--variant", variant, "--out", str(run)]) == 0
        assert main(["evaluate", "--run-dir", str(run)]) == 0
        runs[variant] = run
    return runs


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- generate ------------------------------------------------------------------


def test_generate_writes_days_times_p_rows(cfg, tmp_path):
    out = tmp_path / "data" / "drift.csv"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) - 1 == 12 * 24
    assert rows[0][0] == "timestamp" and len(rows[0]) == 1 + 3
    sidecar = json.loads((tmp_path / "data" / "drift.config.json").read_text())
    assert sidecar["magnitude"] == 0.5 and sidecar["seed"] == 0


def test_generate_is_byte_identical_and_refuses_overwrite(cfg, tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["generate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["generate", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["generate", "--config", cfg, "--out", str(a)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--config", cfg, "--out", str(a), "--force", "--seed", "3"]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_generate_rejects_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synthetic": {"drift_time": 10_000}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2
    assert "drift_time" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.csv")]) == 2


# -- train ---------------------------------------------------------------------


def test_unknown_variant_is_a_usage_error(cfg, tmp_path, capsys):
    assert main(["train", "--config", cfg, "--variant", "transformer"]) == 2
    err = capsys.readouterr().err
    for name in ("backbone", "rm", "rm_pm", "meta", "memda"):
        assert name in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"variant": "transformer"}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "memda" in capsys.readouterr().err


def test_entry_point_exit_codes(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "memda.cli", "train", "--variant", "nope"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "memda.cli", "evaluate", "--run-dir", str(tmp_path)],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1  # no checkpoint there


def test_train_writes_self_describing_run_dir(trained):
    run = trained["memda"]
    for name in ("checkpoint.bin", "history.json", "config.json", "train_state.pt"):
        assert (run / name).exists()
    echo = json.loads((run / "config.json").read_text())
    assert echo["train"]["variant"] == "memda"
    assert echo["split"]["test"] == [192, 288]
    history = json.loads((run / "history.json").read_text())
    assert history["epochs_run"] == 2


def test_train_defaults_to_out_dir_env(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("MEMDA_OUT_DIR", str(tmp_path / "root"))
    assert main(["train", "--config", cfg, "--variant", "rm", "--seed", "4"]) == 0
    assert (tmp_path / "root" / "rm-seed4" / "checkpoint.bin").exists()
    assert main(["train", "--config", cfg, "--variant", "rm", "--seed", "4"]) == 2
    assert main(["train", "--config", cfg, "--variant", "rm", "--seed", "4", "--force"]) == 0


def test_resume(cfg, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run)]) == 0
    longer = tmp_path / "longer.json"
    longer.write_text(json.dumps({**TINY, "train": {**TINY["train"], "max_epochs": 3}}))
    assert main(["train", "--config", str(longer), "--out", str(run), "--resume"]) == 0
    history = json.loads((run / "history.json").read_text())
    assert history["epochs_run"] == 3 and len(history["train_loss"]) == 3
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty"), "--resume"]) == 2


# -- evaluate ------------------------------------------------------------------


def test_evaluate_outputs_and_schema(trained):
    run = trained["memda"]
    report = json.loads((run / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["counters"]["rm_size"] == 48
    per_day = _rows(run / "per_day.csv")
    assert per_day[0] == ["day", "n_anchors", "mae", "rmse"]
    weights = _rows(run / "weights.csv")
    assert weights[0] == ["anchor_t"] + [f"w_{i}" for i in range(10)]
    assert len(weights) - 1 == report["n_anchors"]
    assert json.loads((run / "timing.json").read_text())["wall_clock_seconds"] > 0


def test_repeated_evaluation_is_identical(trained, tmp_path):
    run = trained["memda"]
    assert main(["evaluate", "--run-dir", str(run), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "report.json").read_bytes() == (run / "report.json").read_bytes()
    assert (tmp_path / "again" / "weights.csv").read_bytes() == (run / "weights.csv").read_bytes()


def test_run_dir_and_data_file_reproduce_the_report(tmp_path):
    data = tmp_path / "stream.csv"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    file_cfg = tmp_path / "file.json"
    file_cfg.write_text(json.dumps({"train": TINY["train"], "data": {"path": str(data), "train_end": 192}}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(file_cfg), "--out", str(run)]) == 0
    assert main(["evaluate", "--run-dir", str(run)]) == 0
    moved = tmp_path / "moved"
    moved.mkdir()
    for name in ("checkpoint.bin", "config.json"):
        shutil.copy(run / name, moved / name)
    assert main(["evaluate", "--run-dir", str(moved), "--data", str(data)]) == 0
    assert (moved / "report.json").read_bytes() == (run / "report.json").read_bytes()


def test_evaluate_errors(trained, tmp_path, capsys):
    run = trained["memda"]
    assert main(["evaluate", "--run-dir", str(run), "--split", "0:60", "--out", str(tmp_path)]) == 2
    assert "no valid anchor" in capsys.readouterr().err
    assert main(["evaluate", "--run-dir", str(run), "--split", "sideways", "--out", str(tmp_path)]) == 2
    empty = tmp_path / "nockpt"
    empty.mkdir()
    shutil.copy(run / "config.json", empty / "config.json")
    assert main(["evaluate", "--run-dir", str(empty)]) == 1
    assert "checkpoint" in capsys.readouterr().err


# -- plot-weights ----------------------------------------------------------------


def test_plot_weights(trained):
    assert main(["plot-weights", "--run-dir", str(trained["memda"])]) == 0
    png = trained["memda"] / "weights.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_static_fusion_trajectory_is_constant(trained):
    _, W = experiment.read_weights(trained["rm_pm"] / "weights.csv")
    assert (W == W[0]).all()
    _, W = experiment.read_weights(trained["memda"] / "weights.csv")
    assert W.std(axis=0).max() > 0


def test_plot_weights_errors(trained, tmp_path, capsys):
    assert not (trained["backbone"] / "weights.csv").exists()
    assert main(["plot-weights", "--run-dir", str(trained["backbone"])]) == 1
    assert "no weight trajectory" in capsys.readouterr().err
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "weights.csv").write_text("anchor_t,w_0\n")
    assert main(["plot-weights", "--run-dir", str(empty)]) == 1
    assert "empty" in capsys.readouterr().err


# -- ablate ----------------------------------------------------------------------


def test_ablate_table_shape_and_shared_splits(cfg, tmp_path):
    out = tmp_path / "ablation"
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out / "ablation.csv")
    assert rows[0] == ["variant", "synthetic_rmse", "synthetic_mae", "synthetic_mape", "status"]
    assert [r[0] for r in rows[1:]] == ["backbone", "rm", "rm_pm", "meta", "memda"]
    assert all(r[4] == "ok" and all(float(x) >= 0 for x in r[1:4]) for r in rows[1:])
    table = (out / "ablation.md").read_text().splitlines()
    assert len(table) == 2 + 5
    splits = {json.dumps(json.loads((out / v / "config.json").read_text())["split"]) for v in
              ("backbone", "rm", "rm_pm", "meta", "memda")}
    seeds = {json.loads((out / v / "config.json").read_text())["train"]["seed"] for v in ("rm", "memda")}
    assert len(splits) == 1 and seeds == {0}


def test_ablate_marks_failed_rows(cfg, tmp_path, monkeypatch):
    original = experiment.run_train

    def flaky(exp, run_dir, *args, **kwargs):
        if exp.train.variant == "meta":
            raise RuntimeError("simulated failure")
        return original(exp, run_dir, *args, **kwargs)

    monkeypatch.setattr(experiment, "run_train", flaky)
    out = tmp_path / "ablation"
    assert main(["ablate", "--config", cfg, "--out", str(out), "--variants", "rm,meta"]) == 1
    rows = _rows(out / "ablation.csv")
    assert rows[1][4] == "ok"
    assert rows[2][0] == "meta" and rows[2][4].startswith("failed") and rows[2][1] == ""
    assert "| meta | failed | failed | failed |" in (out / "ablation.md").read_text()


def test_ablate_parallel_matches_sequential(cfg, tmp_path):
    seq, par = tmp_path / "seq", tmp_path / "par"
    assert main(["ablate", "--config", cfg, "--out", str(seq), "--variants", "backbone,rm"]) == 0
    assert main(["ablate", "--config", cfg, "--out", str(par), "--variants", "backbone,rm", "--parallel"]) == 0
    assert (seq / "ablation.csv").read_bytes() == (par / "ablation.csv").read_bytes()


def test_ablate_baselines(cfg, tmp_path):
    out = tmp_path / "ablation"
    assert main(["ablate", "--config", cfg, "--out", str(out), "--variants", "memda", "--baselines"]) == 0
    names = [r[0] for r in _rows(out / "ablation.csv")[1:]]
    assert names == ["memda", "copy_last_day", "backbone_revin"]
    assert np.isfinite(float(_rows(out / "ablation.csv")[2][2]))
