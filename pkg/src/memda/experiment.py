"""Run-directory plumbing shared by the command line and the experiments.

A run directory holds ``config.json`` (the resolved experiment config),
``checkpoint.bin``, ``history.json`` and ``train_state.pt``; evaluation adds
``report.json``, ``timing.json``, ``per_day.csv`` and ``weights.csv``.
"""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, build_variant
from .data import UrbanSeries, enumerate_samples, generate_synthetic_drift, load_csv, normalize
from .errors import ConfigurationError
from .harness import EvalReport, ForecastData, evaluate_copy_last_day, evaluate_online, prepare_data, train
from .model import VARIANTS

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.json"
STATE_FILE = "train_state.pt"
REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"
PER_DAY_FILE = "per_day.csv"
WEIGHTS_FILE = "weights.csv"


def load_series(exp: ExperimentConfig, data_path: str | Path | None = None) -> UrbanSeries:
    path = data_path or exp.data.path
    if path is not None:
        return load_csv(path, exp.data.samples_per_day, exp.data.channels)
    return generate_synthetic_drift(exp.synthetic)


def prepare(exp: ExperimentConfig, series: UrbanSeries) -> ForecastData:
    return prepare_data(series, exp.data.train_end, exp.data.val_fraction, exp.train.alpha, exp.train.effective_K)


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_train(exp: ExperimentConfig, run_dir: str | Path, resume: bool = False, series: UrbanSeries | None = None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    series = series if series is not None else load_series(exp)
    data = prepare(exp, series)
    config = exp.train
    echo = exp.to_dict()
    echo["split"] = {name: [r.start, r.stop] for name, r in [("train", data.split.train), ("val", data.split.val), ("test", data.split.test)]}
    write_json(run_dir / CONFIG_FILE, echo)

    model = build_variant(config, series.n_channels)
    result = train(model, data, config, state_file=run_dir / STATE_FILE, resume=resume)
    save_checkpoint(run_dir / CHECKPOINT_FILE, result.model, config, data.stats)
    write_json(run_dir / HISTORY_FILE, result.history.to_dict())
    return result, data


def load_run(run_dir: str | Path) -> ExperimentConfig:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        raise ConfigurationError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload.pop("split", None)
    return ExperimentConfig.from_dict(payload)


def parse_range(split: str, data: ForecastData) -> range:
    named = {"train": data.split.train, "val": data.split.val, "test": data.split.test,
             "all": range(0, data.series.T_total)}
    if split in named:
        return named[split]
    try:
        start, stop = (int(x) for x in split.split(":"))
    except ValueError:
        raise ConfigurationError(f"split must be train, val, test, all or START:STOP, got {split!r}") from None
    return range(start, stop)


def run_evaluate(
    run_dir: str | Path,
    data_path: str | Path | None = None,
    split: str = "test",
    out_dir: str | Path | None = None,
    plain: bool = False,
) -> EvalReport:
    run_dir = Path(run_dir)
    ckpt = run_dir / CHECKPOINT_FILE
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    exp = load_run(run_dir)
    series = load_series(exp, data_path)
    model, config, stats, _ = load_checkpoint(ckpt, series.n_channels)
    data = prepare(exp, series)
    if stats is not None:
        # the checkpoint's statistics are authoritative
        data = ForecastData(data.series, data.split, stats,
                            torch.from_numpy(normalize(series, stats).values.astype(np.float32)))
    report = evaluate_online(model, data, parse_range(split, data), plain=plain)

    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_json({"experiment": exp.to_dict(), "split": split, "plain": plain})
    write_json(out / REPORT_FILE, payload)
    write_json(out / TIMING_FILE, {"wall_clock_seconds": report.wall_clock})
    with (out / PER_DAY_FILE).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["day", "n_anchors", "mae", "rmse"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.per_day)
    weights_path = out / WEIGHTS_FILE
    if report.weights is not None:
        write_weights(weights_path, report.anchors, report.weights)
    elif weights_path.exists():
        weights_path.unlink()
    return report


def write_weights(path: Path, anchors, weights: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["anchor_t", *(f"w_{i}" for i in range(weights.shape[1]))])
        for t, row in zip(anchors, weights):
            writer.writerow([t, *(repr(float(v)) for v in row)])


def read_weights(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no weight trajectory at {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"weight trajectory {path} is empty")
    body = np.asarray(rows[1:], dtype=np.float64)
    return body[:, 0].astype(int), body[:, 1:]


# ---------------------------------------------------------------------------
# ablation


def _ablate_one(payload: dict, variant: str, run_dir: str) -> dict:
    exp = ExperimentConfig.from_dict(payload)
    exp.train.variant = variant
    exp.train.validate()
    try:
        run_train(exp, run_dir)
        report = run_evaluate(run_dir)
    except Exception as exc:  # a failed variant still gets a row
        logger.exception("variant %s failed", variant)
        return {"variant": variant, "status": f"failed: {type(exc).__name__}: {exc}"}
    return {"variant": variant, "status": "ok", "rmse": report.rmse, "mae": report.mae, "mape": report.mape}


def run_ablation(
    exp: ExperimentConfig,
    out_dir: str | Path,
    variants=VARIANTS,
    parallel: bool = False,
    baselines: bool = False,
) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = exp.to_dict()
    jobs = [(payload, v, str(out_dir / v)) for v in variants]
    if parallel:
        with ProcessPoolExecutor(mp_context=multiprocessing.get_context("spawn")) as pool:
            rows = list(pool.map(_ablate_one, *zip(*jobs)))
    else:
        rows = [_ablate_one(*job) for job in jobs]
    if baselines:
        rows += _baseline_rows(exp, out_dir)
    write_table(out_dir, rows, dataset=exp.name or ("synthetic" if exp.synthetic else Path(exp.data.path).stem))
    return rows


def _baseline_rows(exp: ExperimentConfig, out_dir: Path) -> list[dict]:
    series = load_series(exp)
    data = prepare(exp, series)
    anchors = enumerate_samples(series, exp.train.alpha, exp.train.K, data.split.test)
    rows = [{"variant": "copy_last_day", "status": "ok", **evaluate_copy_last_day(data, anchors, exp.train.alpha)}]
    revin = ExperimentConfig.from_dict(exp.to_dict())
    revin.train.variant = "backbone"
    revin.train.revin = True
    row = _ablate_one(revin.to_dict(), "backbone", str(out_dir / "backbone_revin"))
    row["variant"] = "backbone_revin"
    return rows + [row]


def write_table(out_dir: Path, rows: list[dict], dataset: str = "synthetic") -> None:
    with (out_dir / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", f"{dataset}_rmse", f"{dataset}_mae", f"{dataset}_mape", "status"])
        for row in rows:
            if row["status"] == "ok":
                writer.writerow([row["variant"], f"{row['rmse']:.4f}", f"{row['mae']:.4f}", f"{row['mape']:.2f}", "ok"])
            else:
                writer.writerow([row["variant"], "", "", "", row["status"]])
    lines = [
        f"| Variant | {dataset} RMSE | {dataset} MAE | {dataset} MAPE (%) |",
        "|---|---|---|---|",
    ]
    for row in rows:
        if row["status"] == "ok":
            lines.append(f"| {row['variant']} | {row['rmse']:.4f} | {row['mae']:.4f} | {row['mape']:.2f} |")
        else:
            lines.append(f"| {row['variant']} | failed | failed | failed |")
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
