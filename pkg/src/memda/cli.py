"""``memda`` command line: generate, train, evaluate, ablate, plot-weights.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import PRESETS, ExperimentConfig
from .data import generate_synthetic_drift, save_csv
from .errors import ConfigurationError, MemDAError
from .model import VARIANTS

logger = logging.getLogger("memda")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config, preset=args.preset)
    if getattr(args, "seed", None) is not None:
        exp.train.seed = args.seed
        if exp.synthetic is not None:
            exp.synthetic.seed = args.seed
    if getattr(args, "variant", None):
        exp.train.variant = args.variant
    exp.train.validate()
    return exp


def _claim(path: Path, force: bool) -> Path:
    if path.exists() and not force and (path.is_file() or any(path.iterdir())):
        raise UsageError(f"{path} already exists; pass --force to overwrite")
    return path


def cmd_generate(args) -> int:
    exp = _experiment(args)
    if exp.synthetic is None:
        raise ConfigurationError("generate needs a synthetic section (config names a data path)")
    out = _claim(Path(args.out), args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    series = generate_synthetic_drift(exp.synthetic)
    save_csv(series, out)
    sidecar = out.with_name(out.stem + ".config.json")
    ex.write_json(sidecar, exp.synthetic.to_dict())
    print(f"wrote {out} ({series.T_total} steps x {series.n_nodes} nodes) and {sidecar}")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _experiment(args)
    run_dir = Path(args.out) if args.out else exp.run_dir()
    if not args.resume:
        _claim(run_dir, args.force)
    elif not (run_dir / ex.STATE_FILE).exists():
        raise UsageError(f"nothing to resume in {run_dir}")
    result, _ = ex.run_train(exp, run_dir, resume=args.resume)
    h = result.history
    print(f"trained {exp.train.variant} for {h.epochs_run} epochs, best epoch {h.best_epoch}, "
          f"val MAE {min(h.val_mae):.4f}; run dir {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = ex.run_evaluate(args.run_dir, data_path=args.data, split=args.split, out_dir=args.out, plain=args.plain)
    print(json.dumps({"variant": report.variant, "rmse": report.rmse, "mae": report.mae, "mape": report.mape,
                      "n_anchors": len(report.anchors)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    out = Path(args.out) if args.out else Path(exp.run_dir()).parent / "ablation"
    _claim(out, args.force)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigurationError(f"unknown variants {bad}; choose from {', '.join(VARIANTS)}")
    rows = ex.run_ablation(exp, out, variants, parallel=args.parallel, baselines=args.baselines)
    print((out / "ablation.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_plot_weights(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    anchors, weights = ex.read_weights(run_dir / ex.WEIGHTS_FILE)
    out = Path(args.out) if args.out else run_dir / "weights.png"
    fig, ax = plt.subplots(figsize=(10, 4))
    img = ax.imshow(weights.T, aspect="auto", interpolation="nearest", cmap="viridis",
                    extent=(anchors[0] - 0.5, anchors[-1] + 0.5, weights.shape[1] - 0.5, -0.5))
    try:
        exp = ex.load_run(run_dir)
        if exp.synthetic is not None:
            ax.axvline(exp.synthetic.drift_time, color="red", linestyle="--", linewidth=1, label="drift")
            ax.legend(loc="upper right")
    except ConfigurationError:
        pass
    ax.set_xlabel("anchor t")
    ax.set_ylabel("fusion entry")
    fig.colorbar(img, ax=ax, label="weight")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memda", description="Drift-adaptive urban time-series forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_flags(p, seed=True, variant=True):
        p.add_argument("--config", help="experiment JSON (train/data/synthetic sections)")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="base settings (default desk)")
        if seed:
            p.add_argument("--seed", type=int, help="override the training and generator seed")
        if variant:
            p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("generate", help="write a synthetic drift series as CSV")
    experiment_flags(p, variant=False)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant into a run directory")
    experiment_flags(p)
    p.add_argument("--out", help="run directory (default $MEMDA_OUT_DIR/<variant>-seed<seed>)")
    p.add_argument("--resume", action="store_true", help="continue from train_state.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="online evaluation of a trained run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="CSV to evaluate on (default: the training data)")
    p.add_argument("--split", default="test", help="train, val, test, all or START:STOP")
    p.add_argument("--out", help="report directory (default: the run directory)")
    p.add_argument("--plain", action="store_true", help="encode every segment live instead of replaying")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate every variant")
    experiment_flags(p, variant=False)
    p.add_argument("--out", help="output directory")
    p.add_argument("--variants", help="comma-separated subset")
    p.add_argument("--parallel", action="store_true", help="one process per variant")
    p.add_argument("--baselines", action="store_true", help="add copy-last-day and a normalized backbone")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot-weights", help="heatmap of the adaptation weight trajectory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="image path (default <run-dir>/weights.png)")
    p.set_defaults(func=cmd_plot_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"memda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"memda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MemDAError, OSError, ValueError, RuntimeError) as exc:
        print(f"memda: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
