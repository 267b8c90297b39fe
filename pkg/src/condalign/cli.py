"""Command-line entry point: ``condalign <stage> --config PATH [--seed N] --out PATH``."""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .behavior import TrainingDivergedError
from .conddist import ModelMismatchError, SpecError
from .config import ConfigError, ExperimentConfig, default_config

EXIT_ERROR = 1
EXIT_CONFIG = 2


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed: must be >= 0, got {args.seed}")
        config = config.with_seed(args.seed)
    return config


def cmd_simulate(args) -> int:
    config = _load_config(args)
    n = pipeline.run_simulate(config, args.out)
    print(f"simulate: wrote {n} rows to {args.out}")
    return 0


def cmd_fit(args) -> int:
    config = _load_config(args)
    _, lines = pipeline.run_fit(config, args.data, args.out)
    print("\n".join(lines))
    return 0


def cmd_transform(args) -> int:
    config = _load_config(args)
    n = pipeline.run_transform(config, args.data, args.models, args.out)
    print(f"transform: wrote {n} rows to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    report = pipeline.run_evaluate(config, args.data, args.out, models_path=args.models)
    _print_report(report)
    print(f"evaluate: wrote {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    report, lines = pipeline.run_pipeline(config, args.out)
    print("\n".join(lines))
    _print_report(report)
    return 0


def _print_report(report) -> None:
    for name, r in sorted(report.signals.items()) + [("z_final", report.fused)]:
        parts = [f"MI after {r.mi_after.nats:.3g} (floor {r.mi_after.noise_floor_nats:.3g})"]
        if r.mi_before is not None:
            parts.insert(0, f"MI before {r.mi_before.nats:.3g}")
        if r.ks_global is not None:
            parts.append(f"KS {r.ks_global.d_statistic:.3g}")
        if r.spearman_after is not None:
            parts.append(f"spearman {r.spearman_after:.4f}")
        print(f"{name} [{r.method}]: " + ", ".join(parts))
    for w in report.warnings:
        print(f"warning: {w}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condalign",
        description="Remove bias-factor dependence from predicted behavior scores.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_, out_help, *, data=False, models=None):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", metavar="PATH",
                       help="experiment config (JSON); defaults to the built-in scenario")
        p.add_argument("--seed", type=int, metavar="N", help="override the master seed")
        if data:
            p.add_argument("--data", required=True, metavar="PATH", help="input data table")
        if models is not None:
            p.add_argument("--models", required=models, metavar="PATH",
                           help="model bundle written by 'fit'")
        p.add_argument("--out", required=name != "pipeline", metavar="PATH", help=out_help)
        p.set_defaults(func=func)

    add("simulate", cmd_simulate, "generate a synthetic dataset", "output data table")
    add("fit", cmd_fit, "fit predictors and conditional models", "output model bundle",
        data=True)
    add("transform", cmd_transform, "append aligned scores to a data table",
        "output scored table", data=True, models=True)
    add("evaluate", cmd_evaluate, "compute independence and recovery metrics",
        "output report (JSON; CSV and figures are written alongside)", data=True, models=False)
    add("pipeline", cmd_pipeline, "simulate, fit, transform and evaluate in one run",
        "output directory (defaults to the config's output.dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"condalign: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, OSError, ModelMismatchError, SpecError,
            TrainingDivergedError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"condalign: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
