"""Command-line entry point: ``balanced-il run | compare | sweep | emit-confusion``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment
from .errors import ConfigError, NumericError
from .metrics import RunRecord

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--loss", choices=["standard", "balanced", "alpha", "relaxed", "rescaled",
                                      "meta"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", help="absolute value or percentage such as 0.2%%")
    p.add_argument("--memory-per-class", type=int, dest="memory_per_class")
    p.add_argument("--steps", type=int, help="number of incremental steps")


def _load(args) -> experiment.ExperimentConfig:
    cfg = experiment.load_config(args.config) if args.config else experiment.ExperimentConfig()
    overrides = {
        "run.seed": args.seed,
        "run.out": args.out,
        "loss.mode": args.loss,
        "loss.alpha": args.alpha,
        "loss.epsilon": args.epsilon,
        "memory.size": args.memory_per_class,
        "schedule.steps": args.steps,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, value)
    if args.memory_per_class is not None:
        cfg.memory.policy = "growing"
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    record = experiment.run(cfg)
    for r in record.reports:
        print(f"step {r.step}: top1 {100 * r.top1_accuracy:6.2f}  classes {r.num_classes}")
    print(f"average incremental accuracy: {record.average_incremental_accuracy:.2f}")
    print(f"record written to {Path(cfg.run.out) / experiment.output_name(cfg.run_id, None, 'record.json')}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg_a = _load(args)
    if args.config_b:
        cfg_b = experiment.load_config(args.config_b)
        cfg_b.run.seed, cfg_b.run.out = cfg_a.run.seed, cfg_a.run.out
    else:
        cfg_b = cfg_a.copy()
    for key, value in (("loss.mode", args.loss_b), ("loss.alpha", args.alpha_b),
                       ("loss.epsilon", args.epsilon_b)):
        if value is not None:
            cfg_b.set(key, value)
    result = experiment.compare(cfg_a, cfg_b, args.seeds)
    print(result.table(cfg_a.loss.mode, cfg_b.loss.mode))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = experiment.sweep(cfg, args.field, args.values)
    print(experiment.sweep_table(rows))
    return EXIT_OK


def _cmd_emit(args) -> int:
    try:
        record = RunRecord.load(args.record)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read run record {args.record}: {exc}") from None
    run_id = args.run_id or Path(args.record).name.removesuffix("_record.json")
    out = args.out or str(Path(args.record).parent)
    for path in experiment.emit_confusion(record, out, run_id):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balanced-il", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one class-incremental experiment")
    _add_overrides(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="paired-seed comparison of two loss settings")
    _add_overrides(p)
    p.add_argument("--config-b", help="second config; defaults to the first with -b overrides")
    p.add_argument("--loss-b")
    p.add_argument("--alpha-b", type=float)
    p.add_argument("--epsilon-b")
    p.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2])
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("sweep", help="one run per alpha or epsilon value")
    _add_overrides(p)
    p.add_argument("--field", required=True, choices=["alpha", "epsilon"])
    p.add_argument("--values", required=True, nargs="+")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("emit-confusion", help="re-render confusion CSVs from a run record")
    p.add_argument("record")
    p.add_argument("--out")
    p.add_argument("--run-id", dest="run_id")
    p.set_defaults(func=_cmd_emit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
