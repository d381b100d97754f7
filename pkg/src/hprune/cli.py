"""``hprune`` command line: train, finalize, eval, report, sweep, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, report
from .config import ConfigError, TrainConfig, parse_pairs, read_config_file

log = logging.getLogger("hprune")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("--out", help=f"run directory (default: ${pipeline.OUT_ROOT_ENV} or ./runs)")

    p = sub.add_parser("train", help="joint fine-tuning and pruning")
    config_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.hpck if present")

    p = sub.add_parser("finalize", help="binarize gates, compact and verify")
    p.add_argument("checkpoint")
    p.add_argument("--target", type=float, help="sparsity to honour (default: the training target)")
    p.add_argument("--out", help="directory for outputs (default: the checkpoint's run directory)")

    p = sub.add_parser("eval", help="EER / minDCF / accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("eval", "train"), default="eval")

    p = sub.add_parser("report", help="summary table for one or more run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="CSV path (default: summary.csv inside a single run, else stdout)")

    p = sub.add_parser("sweep", help="train + finalize over targets and seeds")
    config_flags(p)
    p.add_argument("--targets", type=_floats, default=[0.0, 0.1, 0.3, 0.5])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")

    p = sub.add_parser("selftest", help="gradient, Monte-Carlo and equivalence property suites")
    p.add_argument("--quick", action="store_true", help="fewer samples and plans")
    return parser


def resolve_config(args) -> tuple[TrainConfig, Path | None]:
    values = read_config_file(args.config) if args.config else {}
    values = parse_pairs(args.set, values)
    if args.seed is not None:
        values["seed"] = args.seed
    out = Path(args.out) if args.out else (Path(values["out_dir"]) if "out_dir" in values else None)
    return TrainConfig(**values), out


def cmd_train(args) -> int:
    config, out = resolve_config(args)
    out = out or pipeline.out_root() / pipeline.default_run_name(config)
    trainer = pipeline.train(config, out, resume=args.resume)
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"run": str(out), "step": trainer.step, "s_hat": last.get("s_hat"),
                      **{k: v for k, v in last.items() if k in ("eer", "min_dcf", "accuracy")}}, sort_keys=True))
    return 0


def cmd_finalize(args) -> int:
    final = pipeline.finalize(args.checkpoint, target=args.target, out_dir=args.out)
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(pipeline.eval_checkpoint(args.checkpoint, args.split), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    rows = report.summarize(args.runs)
    if args.out or len(args.runs) == 1:
        dest = args.out or Path(args.runs[0]) / report.SUMMARY_CSV
        report.write_table(rows, dest)
        print(f"{len(rows)} row(s) -> {dest}")
    else:
        report.write_table(rows, sys.stdout)
    return 0


def cmd_sweep(args) -> int:
    config, out = resolve_config(args)
    out = out or pipeline.out_root() / f"sweep_{config.task}"
    rows = pipeline.sweep(config, args.targets, args.seeds, out, jobs=args.jobs)
    print(f"{len(rows)} runs -> {out / pipeline.SWEEP_CSV}")
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    if args.quick:
        checks = selftest.run_all(n_plans=10, mc_samples=100_000)
    else:
        checks = selftest.run_all()
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "finalize": cmd_finalize,
    "eval": cmd_eval,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
