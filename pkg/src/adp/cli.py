"""Command line: ``adp {train,eval,schedule,selftest}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure (non-finite loss, I/O).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, restore_parameters, save_checkpoint
from .config import DESK_PRESET, ConfigError, RunConfig, dump_config, load_config
from .data import DataError, generate_dataset
from .schedules import dump_schedules, write_schedule_csv
from .selftest import run_selftest
from .training import (
    NonFiniteLossError,
    build_model,
    build_schedules,
    evaluate_model,
    train,
    write_metrics_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def cmd_schedule(config: RunConfig, out_csv=None) -> int:
    schedules = build_schedules(config)
    branch_specs = schedules.branches
    if branch_specs is None:
        # PMoC disabled: every branch follows the main schedule
        rows = [[e, *schedules.group_lrs(e).values()] for e in range(config.schedules.T)]
    else:
        rows = dump_schedules(branch_specs, schedules.main, config.schedules.T)
    path = Path(out_csv) if out_csv else config.path("schedule_csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_schedule_csv(path, rows, config.model.k)
    except OSError as exc:
        print(f"error: cannot write {path}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    names = ["main", *(f"branch{b + 1}" for b in range(config.model.k))]
    maxima = [max(row[i + 1] for row in rows) for i in range(len(names))]
    for name, peak in zip(names, maxima):
        print(f"{name:>9s} max lr {peak:.10g}")
    print(f"global max lr {max(maxima):.10g}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    out_dir = Path(config.io.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(dump_config(config))
    except OSError as exc:
        print(f"error: cannot prepare {out_dir}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        result = train(config)
    except NonFiniteLossError as exc:
        print(f"error: {exc} (term={exc.term}, epoch={exc.epoch})", file=sys.stderr)
        return EXIT_RUNTIME
    for rec in result.history:
        print(f"epoch {rec.epoch:3d}  total {rec.total:.4f}  ce {rec.ce:.4f}  tri {rec.triplet:.4f}  dcml {rec.dcml:.4f}")
    try:
        write_metrics_csv(config.path("metrics_csv"), result.history, config.model.k)
        save_checkpoint(config.path("checkpoint"), result.model.state_dict())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {config.path('checkpoint')} and {config.path('metrics_csv')}")
    return EXIT_OK


def cmd_eval(config: RunConfig, checkpoint=None, perfect_features: bool = False) -> int:
    split = generate_dataset(config.data.synthetic_spec(), config.data.heldout_domain)
    model = build_model(config)
    if not perfect_features:
        path = Path(checkpoint) if checkpoint else config.path("checkpoint")
        try:
            restore_parameters(model, load_checkpoint(path))
        except OSError as exc:
            print(f"error: cannot read checkpoint {path}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        except CheckpointError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
    results = evaluate_model(model, split, perfect_features=perfect_features)
    for name, metrics in results.items():
        print(f"{name:8s} mAP {metrics.mAP:.4f}  Rank-1 {metrics.rank1:.4f}  queries {len(metrics.per_query_ap)}")
    return EXIT_OK


def cmd_selftest(fault: str | None = None) -> int:
    results = run_selftest(fault=fault)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with 'section.key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--paper-defaults", action="store_true",
                        help="start from the full-scale published settings instead of the desk preset")
    common.add_argument("--out", help="output directory (io.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics log")
    ev = sub.add_parser("eval", parents=[common], help="held-out and held-in retrieval metrics")
    ev.add_argument("--checkpoint", help="checkpoint path (default: io.checkpoint)")
    ev.add_argument("--perfect-features", action="store_true",
                    help="debug: bypass the model with identity one-hot features")
    sc = sub.add_parser("schedule", parents=[common], help="write the per-epoch learning-rate table")
    sc.add_argument("--csv", help="output CSV (default: io.schedule_csv)")
    st = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    st.add_argument("--inject-fault", choices=["chebyshev"], help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "selftest":
        return cmd_selftest(args.inject_fault)
    overrides = list(args.set)
    if args.out:
        overrides.append(f"io.out_dir={args.out}")
    try:
        config = load_config(args.config, overrides, preset=None if args.paper_defaults else DESK_PRESET)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID

    if args.command == "schedule":
        return cmd_schedule(config, args.csv)
    if args.command == "train":
        return cmd_train(config)
    return cmd_eval(config, args.checkpoint, args.perfect_features)


if __name__ == "__main__":
    sys.exit(main())
