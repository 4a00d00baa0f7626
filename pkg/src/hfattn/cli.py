"""Command-line front end: ``hfattn {sweep,train,aggregate,gradcheck,report,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataError, SERIES_FEATURES, aggregate_death_counts, generate_synthetic, load_csv, write_csv
from .harness import (MODELS, ConfigError, RunReport, SweepConfig, default_seed, format_rankings,
                      run_sweep, write_rankings, RANKING_NAME, _write_csv)
from .optim import KINDS

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for diverged runs
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _data_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="heart-failure clinical records CSV")
    src.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")
    p.add_argument("--n-records", type=int, default=299)
    p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hfattn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="run the full optimizer x lr x feature x model grid")
    p.add_argument("--config", required=True, help="JSON sweep configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides config and $HFATTN_SEED)")
    p.add_argument("--workers", type=int, help="cells to run concurrently")
    p.add_argument("--output-dir", help="override the configured output directory")

    p = sub.add_parser("train", help="train a single grid cell")
    p.add_argument("--model", choices=MODELS, default="attention")
    p.add_argument("--optimizer", choices=KINDS, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--feature", choices=SERIES_FEATURES, required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lookback", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/train")
    _data_args(p)

    p = sub.add_parser("aggregate", help="emit the binned death-count series for one feature")
    p.add_argument("--feature", choices=SERIES_FEATURES, required=True)
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--out", help="CSV path (default: stdout)")
    _data_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and layer")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="re-render rankings from a stored report")
    p.add_argument("--dir", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset in the clinical-records CSV format")
    p.add_argument("--n", type=int, default=299)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _finish(report: RunReport) -> int:
    print(format_rankings(report))
    if report.diverged:
        print(f"{len(report.diverged)} cell(s) diverged: {', '.join(report.diverged)}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = SweepConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    if args.output_dir:
        config.output_dir = args.output_dir
    config.validate()
    return _finish(run_sweep(config))


def cmd_train(args) -> int:
    config = SweepConfig(
        data_path=args.data, synthetic=args.synthetic, n_records=args.n_records, data_seed=args.data_seed,
        features=[args.feature], models=[args.model], optimizers=[args.optimizer],
        learning_rates=[args.lr], epochs=args.epochs, lookback=args.lookback,
        seed=default_seed() if args.seed is None else args.seed, output_dir=args.out)
    return _finish(run_sweep(config))


def cmd_aggregate(args) -> int:
    records = generate_synthetic(args.n_records, args.data_seed) if args.synthetic else load_csv(args.data)
    series = aggregate_death_counts(records, args.feature, args.bin_width)
    rows = list(zip(series.values, series.bin_edges[1:], series.counts))
    header = ("bin_start", "bin_end", "death_count")
    if args.out:
        _write_csv(Path(args.out), header, rows)
    else:
        print(",".join(header))
        for a, b, c in rows:
            print(f"{a!r},{b!r},{c}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_checks

    results = run_checks(args.instances, args.seed)
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_error)
        flag = "ok" if r.max_error < GRADCHECK_TOL else "FAIL"
        print(f"{r.name:24s} {r.max_error:.3e}  ({r.instances} instances, {r.seconds:.1f}s)  {flag}")
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_INVALID


def cmd_report(args) -> int:
    report = RunReport.load(args.dir)
    write_rankings(report, Path(args.dir) / RANKING_NAME)
    return _finish(report)


def cmd_synth(args) -> int:
    path = write_csv(generate_synthetic(args.n, args.seed), args.out)
    print(path)
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "train": cmd_train, "aggregate": cmd_aggregate,
            "gradcheck": cmd_gradcheck, "report": cmd_report, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        msg = f"file not found: {exc.filename}" if exc.filename else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
