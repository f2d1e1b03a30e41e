"""Command-line entry point: ``fga roundtrip|convergence|counterexample|diagnostics``.

Each run writes a CSV table and a one-line JSON summary into the output
directory. The exit status is 0 when every check passes, 1 when a check fails
and 2 for usage or configuration errors. ``FGA_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ._validation import FGAError
from .config import EXPERIMENT_NAMES, load_config

log = logging.getLogger("fga")

STUDY_COLUMNS = ("eps", "value", "runtime_s", "packets")
CHECK_COLUMNS = ("check", "value", "threshold", "passed", "error")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_result(result, out_dir: Path, csv_name: str, summary_name: str) -> tuple:
    """Write rows as CSV and the summary as a JSON-lines record; returns both paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / csv_name
    cols = STUDY_COLUMNS if result.rows and "eps" in result.rows[0] else CHECK_COLUMNS
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.rows:
            w.writerow([_fmt(row.get(c, "")) for c in cols])
    summary_path = out_dir / summary_name
    with open(summary_path, "w") as fh:
        fh.write(json.dumps(result.summary(), sort_keys=True, default=str) + "\n")
    return csv_path, summary_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fga", description="Frozen Gaussian approximation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENT_NAMES:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="flat key = value configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.experiment)
    except (FGAError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fga: error: {exc}", file=sys.stderr)
        return 2
    from .experiments import EXPERIMENTS

    threads = cfg.threads or (int(os.environ["FGA_THREADS"]) if os.environ.get("FGA_THREADS") else None)
    with threadpool_limits(limits=threads):
        try:
            result = EXPERIMENTS[cfg.experiment](cfg)
        except FGAError as exc:
            print(f"fga: {cfg.experiment} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
    csv_path, summary_path = write_result(result, Path(args.out), cfg.csv, cfg.summary)
    for row in result.rows:
        log.info("%s", row)
    status = "PASS" if result.passed else "FAIL"
    slope = f" slope={result.slope:.4f}" if result.slope is not None else ""
    print(f"{cfg.experiment}: {status}{slope} -> {csv_path}, {summary_path}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
