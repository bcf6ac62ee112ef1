"""Command-line entry point: ``misalign {sweep,fuse-demo,evaluate,schema}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import load_config
from .errors import ConfigError, MisalignError, NumericalFailure
from .experiment import (
    REPORT_FILES,
    SCHEMAS,
    SUMMARY_KEYS,
    TRACE_COLUMNS,
    demo_fusion,
    evaluate,
    report,
    run_sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("misalign")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--snippets", type=int, help="number of snippets")
    p.add_argument("--noise-px", type=float, help="pixel noise sigma")
    p.add_argument("--jobs", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misalign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="run the fault-injection sweep and write reports")
    _common(p)

    p = sub.add_parser("fuse-demo", help="write a per-frame fusion trace for one snippet")
    _common(p)
    p.add_argument("--snippet-id", type=int, default=0)
    p.add_argument("--noise-spread", type=float, help="per-frame noise ratio (heteroscedastic when > 1)")

    p = sub.add_parser("evaluate", help="re-score an existing sweep directory")
    p.add_argument("results", help="directory written by 'sweep'")
    p.add_argument("--config", help="JSON config supplying fusion/metrics settings")
    p.add_argument("--out", help="output directory (default: the results directory)")

    sub.add_parser("schema", help="print the report schemas as JSON")
    return parser


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        output=args.out,
        n_snippets=args.snippets,
        noise_px=args.noise_px,
        jobs=args.jobs,
        noise_spread=getattr(args, "noise_spread", None),
    )


def _run(args) -> int:
    if args.command == "schema":
        doc = {name: cols for name, cols in SCHEMAS.items()}
        doc["summary.json"] = SUMMARY_KEYS
        doc["fusion_trace.csv"] = TRACE_COLUMNS
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    if args.command == "evaluate":
        cfg = load_config(args.config) if args.config else None
        paths = evaluate(args.results, args.out, cfg)
        print("\n".join(str(p) for p in paths.values()))
        return EXIT_OK

    cfg = _config(args)
    if args.command == "sweep":
        results = report(run_sweep(cfg), cfg)
        for name in REPORT_FILES:
            print(results[name])
    else:
        print(demo_fusion(cfg, snippet_id=args.snippet_id))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, MisalignError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
