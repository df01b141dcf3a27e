"""``bench`` command line: run experiments and compare reports."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import jsonschema

from . import metrics
from .errors import FamError

log = logging.getLogger("dpufam.cli")

LOG_ENV = "DPUFAM_LOG_LEVEL"


def configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _write(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _spec_from_args(args) -> metrics.ExperimentSpec:
    base = metrics.load_spec_file(args.config) if args.config else {}
    return metrics.ExperimentSpec.from_dict(metrics.apply_overrides(base, args.set or []))


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    report = metrics.run_experiment(spec)
    _write(metrics.public(report), args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            r = json.load(fh)
        metrics.validate_report(r)
        reports.append(r)
    base = reports[-1]
    out = []
    for r in reports[:-1]:
        out.append(metrics.format_rows(metrics.compare(r, base), args.format))
    sys.stdout.write("\n".join(out))
    return 0


def cmd_matrix(args) -> int:
    spec = _spec_from_args(args)
    os.makedirs(args.out_dir, exist_ok=True)
    graph = metrics.build_graph(spec.graph)
    paths = []
    for cell in metrics.DEFAULT_MATRIX:
        s = metrics.ExperimentSpec.from_dict({**spec.to_dict(), **cell})
        report = metrics.run_experiment(s, graph)
        path = os.path.join(args.out_dir, f"{s.application}-{s.mode}-{s.cache_mode}.json")
        _write(metrics.public(report), path)
        paths.append((path, report))
    base = paths[0][1]
    for path, r in paths[1:]:
        sys.stdout.write(f"# {os.path.basename(path)} vs {os.path.basename(paths[0][0])}\n")
        sys.stdout.write(metrics.format_rows(metrics.compare(r, base), args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def spec_args(p):
        p.add_argument("--config", help="YAML or JSON experiment spec")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a spec field, dotted keys for sections")

    p = sub.add_parser("run", help="run one experiment")
    spec_args(p)
    p.add_argument("--out", default="-", help="report path ('-' for stdout)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="compare reports against the last one")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("matrix", help="direct / offload / offload+static on one spec")
    spec_args(p)
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(fn=cmd_matrix)
    return ap


def main(argv=None) -> int:
    configure_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.cmd == "compare" and len(args.reports) < 2:
        ap.error("compare needs at least two reports")
    try:
        return args.fn(args)
    except jsonschema.ValidationError as exc:
        print(f"bench: error: invalid report: {exc.message}", file=sys.stderr)
        return 2
    except (FamError, OSError, ValueError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
