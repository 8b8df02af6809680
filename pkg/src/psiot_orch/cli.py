"""Command line entry point: ``psiot run|validate|export``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from .model import ValidationError
from .netsim import LINK_COLUMNS, METRIC_COLUMNS, run
from .scenario import BUILTINS, ParseError, dumps, parse_scenario, scenario_to_dict

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _jsonl(columns, rows) -> str:
    return "".join(json.dumps(dict(zip(columns, r)), separators=(",", ":")) + "\n" for r in rows)


def manifest(scenario, seed: int, fmt: str) -> dict:
    return {
        "tool": "psiot-orch",
        "version": __version__,
        "seed": seed,
        "format": fmt,
        "scenario": scenario_to_dict(scenario),
    }


def load(args):
    if args.builtin:
        return BUILTINS[args.builtin]()
    return parse_scenario(args.scenario)


def write_outputs(out: Path, result, scenario, seed: int, fmt: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write = _csv if fmt == "csv" else _jsonl
    (out / f"metrics.{fmt}").write_text(write(METRIC_COLUMNS, result.metrics.rows))
    (out / f"links.{fmt}").write_text(write(LINK_COLUMNS, result.metrics.link_rows))
    (out / "events.jsonl").write_text(result.events.to_jsonl())
    (out / "manifest.json").write_text(json.dumps(manifest(scenario, seed, fmt), indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2) + "\n")


def cmd_run(args) -> int:
    try:
        scenario = load(args)
    except (ParseError, ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    seed = args.seed if args.seed is not None else scenario.sim.seed
    try:
        result = run(scenario, seed)
    except AssertionError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    if args.out:
        write_outputs(Path(args.out), result, scenario, seed, args.format)
    if args.summary:
        print(json.dumps(result.summary, indent=2))
    if result.fatal:
        print("internal error: simulator invariant violated (see fatal events)", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        s = load(args)
    except (ParseError, ValidationError, OSError) as e:
        issues = getattr(e, "issues", None)
        for i in issues or [e]:
            print(f"error: {i}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {s.name} ({len(s.aggregators)} aggregators, {len(s.consumers)} consumers, "
          f"{s.end_tick} ticks)")
    return EXIT_OK


def cmd_export(args) -> int:
    text = dumps(BUILTINS[args.name]())
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return EXIT_OK


def _add_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("scenario", nargs="?", help="scenario JSON file or run manifest")
    g.add_argument("--builtin", choices=sorted(BUILTINS), help="use a built-in scenario")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psiot", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write metrics")
    _add_source(p)
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--summary", action="store_true", help="print a JSON summary to stdout")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario file")
    _add_source(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export", help="write a built-in scenario as JSON")
    p.add_argument("name", choices=sorted(BUILTINS))
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
