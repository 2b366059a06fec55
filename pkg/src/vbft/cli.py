"""Command-line harness: run, check, sweep and bench scenarios.

Exit codes: 0 pass, 1 property violation (or a run that never reached its
stop condition), 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .auditor import HELD, audit, audit_latency, load_trace, parse_trace
from .errors import InvalidScenario, MalformedTrace, ParseError, StopNeverReached
from .scenario import bundled_scenarios, load_scenario, resolve
from .simnet import Scenario, dumps, run

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2


def run_scenario(
    scenario: Scenario,
    seed: int,
    out_path=None,
    until_height: Optional[int] = None,
    max_events: Optional[int] = None,
) -> tuple[list[dict], bool]:
    """Run one world and optionally write its trace.

    Returns ``(trace, reached)``; on a cap hit the partial trace is still written.
    """
    try:
        trace = run(scenario, seed, until_height=until_height, max_events=max_events)
        reached = True
    except StopNeverReached as exc:
        trace, reached = exc.trace, False
    if out_path is not None:
        Path(out_path).write_text(dumps(trace), encoding="utf-8")
    return trace, reached


def format_report(report, source: str = "") -> str:
    lines = [f"trace: {source}"] if source else []
    for p in report.properties:
        line = f"{'PASS' if p.ok else 'FAIL'} {p.name}"
        if not p.ok:
            line += f": {p.detail} (records {p.counterexamples})"
        lines.append(line)
    legal = sorted(s for s, v in report.s_safety.items() if v != HELD)
    if legal:
        lines.append("s-safety: " + ", ".join(f"seq {s} {report.s_safety[s]}" for s in legal))
    lines.append(f"revocations: {report.metrics.get('revocations', 0)}")
    lat = report.metrics.get("latency", {})
    lines.append(f"commit depth: {lat.get('commit_depth', {})}  confirm depth: {lat.get('confirm_depth', {})}")
    lines.append("verdict: " + ("PASS" if report.ok else "FAIL"))
    return "\n".join(lines)


def _load(args) -> Scenario:
    return load_scenario(resolve(args.scenario))


def cmd_run(args) -> int:
    scenario = _load(args)
    trace, reached = run_scenario(scenario, args.seed, args.out, args.until_height, args.max_events)
    if args.out is None:
        sys.stdout.write(dumps(trace))
    if not reached:
        print(f"stop condition not reached: {trace[-1]}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_check(args) -> int:
    trace = load_trace(args.trace)
    report = audit(trace)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        print(format_report(report, args.trace))
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_sweep(args) -> int:
    scenario = _load(args)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for seed in range(args.seed, args.seed + args.count):
        path = out_dir / f"{scenario.name or 'scenario'}-{seed}.jsonl" if out_dir else None
        trace, reached = run_scenario(scenario, seed, path, args.until_height, args.max_events)
        report = audit(parse_trace(dumps(trace)))
        bad = [p.name for p in report.properties if not p.ok]
        if not reached:
            bad.insert(0, "stop")
        failures += bool(bad)
        print(f"seed {seed}: {'FAIL ' + ','.join(bad) if bad else 'PASS'}")
    print(f"{args.count - failures}/{args.count} seeds passed")
    return EXIT_VIOLATION if failures else EXIT_OK


def cmd_bench(args) -> int:
    scenario = _load(args)
    trace, reached = run_scenario(scenario, args.seed, args.out, args.until_height, args.max_events)
    print(json.dumps(audit_latency(parse_trace(dumps(trace))), sort_keys=True, indent=2))
    return EXIT_OK if reached else EXIT_VIOLATION


def cmd_list(args) -> int:
    for name in sorted(bundled_scenarios()):
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p, seed_default=0):
        p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--until-height", type=int, default=None, help="override the scenario's stop height")
        p.add_argument("--max-events", type=int, default=None, help="override the event cap")

    p = sub.add_parser("run", help="simulate one seed and write its trace")
    scenario_args(p)
    p.add_argument("--out", default=None, help="trace path (stdout if omitted)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="audit a trace file")
    p.add_argument("trace")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="run and audit a range of seeds")
    scenario_args(p, seed_default=1)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", default=None, help="directory for the traces")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="latency histograms for one seed")
    scenario_args(p)
    p.add_argument("--out", default=None, help="also write the trace here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("list", help="show bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ParseError, InvalidScenario, MalformedTrace) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
