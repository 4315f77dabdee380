"""Command line entry points: run a scenario, verify an export, summarize a run.

Exit codes: 0 success; 2 scenario schema violation; 3 invariant breach
during a run; 1 verification failure or missing artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .ledgerio import verify_export, write_artifacts
from .runner import InvariantBreach, Runner
from .scenario import SchemaError, bundled_scenario_names, load_bundled, load_scenario


def _setup_logging() -> None:
    level = os.environ.get("CBDCSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(name)s: %(message)s")


def _load(path: str):
    if Path(path).exists():
        return load_scenario(path)
    if path in bundled_scenario_names():
        return load_bundled(path)
    raise SchemaError(path, "no such scenario file or bundled scenario name")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.scenario)
    except SchemaError as exc:
        print(f"scenario rejected: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    trace_lines: list[str] = []
    trace = trace_lines.append if args.trace else None
    runner = Runner(cfg, trace=trace)
    try:
        metrics = runner.run()
    except InvariantBreach as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out)
    paths = write_artifacts(runner, out)
    if args.trace:
        (out / "trace.log").write_text("\n".join(trace_lines) + "\n")
    print(f"scenario {cfg.name} (seed {cfg.seed}) committed {metrics.blocks} blocks, "
          f"{metrics.entries_applied} entries, {metrics.anomalies} anomalies")
    print(f"artifacts in {out}: " + ", ".join(p.name for p in paths.values()))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    result = verify_export(args.ledger, args.genesis)
    print(result.message())
    return 0 if result.ok else 1


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    needed = [out / "metrics.json", out / "genesis.json", out / "regulator.csv", out / "treasury.csv"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        print(f"missing artifacts: {', '.join(missing)}", file=sys.stderr)
        return 1
    metrics = json.loads((out / "metrics.json").read_text())
    genesis = json.loads((out / "genesis.json").read_text())
    print(f"scenario: {genesis['scenario']} (seed {genesis['seed']})")
    print(f"blocks committed: {metrics['blocks']}, entries applied: {metrics['entries_applied']}")
    with open(out / "regulator.csv") as fh:
        rows = list(csv.reader(fh))
    if len(rows) > 1:
        header, last = rows[0], rows[-1]
        supply = [
            f"v{col.split('_v')[1]}: {value}"
            for col, value in zip(header, last)
            if col.startswith("outstanding_v")
        ]
        print(f"supply by vintage: {', '.join(supply)} (total {last[header.index('outstanding_face')]}, "
              f"discounted {last[header.index('discounted_value')]})")
    else:
        print("supply by vintage: empty ledger")
    with open(out / "treasury.csv") as fh:
        trows = list(csv.reader(fh))
    if len(trows) > 1:
        theader, tlast = trows[0], trows[-1]
        print(f"treasury: tax {tlast[theader.index('tax')]}, subsidy {tlast[theader.index('subsidy')]}, "
              f"stimulus disbursed {tlast[theader.index('stimulus_disbursed')]}")
    print(f"anomalies: {metrics['anomalies']}")
    print(f"throughput: {metrics['throughput_tx_per_sec']} committed token tx/s "
          f"(wall {metrics['wall_seconds']}s)")
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="cbdcsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cbdcsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario and write artifacts")
    p_run.add_argument("scenario", help="scenario file path or bundled scenario name")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--trace", action="store_true", help="write a per-delivery trace log")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="re-verify an exported ledger against its genesis")
    p_verify.add_argument("ledger")
    p_verify.add_argument("genesis")
    p_verify.set_defaults(func=cmd_verify)

    p_report = sub.add_parser("report", help="summarize the artifacts of a completed run")
    p_report.add_argument("out")
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
