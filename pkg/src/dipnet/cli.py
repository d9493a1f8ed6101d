"""Command-line front end: ``dipnet run|validate|sweep|demo-mule``."""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

from . import scenario as scn
from .metrics import FLOW_COLUMNS, cell, write_csv
from .packet import Longevity
from .scenario import InvalidScenario
from .sim import InvalidParameter, build_data_mule, simulate

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_SCENARIO, EXIT_USAGE = 0, 1, 2
FORMATS = ("csv", "jsonl")


class UsageError(Exception):
    pass


def _parse_set(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise UsageError(f"--set expects PATH=VALUE, got {text!r}")
    path, value = text.split("=", 1)
    return path.strip(), value.strip()


def _formats(text: str) -> list[str]:
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in FORMATS]
    if bad or not out:
        raise UsageError(f"--format takes a comma list of {', '.join(FORMATS)}, got {text!r}")
    return out


def _overrides(args) -> list[tuple[str, str]]:
    """--set pairs plus the dedicated flags, which win over --set."""
    pairs = [_parse_set(s) for s in args.set or ()]
    if getattr(args, "seed", None) is not None:
        pairs.append(("scenario.seed", str(args.seed)))
    if getattr(args, "duration", None) is not None:
        pairs.append(("scenario.duration_s", str(args.duration)))
    if getattr(args, "mode", None) is not None:
        pairs.append(("scenario.mode", args.mode))
    return pairs


def _load(path: str, overrides) -> scn.Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc.strerror}") from None
    return scn.loads(text, overrides)


def _summary_lines(report) -> list[str]:
    lines = []
    for row in report.flows:
        lines.append(
            f"{row['flow']}: emitted {row['emitted']} delivered {row['delivered']} "
            f"ratio {row['delivery_ratio']:.4f}"
        )
    lines.append("conservation " + ("holds" if report.conserved else "VIOLATED"))
    return lines


def cmd_validate(args) -> int:
    s = _load(args.scenario, _overrides(args))
    print(f"ok: {len(s.nodes)} nodes, {len(s.links)} links, {len(s.routes)} routes, "
          f"{len(s.flows)} flows, {scn.fmt_number(s.duration_s)} s")
    return EXIT_OK


def cmd_run(args) -> int:
    s = _load(args.scenario, _overrides(args))
    formats = _formats(args.format)
    report = simulate(s, record_events=args.events)
    if args.out:
        report.write(args.out, formats)
    for line in _summary_lines(report):
        print(line)
    return EXIT_OK


def _run_point(job) -> list[dict[str, str]]:
    text, overrides, out_dir, formats, events = job
    report = simulate(scn.loads(text, overrides), record_events=events)
    report.write(out_dir, formats)
    return report.rows("flows")


def cmd_sweep(args) -> int:
    if not args.set:
        raise UsageError("sweep needs at least one --set PATH=V1,V2,...")
    if not args.out:
        raise UsageError("sweep needs --out DIR")
    formats = _formats(args.format)
    axes = []
    for item in args.set:
        path, values = _parse_set(item)
        choices = [v.strip() for v in values.split(",")]
        if not all(choices):
            raise UsageError(f"empty value in --set {item!r}")
        axes.append((path, choices))
    try:
        with open(args.scenario, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read scenario {args.scenario}: {exc.strerror}") from None
    fixed = _overrides(argparse.Namespace(set=(), seed=args.seed, duration=args.duration, mode=args.mode))

    paths = [p for p, _ in axes]
    points = list(itertools.product(*(vals for _, vals in axes)))
    jobs = []
    for i, values in enumerate(points):
        overrides = list(zip(paths, values)) + fixed
        scn.loads(text, overrides)  # surface scenario errors before running anything
        jobs.append((text, overrides, os.path.join(args.out, f"point-{i:03d}"), formats, args.events))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(job) for job in jobs]

    columns = ["point", *paths, *FLOW_COLUMNS]
    rows = []
    for i, (values, flows) in enumerate(zip(points, results)):
        for flow in flows:
            rows.append({"point": cell(i), **dict(zip(paths, values)), **flow})
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "summary.csv"), columns, rows)
    print(f"{len(points)} points written to {args.out}")
    return EXIT_OK


def cmd_demo_mule(args) -> int:
    try:
        s = build_data_mule(
            contact_s=args.contact_s, gap_s=args.gap_s, duration_s=args.duration,
            mode=args.mode or "dip", longevity=Longevity.from_name(args.longevity),
            rate_pps=args.rate_pps, size_bytes=args.size_bytes, seed=args.seed,
        )
    except InvalidParameter as exc:
        raise UsageError(str(exc)) from None
    text = scn.dumps(s)
    if args.output and args.output != "-":
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipnet", description="Disruption-tolerant IP forwarding simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log more (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_outputs=True):
        p.add_argument("scenario", help="scenario file")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a field, e.g. link.a-mule.delay_s=0.5 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--duration", type=float, metavar="SECONDS")
        p.add_argument("--mode", choices=scn.MODES)
        if with_outputs:
            p.add_argument("--out", metavar="DIR", help="report directory")
            p.add_argument("--format", default="csv", help="comma list of csv,jsonl (default csv)")
            p.add_argument("--events", action="store_true", help="also write events.jsonl, one object per verdict")

    p = sub.add_parser("run", help="run a scenario and write its report")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="parse and check a scenario")
    common(p, with_outputs=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sweep", help="run the cross product of --set PATH=V1,V2,... overrides")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="points to run in parallel")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("demo-mule", help="emit the built-in data-mule scenario")
    p.add_argument("-o", "--output", help="file to write (default stdout)")
    p.add_argument("--contact-s", type=float, default=60.0)
    p.add_argument("--gap-s", type=float, default=240.0)
    p.add_argument("--duration", type=float, default=7200.0)
    p.add_argument("--mode", choices=scn.MODES)
    p.add_argument("--longevity", default="days", choices=[c.name.lower() for c in Longevity])
    p.add_argument("--rate-pps", type=float, default=1.0)
    p.add_argument("--size-bytes", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_demo_mule)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidScenario as exc:
        print(f"dipnet: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except UsageError as exc:
        print(f"dipnet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
