"""Simulation report: per-node, per-flow, per-link, occupancy and delivery tables.

Every table is a list of plain dicts with a fixed column order, so CSV and
JSON Lines output are deterministic and a report read back from disk compares
equal, cell for cell, to the one that was written.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .engine import DropReason

DROP_COLUMNS = [f"drop_{r.value}" for r in DropReason]

NODE_COLUMNS = ["node", "ingress", "delivered", "forwarded", "reinjected", "park_verdicts",
                "parked_at_end", *DROP_COLUMNS]
FLOW_COLUMNS = ["flow", "src", "dst", "emitted", "emitted_copies", "delivered", "delivered_copies",
                "delivery_ratio", "latency_min_s", "latency_mean_s", "latency_max_s", "latency_p95_s"]
LINK_COLUMNS = ["link", "a", "b", "packets_carried", "bytes_carried", "packets_lost"]
OCCUPANCY_COLUMNS = ["time_s", "node", "packets", "bytes"]
DELIVERY_COLUMNS = ["flow", "seq", "emit_time_s", "deliver_time_s", "latency_s"]
TOTAL_COLUMNS = ["emitted_copies", "delivered_copies", "in_flight", "parked", "dropped",
                 "link_losses", "conserved"]

TABLES = {
    "nodes": NODE_COLUMNS,
    "flows": FLOW_COLUMNS,
    "links": LINK_COLUMNS,
    "occupancy": OCCUPANCY_COLUMNS,
    "deliveries": DELIVERY_COLUMNS,
    "totals": TOTAL_COLUMNS,
}


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile of a non-empty list."""
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def cell(value) -> str:
    """Deterministic text for one report cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class MetricsReport:
    nodes: list[dict] = field(default_factory=list)
    flows: list[dict] = field(default_factory=list)
    links: list[dict] = field(default_factory=list)
    occupancy: list[dict] = field(default_factory=list)
    deliveries: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    events: Optional[list[dict]] = None

    def table(self, name: str) -> list[dict]:
        return [self.totals] if name == "totals" else getattr(self, name)

    def rows(self, name: str) -> list[dict[str, str]]:
        """Table ``name`` with every cell rendered as text."""
        cols = TABLES[name]
        return [{c: cell(row.get(c)) for c in cols} for row in self.table(name)]

    def flow(self, name: str) -> dict:
        for row in self.flows:
            if row["flow"] == name:
                return row
        raise KeyError(name)

    def node(self, name: str) -> dict:
        for row in self.nodes:
            if row["node"] == name:
                return row
        raise KeyError(name)

    @property
    def conserved(self) -> bool:
        return bool(self.totals.get("conserved"))

    def write(self, out_dir, formats: Iterable[str] = ("csv",)) -> list[str]:
        """Write the report under ``out_dir``; returns the paths written."""
        os.makedirs(out_dir, exist_ok=True)
        written = []
        formats = set(formats)
        if "csv" in formats:
            for name in TABLES:
                path = os.path.join(out_dir, f"{name}.csv")
                write_csv(path, TABLES[name], self.rows(name))
                written.append(path)
        if "jsonl" in formats:
            path = os.path.join(out_dir, "metrics.jsonl")
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for name in TABLES:
                    for row in self.table(name):
                        record = {"table": name, **{c: row.get(c) for c in TABLES[name]}}
                        fh.write(json.dumps(record, sort_keys=False) + "\n")
            written.append(path)
        if self.events is not None:
            path = os.path.join(out_dir, "events.jsonl")
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for record in self.events:
                    fh.write(json.dumps(record) + "\n")
            written.append(path)
        return written


def write_csv(path, columns: list[str], rows: list[dict[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def read_report(out_dir) -> dict[str, list[dict[str, str]]]:
    """Read back the CSV tables written by :meth:`MetricsReport.write`."""
    return {name: read_csv(os.path.join(out_dir, f"{name}.csv"))[1] for name in TABLES}
