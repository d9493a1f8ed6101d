"""Scenario model, validation, and the sectioned key-value scenario format.

The format is line oriented::

    # comment
    [scenario]
    duration_s = 7200

    [node mule]
    addresses = 10.0.0.1

    [link a-mule]
    a = house-a
    b = mule
    ...

See ``docs/scenario-format.md`` for every section and key.
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .engine import NodeConfig
from .lifetime import LifetimeWheel
from .packet import HEADER_LEN, MAX_TOTAL_LENGTH, Longevity, int_to_ip, ip_to_int
from .prefix import Prefix
from .routing import RouteSource
from .store import HeadDrop, Red, TailDrop

#: Payload bytes used to tag each flow packet with (flow index, sequence number).
FLOW_TAG_LEN = 8
MIN_FLOW_PACKET = HEADER_LEN + FLOW_TAG_LEN

MODES = ("dip", "plain-ip")


class InvalidScenario(ValueError):
    """A scenario problem, located by a dotted field path (or a line number)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


# -- schedules ------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """When something (a link, a scheduled route) is up.

    Either explicit half-open ``[start, end)`` intervals, a periodic pattern
    (``up`` seconds at the start of every ``period``, beginning at
    ``offset``), or always up.
    """

    intervals: tuple[tuple[float, float], ...] = ()
    period: Optional[float] = None
    up: Optional[float] = None
    offset: float = 0.0
    always: bool = False

    def __post_init__(self) -> None:
        # touching intervals are one continuous up period
        merged: list[tuple[float, float]] = []
        for start, end in self.intervals:
            if merged and start <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(end, merged[-1][1]))
            else:
                merged.append((float(start), float(end)))
        object.__setattr__(self, "intervals", tuple(merged))

    @classmethod
    def periodic(cls, period: float, up: float, offset: float = 0.0) -> "Schedule":
        return cls(period=period, up=up, offset=offset)

    @property
    def is_periodic(self) -> bool:
        return self.period is not None

    def _current(self, t: float) -> Optional[tuple[float, float]]:
        """The up interval containing ``t``, if any."""
        if self.always:
            return (-math.inf, math.inf)
        if self.is_periodic:
            if t < self.offset:
                return None
            if self.up >= self.period:
                return (self.offset, math.inf)
            n = math.floor((t - self.offset) / self.period)
            start = self.offset + n * self.period
            end = start + self.up
            return (start, end) if start <= t < end else None
        i = bisect.bisect_right(self.intervals, (t, math.inf)) - 1
        if i >= 0 and self.intervals[i][0] <= t < self.intervals[i][1]:
            return self.intervals[i]
        return None

    def is_up(self, t: float) -> bool:
        return self._current(t) is not None

    def up_through(self, a: float, b: float) -> bool:
        """Up for the whole of ``[a, b]``."""
        cur = self._current(a)
        return cur is not None and b < cur[1]

    def edges(self, until: float) -> list[tuple[float, bool]]:
        """State transitions ``(time, up)`` at times in ``[0, until]``."""
        if self.always:
            return [(0.0, True)]
        if not self.is_periodic:
            out = []
            for start, end in self.intervals:
                if start > until:
                    break
                out.append((start, True))
                if end <= until:
                    out.append((end, False))
            return out
        if self.up >= self.period:
            return [(self.offset, True)] if self.offset <= until else []
        out = []
        n = 0
        while True:
            start = self.offset + n * self.period
            if start > until:
                break
            out.append((start, True))
            if start + self.up <= until:
                out.append((start + self.up, False))
            n += 1
        return out


# -- scenario model -------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    name: str
    addresses: tuple[int, ...]
    engine: dict = field(default_factory=dict, hash=False)

    @property
    def address(self) -> int:
        return self.addresses[0]


@dataclass(frozen=True)
class LinkSpec:
    name: str
    a: str
    b: str
    bandwidth_bytes_per_s: float
    delay_s: float = 0.0
    schedule: Schedule = Schedule(always=True)
    up_detect_s: float = 0.0
    down_detect_s: float = 0.0

    def peer(self, node: str) -> str:
        return self.b if node == self.a else self.a


@dataclass(frozen=True)
class RouteSpec:
    name: str
    node: str
    prefix: Prefix
    via: str
    source: RouteSource = RouteSource.STATIC
    schedule: Optional[Schedule] = None


@dataclass(frozen=True)
class FlowSpec:
    name: str
    src: str
    dst: str
    size_bytes: int = 100
    rate_pps: float = 1.0
    start_s: float = 0.0
    end_s: Optional[float] = None
    service_class: int = 0
    longevity: Longevity = Longevity.DAYS
    retransmit: int = 1
    retransmit_interval_s: float = 0.0


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    routes: tuple[RouteSpec, ...] = ()
    flows: tuple[FlowSpec, ...] = ()
    duration_s: float = 60.0
    seed: int = 1
    mode: str = "dip"
    engine: dict = field(default_factory=dict, hash=False)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def node_config(self, name: str) -> NodeConfig:
        values = dict(self.engine)
        values.update(self.node(name).engine)
        return engine_config(values, parking=self.mode == "dip")


# -- engine settings --------------------------------------------------------------

_ENGINE_FLOAT = {"tick_s", "shaper_rate_bytes_per_s", "shaper_burst_bytes", "pacing_interval_s",
                 "bloom_fpr", "red_min_th", "red_max_th", "red_max_p", "red_ewma_weight"}
_ENGINE_INT = {"backpressure_threshold_bytes", "link_queue_limit_bytes", "store_capacity_bytes",
               "buckets", "bucket_depth_packets", "bucket_limit_bytes", "bloom_capacity"}
_ENGINE_STR = {"drop_policy", "digest_key"}
ENGINE_KEYS = _ENGINE_FLOAT | _ENGINE_INT | _ENGINE_STR
DROP_POLICIES = ("tail", "head", "red")


def engine_config(values: dict, parking: bool = True) -> NodeConfig:
    """Build a :class:`NodeConfig` from typed engine settings."""
    kwargs: dict[str, Any] = {}
    for f in fields(NodeConfig):
        if f.name in values:
            kwargs[f.name] = values[f.name]
    policy = values.get("drop_policy", "tail")
    if policy == "head":
        kwargs["drop_policy"] = HeadDrop()
    elif policy == "red":
        kwargs["drop_policy"] = Red(
            values.get("red_min_th", 5.0),
            values.get("red_max_th", 15.0),
            values.get("red_max_p", 0.1),
            values.get("red_ewma_weight", 0.002),
        )
    else:
        kwargs["drop_policy"] = TailDrop()
    if "digest_key" in values:
        kwargs["digest_key"] = values["digest_key"].encode()
    kwargs["parking"] = parking
    return NodeConfig(**kwargs)


# -- text format --------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[\s*([a-z]+)(?:\s+([A-Za-z0-9_.:-]+))?\s*\]$")
SINGLETON_SECTIONS = ("scenario", "engine")
NAMED_SECTIONS = ("node", "link", "route", "flow")


@dataclass
class Section:
    kind: str
    name: Optional[str]
    items: dict[str, str]
    line: int = 0

    @property
    def path(self) -> str:
        return self.kind if self.name is None else f"{self.kind}.{self.name}"


def parse_sections(text: str) -> list[Section]:
    sections: list[Section] = []
    seen: set[str] = set()
    current: Optional[Section] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            kind, name = m.group(1), m.group(2)
            if kind in SINGLETON_SECTIONS and name is not None:
                raise InvalidScenario(f"line {lineno}", f"[{kind}] takes no name")
            if kind in NAMED_SECTIONS and name is None:
                raise InvalidScenario(f"line {lineno}", f"[{kind}] needs a name")
            if kind not in SINGLETON_SECTIONS + NAMED_SECTIONS:
                raise InvalidScenario(f"line {lineno}", f"unknown section [{kind}]")
            current = Section(kind, name, {}, lineno)
            if current.path in seen:
                raise InvalidScenario(f"line {lineno}", f"duplicate section {current.path}")
            seen.add(current.path)
            sections.append(current)
            continue
        if "=" not in line:
            raise InvalidScenario(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise InvalidScenario(f"line {lineno}", "key outside of any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in current.items:
            raise InvalidScenario(f"{current.path}.{key}", f"repeated key (line {lineno})")
        current.items[key] = value
    return sections


def apply_override(sections: list[Section], path: str, value: str) -> None:
    """Set ``kind[.name].key = value`` on parsed sections, before validation."""
    parts = path.split(".")
    if len(parts) == 2 and parts[0] in SINGLETON_SECTIONS:
        kind, name, key = parts[0], None, parts[1]
    elif len(parts) == 3 and parts[0] in NAMED_SECTIONS:
        kind, name, key = parts
    else:
        raise InvalidScenario(path, "override path must be 'scenario.KEY', 'engine.KEY' or 'KIND.NAME.KEY'")
    for sec in sections:
        if sec.kind == kind and sec.name == name:
            sec.items[key] = value
            return
    if kind in SINGLETON_SECTIONS:
        sections.append(Section(kind, None, {key: value}))
        return
    raise InvalidScenario(path, f"no [{kind} {name}] section to override")


class _Fields:
    """Typed access to one section's keys, with path-qualified errors."""

    def __init__(self, section: Section, allowed: set[str]):
        self.sec = section
        self.used: set[str] = set()
        for key in section.items:
            if key not in allowed:
                raise InvalidScenario(f"{section.path}.{key}", "unknown key")

    def path(self, key: str) -> str:
        return f"{self.sec.path}.{key}"

    def has(self, key: str) -> bool:
        return key in self.sec.items

    def raw(self, key: str, default: Optional[str] = None) -> Optional[str]:
        if key not in self.sec.items:
            if default is None:
                raise InvalidScenario(self.path(key), "missing required key")
            return default
        return self.sec.items[key]

    def num(self, key: str, default: Optional[float] = None, *, minimum: float = -math.inf,
            strict: bool = False, integer: bool = False):
        text = self.raw(key, None if default is None else str(default))
        try:
            value = int(text) if integer else float(text)
        except ValueError:
            kind = "an integer" if integer else "a number"
            raise InvalidScenario(self.path(key), f"expected {kind}, got {text!r}") from None
        if not math.isfinite(value):
            raise InvalidScenario(self.path(key), "must be finite")
        if value < minimum or (strict and value == minimum):
            op = ">" if strict else ">="
            raise InvalidScenario(self.path(key), f"must be {op} {minimum:g}, got {text}")
        return value

    def choice(self, key: str, options, default: Optional[str] = None) -> str:
        text = self.raw(key, default)
        if text not in options:
            raise InvalidScenario(self.path(key), f"expected one of {', '.join(options)}, got {text!r}")
        return text


def _parse_engine(f: _Fields) -> dict:
    values: dict[str, Any] = {}
    for key in sorted(f.sec.items):
        if key in _ENGINE_FLOAT:
            values[key] = f.num(key)
        elif key in _ENGINE_INT:
            values[key] = f.num(key, integer=True)
        elif key == "drop_policy":
            values[key] = f.choice(key, DROP_POLICIES)
        else:
            values[key] = f.raw(key)
    try:
        engine_config(values)
    except ValueError as exc:
        raise InvalidScenario(f.sec.path, str(exc)) from None
    if "tick_s" in values:
        try:
            LifetimeWheel(values["tick_s"])
        except ValueError as exc:
            raise InvalidScenario(f.path("tick_s"), str(exc)) from None
    return values


_SCHEDULE_KEYS = {"schedule", "schedule_period_s", "schedule_up_s", "schedule_offset_s", "schedule_intervals_s"}


def _parse_schedule(f: _Fields, default: str) -> Schedule:
    kind = f.choice("schedule", ("always", "never", "periodic", "intervals"), default)
    if kind == "always":
        return Schedule(always=True)
    if kind == "never":
        return Schedule()
    if kind == "periodic":
        period = f.num("schedule_period_s", minimum=0, strict=True)
        up = f.num("schedule_up_s", minimum=0, strict=True)
        offset = f.num("schedule_offset_s", 0.0, minimum=0)
        if up > period:
            raise InvalidScenario(f.path("schedule_up_s"), "must not exceed schedule_period_s")
        return Schedule.periodic(period, up, offset)
    text = f.raw("schedule_intervals_s")
    intervals = []
    for token in text.replace(",", " ").split():
        try:
            start, end = (float(x) for x in token.split(":"))
        except ValueError:
            raise InvalidScenario(f.path("schedule_intervals_s"), f"bad interval {token!r}, want START:END") from None
        if not start < end:
            raise InvalidScenario(f.path("schedule_intervals_s"), f"empty interval {token!r}")
        if intervals and start < intervals[-1][1]:
            raise InvalidScenario(f.path("schedule_intervals_s"), "intervals must be sorted and disjoint")
        intervals.append((start, end))
    return Schedule(tuple(intervals))


def build_scenario(sections: list[Section]) -> Scenario:
    """Validate parsed sections into a :class:`Scenario`."""
    by_kind: dict[str, list[Section]] = {k: [] for k in SINGLETON_SECTIONS + NAMED_SECTIONS}
    for sec in sections:
        by_kind[sec.kind].append(sec)

    top = _Fields(by_kind["scenario"][0] if by_kind["scenario"] else Section("scenario", None, {}),
                  {"duration_s", "seed", "mode"})
    duration = top.num("duration_s", minimum=0, strict=True)
    seed = top.num("seed", 1, integer=True)
    mode = top.choice("mode", MODES, "dip")
    engine = _parse_engine(_Fields(by_kind["engine"][0], ENGINE_KEYS)) if by_kind["engine"] else {}

    nodes = []
    owner: dict[int, str] = {}
    for sec in by_kind["node"]:
        f = _Fields(sec, {"addresses"} | ENGINE_KEYS)
        addrs = []
        for token in f.raw("addresses").replace(",", " ").split():
            try:
                addr = ip_to_int(token)
            except ValueError:
                raise InvalidScenario(f.path("addresses"), f"bad IPv4 address {token!r}") from None
            if addr in owner:
                raise InvalidScenario(f.path("addresses"), f"{token} already assigned to node {owner[addr]}")
            owner[addr] = sec.name
            addrs.append(addr)
        if not addrs:
            raise InvalidScenario(f.path("addresses"), "needs at least one address")
        overrides = {k: v for k, v in sec.items.items() if k != "addresses"}
        typed = _parse_engine(_Fields(Section(sec.kind, sec.name, overrides), ENGINE_KEYS))
        try:
            engine_config({**engine, **typed})
        except ValueError as exc:
            raise InvalidScenario(sec.path, str(exc)) from None
        nodes.append(NodeSpec(sec.name, tuple(addrs), typed))
    if not nodes:
        raise InvalidScenario("node", "scenario declares no nodes")
    names = {n.name for n in nodes}

    def node_ref(f: _Fields, key: str) -> str:
        name = f.raw(key)
        if name not in names:
            raise InvalidScenario(f.path(key), f"unknown node {name!r}")
        return name

    links = []
    for sec in by_kind["link"]:
        f = _Fields(sec, {"a", "b", "bandwidth_bytes_per_s", "delay_s", "up_detect_s", "down_detect_s"} | _SCHEDULE_KEYS)
        a, b = node_ref(f, "a"), node_ref(f, "b")
        if a == b:
            raise InvalidScenario(f.path("b"), "a link needs two distinct endpoints")
        if any({l.a, l.b} == {a, b} for l in links):
            raise InvalidScenario(f.path("b"), f"{a} and {b} are already linked")
        links.append(LinkSpec(
            sec.name, a, b,
            bandwidth_bytes_per_s=f.num("bandwidth_bytes_per_s", minimum=0, strict=True),
            delay_s=f.num("delay_s", 0.0, minimum=0),
            schedule=_parse_schedule(f, "always"),
            up_detect_s=f.num("up_detect_s", 0.0, minimum=0),
            down_detect_s=f.num("down_detect_s", 0.0, minimum=0),
        ))
    adjacent = {(l.a, l.b) for l in links} | {(l.b, l.a) for l in links}

    routes = []
    for sec in by_kind["route"]:
        f = _Fields(sec, {"node", "prefix", "via", "source"} | _SCHEDULE_KEYS)
        node, via = node_ref(f, "node"), node_ref(f, "via")
        if (node, via) not in adjacent:
            raise InvalidScenario(f.path("via"), f"{via} is not a neighbor of {node}")
        try:
            prefix = Prefix.parse(f.raw("prefix"))
        except ValueError as exc:
            raise InvalidScenario(f.path("prefix"), str(exc)) from None
        source = RouteSource(f.choice("source", [s.value for s in RouteSource], "static"))
        schedule = None
        if source is RouteSource.SCHEDULED:
            schedule = _parse_schedule(f, "always")
        elif any(f.has(k) for k in _SCHEDULE_KEYS):
            raise InvalidScenario(f.path("schedule"), "only scheduled routes take a schedule")
        routes.append(RouteSpec(sec.name, node, prefix, via, source, schedule))

    flows = []
    for sec in by_kind["flow"]:
        f = _Fields(sec, {"src", "dst", "size_bytes", "rate_pps", "start_s", "end_s", "service_class",
                          "longevity", "retransmit", "retransmit_interval_s"})
        src, dst = node_ref(f, "src"), node_ref(f, "dst")
        if src == dst:
            raise InvalidScenario(f.path("dst"), "flow source and destination must differ")
        size = f.num("size_bytes", 100, integer=True, minimum=MIN_FLOW_PACKET)
        if size > MAX_TOTAL_LENGTH:
            raise InvalidScenario(f.path("size_bytes"), f"must be <= {MAX_TOTAL_LENGTH}")
        start = f.num("start_s", 0.0, minimum=0)
        end = f.num("end_s", minimum=start) if f.has("end_s") else None
        klass = f.num("service_class", 0, integer=True, minimum=0)
        if klass > 7:
            raise InvalidScenario(f.path("service_class"), "must be in 0..7")
        longevity = Longevity.from_name(f.choice("longevity", [c.name.lower() for c in Longevity], "days"))
        flows.append(FlowSpec(
            sec.name, src, dst, size,
            rate_pps=f.num("rate_pps", 1.0, minimum=0, strict=True),
            start_s=start, end_s=end, service_class=klass, longevity=longevity,
            retransmit=f.num("retransmit", 1, integer=True, minimum=1),
            retransmit_interval_s=f.num("retransmit_interval_s", 0.0, minimum=0),
        ))

    return Scenario(tuple(nodes), tuple(links), tuple(routes), tuple(flows),
                    duration_s=duration, seed=seed, mode=mode, engine=engine)


def loads(text: str, overrides: Optional[list[tuple[str, str]]] = None) -> Scenario:
    sections = parse_sections(text)
    for path, value in overrides or ():
        apply_override(sections, path, value)
    return build_scenario(sections)


def load(path, overrides: Optional[list[tuple[str, str]]] = None) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), overrides)


def fmt_number(x) -> str:
    """Lossless, compact text for a number (integral floats lose the '.0')."""
    if isinstance(x, float):
        if x.is_integer() and abs(x) < 1e16:
            return str(int(x))
        return repr(x)
    return str(x)


def _schedule_lines(s: Schedule) -> list[str]:
    if s.always:
        return ["schedule = always"]
    if s.is_periodic:
        return ["schedule = periodic", f"schedule_period_s = {fmt_number(s.period)}",
                f"schedule_up_s = {fmt_number(s.up)}", f"schedule_offset_s = {fmt_number(s.offset)}"]
    if not s.intervals:
        return ["schedule = never"]
    spans = " ".join(f"{fmt_number(a)}:{fmt_number(b)}" for a, b in s.intervals)
    return ["schedule = intervals", f"schedule_intervals_s = {spans}"]


def _engine_lines(values: dict) -> list[str]:
    return [f"{k} = {fmt_number(v)}" for k, v in sorted(values.items())]


def dumps(scenario: Scenario) -> str:
    out = ["[scenario]", f"duration_s = {fmt_number(scenario.duration_s)}",
           f"seed = {scenario.seed}", f"mode = {scenario.mode}"]
    if scenario.engine:
        out += ["", "[engine]", *_engine_lines(scenario.engine)]
    for n in scenario.nodes:
        out += ["", f"[node {n.name}]", f"addresses = {' '.join(int_to_ip(a) for a in n.addresses)}",
                *_engine_lines(n.engine)]
    for l in scenario.links:
        out += ["", f"[link {l.name}]", f"a = {l.a}", f"b = {l.b}",
                f"bandwidth_bytes_per_s = {fmt_number(l.bandwidth_bytes_per_s)}",
                f"delay_s = {fmt_number(l.delay_s)}",
                f"up_detect_s = {fmt_number(l.up_detect_s)}",
                f"down_detect_s = {fmt_number(l.down_detect_s)}",
                *_schedule_lines(l.schedule)]
    for r in scenario.routes:
        out += ["", f"[route {r.name}]", f"node = {r.node}", f"prefix = {r.prefix}",
                f"via = {r.via}", f"source = {r.source.value}"]
        if r.schedule is not None:
            out += _schedule_lines(r.schedule)
    for fl in scenario.flows:
        out += ["", f"[flow {fl.name}]", f"src = {fl.src}", f"dst = {fl.dst}",
                f"size_bytes = {fl.size_bytes}", f"rate_pps = {fmt_number(fl.rate_pps)}",
                f"start_s = {fmt_number(fl.start_s)}"]
        if fl.end_s is not None:
            out.append(f"end_s = {fmt_number(fl.end_s)}")
        out += [f"service_class = {fl.service_class}", f"longevity = {fl.longevity.name.lower()}",
                f"retransmit = {fl.retransmit}",
                f"retransmit_interval_s = {fmt_number(fl.retransmit_interval_s)}"]
    return "\n".join(out) + "\n"
