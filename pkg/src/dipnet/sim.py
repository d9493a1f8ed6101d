"""Deterministic discrete-event simulator driving a set of :class:`DipNode`.

Links are point-to-point with a bandwidth, a propagation delay and an up/down
schedule.  Each direction has one transmitter that serialises packets off the
sender's link queue; a packet is lost unless the link stays up from the start
of its transmission until it arrives.  Endpoints learn about link changes
after a configurable detection latency, as neighbor events.

Simultaneous events run in a fixed order: link changes, then topology events,
node ticks, transmissions and arrivals, flow emissions, and drain pulses last.
Ties within one kind run in scheduling order, so a run is a pure function of
the scenario (including its seed).
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

from .engine import DipNode, DropReason, Verdict, VerdictKind
from .metrics import MetricsReport, percentile
from .packet import DipMarking, Longevity, Packet, ip_to_int, serialize
from .prefix import DEFAULT_ROUTE, Prefix
from .routing import TopologyEvent
from .scenario import FlowSpec, LinkSpec, NodeSpec, RouteSpec, Scenario, Schedule

logger = logging.getLogger(__name__)

_TAG = struct.Struct("!II")


class InvalidParameter(ValueError):
    pass


class Phase(enum.IntEnum):
    """Tie-break order for events scheduled at the same instant."""

    LINK = 0
    TOPOLOGY = 1
    TICK = 2
    WIRE = 3
    EMIT = 4
    PULSE = 5


class EventQueue:
    def __init__(self) -> None:
        self._heap: list[tuple[float, int, int, Any]] = []
        self._seq = itertools.count()

    def push(self, time: float, phase: Phase, payload: Any) -> None:
        heapq.heappush(self._heap, (time, int(phase), next(self._seq), payload))

    def pop(self) -> tuple[float, Phase, Any]:
        time, phase, _, payload = heapq.heappop(self._heap)
        return time, Phase(phase), payload

    def peek_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def pending(self):
        return (item[3] for item in self._heap)


def neighbor_event_time(change_time: float, up: bool, link: LinkSpec) -> float:
    """When an endpoint of ``link`` notices it went up (or down) at ``change_time``."""
    return change_time + (link.up_detect_s if up else link.down_detect_s)


def flow_packet(flow: FlowSpec, flow_index: int, seq: int, src: int, dst: int) -> Packet:
    """The ``seq``-th packet of a flow; its payload carries ``(flow_index, seq)``."""
    payload = _TAG.pack(flow_index, seq).ljust(flow.size_bytes - 20, b"\0")
    marking = DipMarking(flow.service_class, flow.longevity)
    return Packet(src, dst, payload, ip_id=seq & 0xFFFF).with_marking(marking)


def flow_tag(packet: Packet) -> tuple[int, int]:
    return _TAG.unpack_from(packet.payload)


@dataclass
class _Transmitter:
    link: LinkSpec
    node: str
    peer: str
    busy: bool = False


@dataclass
class _LinkStats:
    carried: int = 0
    bytes: int = 0
    lost: int = 0


@dataclass
class _FlowState:
    spec: FlowSpec
    index: int
    src: int
    dst: int
    emit_times: dict[int, float] = field(default_factory=dict)
    copies: int = 0
    first_delivery: dict[int, float] = field(default_factory=dict)
    delivered_copies: int = 0


class Simulator:
    def __init__(self, scenario: Scenario, record_events: bool = False):
        self.scenario = scenario
        self.queue = EventQueue()
        self.now = 0.0
        self.events: Optional[list[dict]] = [] if record_events else None
        self.nodes: dict[str, DipNode] = {}
        for spec in scenario.nodes:
            node = DipNode(spec.name, spec.addresses, scenario.node_config(spec.name),
                           rng=random.Random(f"{scenario.seed}:{spec.name}"))
            if self.events is not None:
                node.listener = self.events.append
            self.nodes[spec.name] = node

        self.links = {l.name: l for l in scenario.links}
        self.link_stats = {l.name: _LinkStats() for l in scenario.links}
        self.link_up = {l.name: False for l in scenario.links}
        self.tx: dict[tuple[str, str], _Transmitter] = {}
        self.between: dict[tuple[str, str], LinkSpec] = {}
        for l in scenario.links:
            for a, b in ((l.a, l.b), (l.b, l.a)):
                self.nodes[a].add_interface(l.name)
                self.tx[(l.name, a)] = _Transmitter(l, a, b)
                self.between[(a, b)] = l
        self.pulse_pending = {name: False for name in self.nodes}
        self.flows = [
            _FlowState(f, i, scenario.node(f.src).address, scenario.node(f.dst).address)
            for i, f in enumerate(scenario.flows)
        ]
        self.occupancy: list[dict] = []
        self._ran = False

    # -- setup ------------------------------------------------------------------

    def _install_routes(self) -> None:
        for r in self.scenario.routes:
            node = self.nodes[r.node]
            link = self.between[(r.node, r.via)]
            next_hop = self.scenario.node(r.via).address
            if r.schedule is None:
                node.routing.add_route(r.prefix, next_hop, link.name, r.source, up=True)
                continue
            node.routing.add_route(r.prefix, next_hop, link.name, r.source, up=False)
            for t, up in r.schedule.edges(self.scenario.duration_s):
                if up:
                    ev = TopologyEvent.route_up(r.prefix, next_hop, t, link.name, r.source)
                else:
                    ev = TopologyEvent.route_down(r.prefix, next_hop, t)
                self.queue.push(t, Phase.TOPOLOGY, (r.node, ev))

    def _seed_events(self) -> None:
        duration = self.scenario.duration_s
        for l in self.scenario.links:
            for t, up in l.schedule.edges(duration):
                self.queue.push(t, Phase.LINK, (l.name, up))
        for name, node in self.nodes.items():
            self.queue.push(node.config.tick_s, Phase.TICK, (name, 1))
        for fs in self.flows:
            self.queue.push(fs.spec.start_s, Phase.EMIT, (fs.index, 0, 0))

    # -- run --------------------------------------------------------------------

    def run(self) -> MetricsReport:
        if self._ran:
            raise RuntimeError("a Simulator runs once; build a new one")
        self._ran = True
        self._install_routes()
        self._seed_events()
        duration = self.scenario.duration_s
        handlers = {
            Phase.LINK: self._on_link,
            Phase.TOPOLOGY: self._on_topology,
            Phase.TICK: self._on_tick,
            Phase.WIRE: self._on_wire,
            Phase.EMIT: self._on_emit,
            Phase.PULSE: self._on_pulse,
        }
        while self.queue and self.queue.peek_time() <= duration:
            self.now, phase, payload = self.queue.pop()
            handlers[phase](payload)
        return self._report()

    def _record(self, **fields_) -> None:
        if self.events is not None:
            self.events.append({"t": self.now, **fields_})

    def _on_link(self, payload) -> None:
        name, up = payload
        self.link_up[name] = up
        link = self.links[name]
        self._record(event="link_up" if up else "link_down", link=name)
        t = neighbor_event_time(self.now, up, link)
        for node in (link.a, link.b):
            self.queue.push(t, Phase.TOPOLOGY, (node, ("detect", name, up)))

    def _on_topology(self, payload) -> None:
        name, event = payload
        node = self.nodes[name]
        if isinstance(event, tuple):
            _, link_name, up = event
            if self.link_up[link_name] != up:
                return  # the link flapped back before the change was noticed
            link = self.links[link_name]
            peer = self.scenario.node(link.peer(name))
            for addr in peer.addresses:
                if up:
                    ev = TopologyEvent.neighbor_up(addr, self.now, link_name)
                else:
                    ev = TopologyEvent.neighbor_down(addr, self.now)
                node.on_topology_event(ev, self.now)
        else:
            node.on_topology_event(event, self.now)
        self._schedule_pulse(name, self.now)

    def _schedule_pulse(self, name: str, when: float) -> None:
        if self.nodes[name].needs_pulse and not self.pulse_pending[name]:
            self.pulse_pending[name] = True
            self.queue.push(when, Phase.PULSE, name)

    def _on_pulse(self, name: str) -> None:
        node = self.nodes[name]
        self.pulse_pending[name] = False
        for packet, verdict in node.drain_pulse(self.now):
            self._after(name, packet, verdict)
        self._schedule_pulse(name, self.now + node.config.pacing_interval_s)

    def _on_tick(self, payload) -> None:
        name, k = payload
        node = self.nodes[name]
        node.on_tick(self.now)
        self.occupancy.append({"time_s": self.now, "node": name, "packets": len(node.store),
                               "bytes": node.store.bytes_used})
        self.queue.push((k + 1) * node.config.tick_s, Phase.TICK, (name, k + 1))

    def _on_emit(self, payload) -> None:
        index, seq, copy = payload
        fs = self.flows[index]
        spec = fs.spec
        if copy == 0:
            fs.emit_times[seq] = self.now
            for c in range(1, spec.retransmit):
                self.queue.push(self.now + c * spec.retransmit_interval_s, Phase.EMIT, (index, seq, c))
            next_t = spec.start_s + (seq + 1) / spec.rate_pps
            if spec.end_s is None or next_t < spec.end_s:
                self.queue.push(next_t, Phase.EMIT, (index, seq + 1, 0))
        fs.copies += 1
        packet = flow_packet(spec, index, seq, fs.src, fs.dst)
        self._record(event="emit", flow=spec.name, seq=seq, copy=copy)
        verdict = self.nodes[spec.src].handle_packet(packet, self.now)
        self._after(spec.src, packet, verdict)

    def _after(self, name: str, packet: Optional[Packet], verdict: Verdict) -> None:
        if verdict.kind is VerdictKind.FORWARD:
            self._kick(name, verdict.interface)
        elif verdict.kind is VerdictKind.DELIVER and packet is not None:
            index, seq = flow_tag(packet)
            fs = self.flows[index]
            fs.delivered_copies += 1
            fs.first_delivery.setdefault(seq, self.now)

    def _kick(self, name: str, link_name: str) -> None:
        tx = self.tx[(link_name, name)]
        if tx.busy:
            return
        packet = self.nodes[name].dequeue(link_name)
        if packet is None:
            return
        link = tx.link
        data = serialize(packet)
        done = self.now + len(data) / link.bandwidth_bytes_per_s
        arrival = done + link.delay_s
        tx.busy = True
        self.queue.push(done, Phase.WIRE, ("done", link_name, name))
        if link.schedule.up_through(self.now, arrival):
            self.queue.push(arrival, Phase.WIRE, ("arrive", link_name, tx.peer, data))
        else:
            self.link_stats[link_name].lost += 1
            self._record(event="link_loss", link=link_name, src=packet.src, dst=packet.dst, ip_id=packet.ip_id)

    def _on_wire(self, payload) -> None:
        if payload[0] == "done":
            _, link_name, name = payload
            self.tx[(link_name, name)].busy = False
            self._kick(name, link_name)
            return
        _, link_name, name, data = payload
        stats = self.link_stats[link_name]
        stats.carried += 1
        stats.bytes += len(data)
        packet, verdict = self.nodes[name].receive(data, self.now)
        self._after(name, packet, verdict)

    # -- report -----------------------------------------------------------------

    def in_flight(self) -> int:
        on_wire = sum(1 for p in self.queue.pending() if isinstance(p, tuple) and p and p[0] == "arrive")
        queued = sum(len(i.queue) for n in self.nodes.values() for i in n.interfaces.values())
        return on_wire + queued

    def _report(self) -> MetricsReport:
        report = MetricsReport(events=self.events)
        for name, node in self.nodes.items():
            c = node.counters
            row = {"node": name, "ingress": c.ingress, "delivered": c.delivered, "forwarded": c.forwarded,
                   "reinjected": c.reinjected, "park_verdicts": c.verdicts["park"],
                   "parked_at_end": len(node.store)}
            for reason in DropReason:
                row[f"drop_{reason.value}"] = c.drops[reason]
            report.nodes.append(row)
        for fs in self.flows:
            latencies = [t - fs.emit_times[s] for s, t in sorted(fs.first_delivery.items())]
            emitted = len(fs.emit_times)
            row = {"flow": fs.spec.name, "src": fs.spec.src, "dst": fs.spec.dst, "emitted": emitted,
                   "emitted_copies": fs.copies, "delivered": len(fs.first_delivery),
                   "delivered_copies": fs.delivered_copies,
                   "delivery_ratio": len(fs.first_delivery) / emitted if emitted else 0.0,
                   "latency_min_s": None, "latency_mean_s": None, "latency_max_s": None,
                   "latency_p95_s": None}
            if latencies:
                row.update(latency_min_s=min(latencies), latency_mean_s=sum(latencies) / len(latencies),
                           latency_max_s=max(latencies), latency_p95_s=percentile(latencies, 95))
            report.flows.append(row)
            for seq, t in sorted(fs.first_delivery.items()):
                report.deliveries.append({"flow": fs.spec.name, "seq": seq, "emit_time_s": fs.emit_times[seq],
                                          "deliver_time_s": t, "latency_s": t - fs.emit_times[seq]})
        for l in self.scenario.links:
            s = self.link_stats[l.name]
            report.links.append({"link": l.name, "a": l.a, "b": l.b, "packets_carried": s.carried,
                                 "bytes_carried": s.bytes, "packets_lost": s.lost})
        report.occupancy = list(self.occupancy)
        emitted = sum(fs.copies for fs in self.flows)
        delivered = sum(n.counters.delivered for n in self.nodes.values())
        in_flight = self.in_flight()
        parked = sum(len(n.store) for n in self.nodes.values())
        dropped = sum(n.counters.dropped for n in self.nodes.values())
        lost = sum(s.lost for s in self.link_stats.values())
        report.totals = {"emitted_copies": emitted, "delivered_copies": delivered, "in_flight": in_flight,
                         "parked": parked, "dropped": dropped, "link_losses": lost,
                         "conserved": emitted == delivered + in_flight + parked + dropped + lost}
        return report


def simulate(scenario: Scenario, record_events: bool = False) -> MetricsReport:
    return Simulator(scenario, record_events).run()


def build_data_mule(
    contact_s: float = 60.0,
    gap_s: float = 240.0,
    duration_s: float = 7200.0,
    mode: str = "dip",
    longevity: Longevity = Longevity.DAYS,
    service_class: int = 0,
    size_bytes: int = 100,
    rate_pps: float = 1.0,
    start_s: float = 0.5,
    bandwidth_bytes_per_s: float = 100_000.0,
    delay_s: float = 0.01,
    seed: int = 1,
    engine: Optional[dict] = None,
) -> Scenario:
    """Two houses that only ever hear a mule that shuttles between them.

    The mule is in range of ``house-a`` for ``contact_s``, out of range of
    both for ``gap_s``, in range of ``house-b`` for ``contact_s``, out of
    range for ``gap_s`` again, and so on.
    """
    for name, value in (("contact_s", contact_s), ("gap_s", gap_s), ("duration_s", duration_s),
                        ("rate_pps", rate_pps), ("bandwidth_bytes_per_s", bandwidth_bytes_per_s)):
        if not value > 0:
            raise InvalidParameter(f"{name} must be positive, got {value}")
    if delay_s < 0 or start_s < 0:
        raise InvalidParameter("delay_s and start_s must be >= 0")
    period = 2 * (contact_s + gap_s)
    nodes = (
        NodeSpec("house-a", (ip_to_int("10.0.1.1"),)),
        NodeSpec("mule", (ip_to_int("10.0.0.1"),)),
        NodeSpec("house-b", (ip_to_int("10.0.2.1"),)),
    )
    links = (
        LinkSpec("a-mule", "house-a", "mule", bandwidth_bytes_per_s, delay_s,
                 Schedule.periodic(period, contact_s, 0.0)),
        LinkSpec("mule-b", "mule", "house-b", bandwidth_bytes_per_s, delay_s,
                 Schedule.periodic(period, contact_s, contact_s + gap_s)),
    )
    routes = (
        RouteSpec("a-default", "house-a", DEFAULT_ROUTE, "mule"),
        RouteSpec("b-default", "house-b", DEFAULT_ROUTE, "mule"),
        RouteSpec("mule-to-a", "mule", Prefix.parse("10.0.1.1/32"), "house-a"),
        RouteSpec("mule-to-b", "mule", Prefix.parse("10.0.2.1/32"), "house-b"),
    )
    flows = (
        FlowSpec("a-to-b", "house-a", "house-b", size_bytes, rate_pps, start_s,
                 service_class=service_class, longevity=longevity),
    )
    return Scenario(nodes, links, routes, flows, duration_s=duration_s, seed=seed, mode=mode,
                    engine=dict(engine or {}))


__all__ = [
    "EventQueue",
    "InvalidParameter",
    "Phase",
    "Simulator",
    "build_data_mule",
    "flow_packet",
    "flow_tag",
    "neighbor_event_time",
    "simulate",
]
