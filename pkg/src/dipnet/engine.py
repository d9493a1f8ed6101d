"""Per-node DIP forwarding pipeline.

A :class:`DipNode` forwards what it can, parks DIP-marked packets it cannot
route, and reinjects parked packets at a shaped pace when routes come back.
It knows nothing about the simulator: outbound packets wait in per-interface
link queues for whoever drives the links to :meth:`DipNode.dequeue` them, and
reinjection advances only when :meth:`DipNode.drain_pulse` is called.
"""

from __future__ import annotations

import enum
import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .dupfilter import CountingBloomFilter
from .lifetime import LifetimeWheel
from .packet import MalformedHeader, Packet, parse
from .prefix import Prefix
from .routing import NoRoute, RoutedButDown, RouteTable, TopologyEvent, Usable
from .store import DisruptionStore, DropPolicy, GroupConfig, ParkStatus, StoredPacket, TailDrop

logger = logging.getLogger(__name__)


class DropReason(enum.Enum):
    TTL_EXPIRED = "ttl_expired"
    LIFETIME_EXPIRED = "lifetime_expired"
    DUPLICATE = "duplicate"
    BLOOM_FALSE_POSITIVE = "bloom_false_positive"
    QUEUE_FULL = "queue_full"
    NO_ROUTE_NON_DIP = "no_route_non_dip"
    MALFORMED_HEADER = "malformed_header"
    SHAPER_OVERFLOW = "shaper_overflow"


class VerdictKind(enum.Enum):
    DELIVER = "deliver"
    FORWARD = "forward"
    PARK = "park"
    DROP = "drop"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    reason: Optional[DropReason] = None
    next_hop: Optional[int] = None
    interface: Optional[str] = None

    @classmethod
    def drop(cls, reason: DropReason) -> "Verdict":
        return cls(VerdictKind.DROP, reason)

    @property
    def label(self) -> str:
        return self.reason.value if self.reason else self.kind.value


DELIVER = Verdict(VerdictKind.DELIVER)
PARK = Verdict(VerdictKind.PARK)


@dataclass
class NodeConfig:
    tick_s: float = 10.0
    shaper_rate_bytes_per_s: float = 10_000.0
    shaper_burst_bytes: float = 5_000.0
    pacing_interval_s: float = 0.1
    backpressure_threshold_bytes: int = 3_000
    link_queue_limit_bytes: int = 65_536
    store_capacity_bytes: int = 1_000_000
    buckets: int = 16
    bucket_depth_packets: int = 1024
    bucket_limit_bytes: Optional[int] = None
    drop_policy: DropPolicy = field(default_factory=TailDrop)
    bloom_capacity: int = 10_000
    bloom_fpr: float = 0.01
    digest_key: bytes = b"dip"
    parking: bool = True

    def __post_init__(self) -> None:
        for name in ("tick_s", "shaper_rate_bytes_per_s", "pacing_interval_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.shaper_burst_bytes < 0 or self.backpressure_threshold_bytes < 0:
            raise ValueError("shaper_burst_bytes and backpressure_threshold_bytes must be >= 0")


class TokenBucket:
    """Byte-denominated token bucket, refilled from elapsed simulated time."""

    def __init__(self, rate: float, burst: float, now: float = 0.0):
        self.rate = float(rate)
        self.burst = float(burst)
        self.tokens = float(burst)
        self.last = now

    def refill(self, now: float) -> None:
        if now > self.last:
            self.tokens = min(self.burst, self.tokens + self.rate * (now - self.last))
            self.last = now

    def consume(self, amount: float) -> None:
        self.tokens = max(0.0, self.tokens - amount)


class Interface:
    def __init__(self, name: Optional[str], config: NodeConfig, now: float = 0.0):
        self.name = name
        self.shaper = TokenBucket(config.shaper_rate_bytes_per_s, config.shaper_burst_bytes, now)
        self.queue: deque[Packet] = deque()
        self.queued_bytes = 0

    def enqueue(self, packet: Packet) -> None:
        self.queue.append(packet)
        self.queued_bytes += packet.total_length

    def dequeue(self) -> Optional[Packet]:
        if not self.queue:
            return None
        packet = self.queue.popleft()
        self.queued_bytes -= packet.total_length
        return packet


@dataclass
class NodeCounters:
    ingress: int = 0
    delivered: int = 0
    forwarded: int = 0
    reinjected: int = 0
    drops: Counter = field(default_factory=Counter)
    verdicts: Counter = field(default_factory=Counter)

    @property
    def dropped(self) -> int:
        return sum(self.drops.values())


class DipNode:
    def __init__(
        self,
        name: str,
        addresses,
        config: Optional[NodeConfig] = None,
        rng: Optional[random.Random] = None,
        start: float = 0.0,
    ):
        self.name = name
        self.addresses = frozenset(addresses)
        self.config = config = config or NodeConfig()
        self.rng = rng or random.Random(name)
        self.start = start
        self.routing = RouteTable()
        self.wheel = LifetimeWheel(config.tick_s, start)
        self.dupfilter = CountingBloomFilter.for_capacity(
            config.bloom_capacity, config.bloom_fpr, hash_seed=self.rng.randbytes(16)
        )
        self.store = DisruptionStore(
            self.wheel,
            self.dupfilter,
            byte_capacity=config.store_capacity_bytes,
            default_config=GroupConfig(
                buckets=config.buckets,
                depth_packets=config.bucket_depth_packets,
                limit_bytes=config.bucket_limit_bytes,
                policy=config.drop_policy,
            ),
            digest_key=config.digest_key,
            hash_salt=self.rng.randbytes(16),
            rng=self.rng,
        )
        self.interfaces: dict[Optional[str], Interface] = {}
        self.counters = NodeCounters()
        self.active: deque[Prefix] = deque()
        #: called with one dict per verdict when set
        self.listener: Optional[Callable[[dict], None]] = None

    def __repr__(self) -> str:
        return f"DipNode({self.name!r}, parked={len(self.store)})"

    def interface(self, name: Optional[str]) -> Interface:
        iface = self.interfaces.get(name)
        if iface is None:
            iface = self.interfaces[name] = Interface(name, self.config, self.start)
        return iface

    add_interface = interface

    def dequeue(self, interface: Optional[str]) -> Optional[Packet]:
        iface = self.interfaces.get(interface)
        return iface.dequeue() if iface else None

    @property
    def parked(self) -> int:
        return len(self.store)

    @property
    def needs_pulse(self) -> bool:
        return bool(self.active)

    def conservation_holds(self) -> bool:
        c = self.counters
        return c.ingress == c.delivered + c.forwarded + len(self.store) + c.dropped

    # -- ingress --------------------------------------------------------------

    def receive(self, data: bytes, now: float) -> tuple[Optional[Packet], Verdict]:
        """Parse a datagram off the wire and handle it."""
        try:
            packet = parse(data)
        except MalformedHeader as exc:
            logger.debug("%s: malformed datagram: %s", self.name, exc)
            self.counters.ingress += 1
            verdict = Verdict.drop(DropReason.MALFORMED_HEADER)
            self._count(verdict, None, now)
            return None, verdict
        return packet, self.handle_packet(packet, now)

    def handle_packet(self, packet: Packet, now: float) -> Verdict:
        self.counters.ingress += 1
        return self._route(packet, now)

    def _route(self, packet: Packet, now: float, reinjected: bool = False) -> Verdict:
        if packet.dst in self.addresses:
            return self._count(DELIVER, packet, now, reinjected)
        result = self.routing.lookup(packet.dst)
        if isinstance(result, Usable):
            if packet.ttl <= 1:
                return self._count(Verdict.drop(DropReason.TTL_EXPIRED), packet, now, reinjected)
            iface = self.interface(result.interface)
            if iface.queued_bytes + packet.total_length > self.config.link_queue_limit_bytes:
                return self._count(Verdict.drop(DropReason.SHAPER_OVERFLOW), packet, now, reinjected)
            iface.enqueue(replace(packet, ttl=packet.ttl - 1))
            return self._count(
                Verdict(VerdictKind.FORWARD, next_hop=result.next_hop, interface=result.interface),
                packet, now, reinjected,
            )
        if not self.config.parking or packet.marking is None:
            return self._count(Verdict.drop(DropReason.NO_ROUTE_NON_DIP), packet, now, reinjected)
        key = result.prefix if isinstance(result, RoutedButDown) else Prefix.host(packet.dst)
        outcome = self.store.park(packet, key, now)
        for victim in outcome.evicted:
            self._count(Verdict.drop(DropReason.QUEUE_FULL), victim.packet, now, evicted=True)
        if outcome.status is ParkStatus.PARKED:
            return self._count(PARK, packet, now, reinjected)
        if outcome.status is ParkStatus.DUPLICATE:
            reason = DropReason.BLOOM_FALSE_POSITIVE if outcome.false_positive else DropReason.DUPLICATE
            return self._count(Verdict.drop(reason), packet, now, reinjected)
        return self._count(Verdict.drop(DropReason.QUEUE_FULL), packet, now, reinjected)

    def _count(self, verdict: Verdict, packet: Optional[Packet], now: float,
               reinjected: bool = False, evicted: bool = False) -> Verdict:
        c = self.counters
        c.verdicts[verdict.label] += 1
        if verdict.kind is VerdictKind.DROP:
            c.drops[verdict.reason] += 1
        elif verdict.kind is VerdictKind.DELIVER:
            c.delivered += 1
        elif verdict.kind is VerdictKind.FORWARD:
            c.forwarded += 1
            if reinjected:
                c.reinjected += 1
        if self.listener is not None:
            record = {"t": now, "node": self.name, "verdict": verdict.kind.value,
                      "reason": verdict.reason.value if verdict.reason else None}
            if packet is not None:
                record.update(src=packet.src, dst=packet.dst, ip_id=packet.ip_id, dscp=packet.dscp)
            record["reinjected"] = reinjected
            if evicted:
                record["evicted"] = True
            self.listener(record)
        return verdict

    # -- topology and reinjection ----------------------------------------------

    def on_topology_event(self, event: TopologyEvent, now: float) -> list[Prefix]:
        """Apply a routing/neighbor event and queue drains for new routes.

        Returns the newly usable prefixes; when non-empty the caller should
        start calling :meth:`drain_pulse` (first pulse immediately).
        """
        fresh = self.routing.apply_event(event)
        for prefix in fresh:
            if prefix not in self.active:
                self.active.append(prefix)
        return fresh

    def _routable(self, packet: Packet) -> bool:
        return isinstance(self.routing.lookup(packet.dst), Usable)

    def drain_pulse(self, now: float) -> list[tuple[Packet, Verdict]]:
        """One pacing interval of reinjection, round-robin over active prefixes.

        Each prefix gets one drain unit per turn; a prefix that was served
        moves to the back of the ring, so the next pulse starts with the
        prefix after it.
        """
        results: list[tuple[Packet, Verdict]] = []
        blocked: set[Prefix] = set()
        while True:
            prefix = next((p for p in self.active if p not in blocked), None)
            if prefix is None:
                break
            route = self.routing.usable_route(prefix)
            if route is None:
                self.active.remove(prefix)
                continue
            iface = self.interface(route.interface)
            iface.shaper.refill(now)
            budget = min(iface.shaper.tokens,
                         self.config.backpressure_threshold_bytes - iface.queued_bytes)
            drained = []
            if budget > 0:
                drained = self.store.drain(prefix, max_packets=1, max_bytes=budget,
                                           now=now, eligible=self._routable)
            if drained:
                for packet in drained:
                    iface.shaper.consume(packet.total_length)
                    results.append((packet, self._route(packet, now, reinjected=True)))
                self.active.remove(prefix)
                self.active.append(prefix)
            elif self.store.peek(prefix, self._routable) is None:
                self.active.remove(prefix)
            else:
                blocked.add(prefix)
        return results

    def on_tick(self, now: float) -> list[StoredPacket]:
        """Expire packets whose at-rest lifetime ran out and refill shapers."""
        expired = self.store.expire(self.wheel.tick(now))
        for entry in expired:
            self._count(Verdict.drop(DropReason.LIFETIME_EXPIRED), entry.packet, now)
        for iface in self.interfaces.values():
            iface.shaper.refill(now)
        return expired
