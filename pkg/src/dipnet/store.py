"""Disruption store: parked packets indexed by route prefix.

Packets are grouped under the prefix of the route that should carry them
(one :class:`QueueGroup` per prefix, kept in a binary trie).  Inside a group,
destinations hash onto ``B`` FIFO buckets, so every packet for one
destination shares a bucket.  Each group applies its own drop policy.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Union

from .dupfilter import CountingBloomFilter
from .lifetime import LifetimeWheel
from .packet import DipMarking, Packet, packet_digest
from .prefix import Prefix, PrefixTrie

NUM_CLASSES = 8


@dataclass(frozen=True)
class TailDrop:
    pass


@dataclass(frozen=True)
class HeadDrop:
    pass


@dataclass(frozen=True)
class Red:
    min_th: float
    max_th: float
    max_p: float
    ewma_weight: float = 0.002

    def __post_init__(self) -> None:
        if not 0 <= self.min_th < self.max_th:
            raise ValueError("RED needs 0 <= min_th < max_th")
        if not 0 <= self.max_p <= 1 or not 0 <= self.ewma_weight <= 1:
            raise ValueError("RED max_p and ewma_weight must be in [0, 1]")


DropPolicy = Union[TailDrop, HeadDrop, Red]


@dataclass
class RedState:
    avg: float = 0.0


def red_drop_probability(policy: Red, avg: float) -> float:
    if avg < policy.min_th:
        return 0.0
    if avg >= policy.max_th:
        return 1.0
    return policy.max_p * (avg - policy.min_th) / (policy.max_th - policy.min_th)


def red_admit(policy: Red, state: RedState, queue_len: int, rng: random.Random) -> bool:
    """Update the average queue length and decide on one arrival.

    Returns True to admit, False to drop.
    """
    w = policy.ewma_weight
    state.avg = (1.0 - w) * state.avg + w * queue_len
    p = red_drop_probability(policy, state.avg)
    if p <= 0.0:
        return True
    if p >= 1.0:
        return False
    return rng.random() >= p


class ParkStatus(enum.Enum):
    PARKED = "parked"
    DUPLICATE = "duplicate"
    FULL = "full"


@dataclass
class ParkResult:
    status: ParkStatus
    handle: Optional[int] = None
    evicted: list["StoredPacket"] = field(default_factory=list)
    #: the arrival was refused by RED rather than by a hard limit
    early: bool = False
    #: a Bloom filter false positive, detected against the exact digest set
    false_positive: bool = False

    @property
    def parked(self) -> bool:
        return self.status is ParkStatus.PARKED


@dataclass(eq=False)
class StoredPacket:
    handle: int
    packet: Packet
    digest: bytes
    seq: int
    parked_at: float
    group: "QueueGroup" = field(repr=False)
    bucket: int
    service_class: int

    @property
    def size(self) -> int:
        return self.packet.total_length


@dataclass
class GroupConfig:
    buckets: int = 16
    depth_packets: int = 1024
    limit_bytes: Optional[int] = None
    policy: DropPolicy = field(default_factory=TailDrop)

    def __post_init__(self) -> None:
        if self.buckets < 1 or self.depth_packets < 1:
            raise ValueError("buckets and depth_packets must be positive")


class QueueGroup:
    def __init__(self, prefix: Prefix, config: GroupConfig):
        self.prefix = prefix
        self.config = config
        n = config.buckets
        self.buckets: list[dict[int, StoredPacket]] = [{} for _ in range(n)]
        self.bucket_bytes = [0] * n
        self.red = [RedState() for _ in range(n)]
        # per service class, in arrival order, for draining
        self.by_class: list[dict[int, StoredPacket]] = [{} for _ in range(NUM_CLASSES)]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def packets(self) -> Iterator[StoredPacket]:
        for bucket in self.buckets:
            yield from bucket.values()


class DisruptionStore:
    """Parks DIP packets and hands them back when their route returns.

    The store owns the bookkeeping between the queues, the duplicate filter
    and the lifetime wheel: whatever it admits is registered with both, and
    whatever leaves (drained, evicted, expired) is unregistered from both.
    """

    def __init__(
        self,
        wheel: LifetimeWheel,
        dupfilter: CountingBloomFilter,
        byte_capacity: int = 1_000_000,
        default_config: Optional[GroupConfig] = None,
        digest_key: bytes = b"",
        hash_salt: bytes = b"",
        rng: Optional[random.Random] = None,
    ):
        self.wheel = wheel
        self.dupfilter = dupfilter
        self.byte_capacity = byte_capacity
        self.default_config = default_config or GroupConfig()
        self.group_configs: dict[Prefix, GroupConfig] = {}
        self.digest_key = digest_key
        self.hash_salt = hash_salt
        self.rng = rng or random.Random(0)
        self.trie: PrefixTrie[QueueGroup] = PrefixTrie()
        self.bytes_used = 0
        self.entries: dict[int, StoredPacket] = {}
        self.digests: Counter = Counter()
        self._frag_index: dict[tuple, dict[int, StoredPacket]] = {}
        self._open_fragments: dict[tuple, None] = {}
        self._handles = itertools.count(1)
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.entries)

    def configure(self, prefix: Prefix, config: GroupConfig) -> None:
        """Per-prefix queue settings for groups created from now on."""
        self.group_configs[prefix] = config

    def bucket_index(self, group: QueueGroup, dst: int) -> int:
        n = len(group.buckets)
        if n == 1:
            return 0
        h = hashlib.blake2b(dst.to_bytes(4, "big"), digest_size=8, key=self.hash_salt[:64]).digest()
        return int.from_bytes(h, "big") % n

    def groups(self) -> list[QueueGroup]:
        return [g for _, g in self.trie.items()]

    def _select_group(self, packet: Packet, prefix: Prefix) -> QueueGroup:
        # prefer an existing group at least as specific as the covering route
        for group_prefix, group in self.trie.matches(packet.dst):
            if group_prefix.length >= prefix.length:
                return group
            break
        group = self.trie.get(prefix)
        if group is None:
            group = QueueGroup(prefix, self.group_configs.get(prefix, self.default_config))
            self.trie[prefix] = group
        return group

    def park(self, packet: Packet, prefix: Prefix, now: float) -> ParkResult:
        marking = packet.marking
        if marking is None:
            raise ValueError("only DIP-marked packets can be parked")
        digest = packet_digest(packet, self.digest_key)
        if digest in self.dupfilter:
            return ParkResult(ParkStatus.DUPLICATE, false_positive=not self.digests[digest])

        group = self._select_group(packet, prefix)
        cfg = group.config
        b = self.bucket_index(group, packet.dst)
        bucket = group.buckets[b]
        size = packet.total_length
        bucket_limit = cfg.limit_bytes if cfg.limit_bytes is not None else self.byte_capacity

        if isinstance(cfg.policy, Red):
            if not red_admit(cfg.policy, group.red[b], len(bucket), self.rng):
                self._discard_if_empty(group)
                return ParkResult(ParkStatus.FULL, early=True)

        evict_count = 0
        if isinstance(cfg.policy, HeadDrop):
            # evict from the head of this bucket until the arrival fits everywhere
            freed = 0
            for victim in bucket.values():
                if (len(bucket) - evict_count < cfg.depth_packets
                        and group.bucket_bytes[b] - freed + size <= bucket_limit
                        and self.bytes_used - freed + size <= self.byte_capacity):
                    break
                freed += victim.size
                evict_count += 1
            fits = (len(bucket) - evict_count < cfg.depth_packets
                    and group.bucket_bytes[b] - freed + size <= bucket_limit
                    and self.bytes_used - freed + size <= self.byte_capacity)
        else:
            fits = (len(bucket) < cfg.depth_packets
                    and group.bucket_bytes[b] + size <= bucket_limit
                    and self.bytes_used + size <= self.byte_capacity)
        if not fits:
            self._discard_if_empty(group)
            return ParkResult(ParkStatus.FULL)

        evicted = [self._unlink(victim) for victim in list(bucket.values())[:evict_count]]
        handle = next(self._handles)
        entry = StoredPacket(handle, packet, digest, next(self._seq), now, group, b, marking.service_class)
        bucket[handle] = entry
        group.by_class[entry.service_class][handle] = entry
        group.bucket_bytes[b] += size
        self.bytes_used += size
        self.entries[handle] = entry
        self.digests[digest] += 1
        self.dupfilter.insert(digest)
        self.wheel.insert(handle, marking.longevity, now)
        if packet.is_fragment:
            self._frag_index.setdefault(packet.fragment_key, {})[handle] = entry
        return ParkResult(ParkStatus.PARKED, handle, evicted)

    def _discard_if_empty(self, group: QueueGroup) -> None:
        if not any(group.buckets) and group.prefix in self.trie:
            del self.trie[group.prefix]

    def _unlink(self, entry: StoredPacket) -> StoredPacket:
        group = entry.group
        del group.buckets[entry.bucket][entry.handle]
        del group.by_class[entry.service_class][entry.handle]
        group.bucket_bytes[entry.bucket] -= entry.size
        self.bytes_used -= entry.size
        del self.entries[entry.handle]
        self.digests[entry.digest] -= 1
        if not self.digests[entry.digest]:
            del self.digests[entry.digest]
        self.dupfilter.remove(entry.digest)
        self.wheel.remove(entry.handle)
        if entry.packet.is_fragment:
            key = entry.packet.fragment_key
            siblings = self._frag_index[key]
            del siblings[entry.handle]
            if not siblings:
                del self._frag_index[key]
                self._open_fragments.pop(key, None)
        self._discard_if_empty(group)
        return entry

    def expire(self, handle_ids) -> list[StoredPacket]:
        """Remove expired handles; unknown (already drained) handles are ignored."""
        out = []
        for hid in handle_ids:
            entry = self.entries.get(hid)
            if entry is not None:
                out.append(self._unlink(entry))
        return out

    # -- draining -------------------------------------------------------------

    def _drain_order(self, prefix: Prefix, eligible: Optional[Callable[[Packet], bool]]) -> Iterator[list[StoredPacket]]:
        """Yield drain units in order: a packet, or a fragment run.

        Order is service class descending, then arrival order.  Once a
        fragment is emitted, its queued siblings follow it immediately.
        """
        groups = [g for _, g in self.trie.covered(prefix)]
        emitted: set[int] = set()

        def usable(entry: StoredPacket) -> bool:
            return (entry.handle not in emitted and prefix.contains(entry.packet.dst)
                    and (eligible is None or eligible(entry.packet)))

        def siblings(key) -> list[StoredPacket]:
            run = sorted((e for e in self._frag_index.get(key, {}).values() if usable(e)),
                         key=lambda e: e.seq)
            emitted.update(e.handle for e in run)
            return run

        for key in list(self._open_fragments):
            run = siblings(key)
            if run:
                yield run

        for cls in range(NUM_CLASSES - 1, -1, -1):
            streams = [g.by_class[cls].values() for g in groups if g.by_class[cls]]
            for entry in heapq.merge(*streams, key=lambda e: e.seq):
                if not usable(entry):
                    continue
                if entry.packet.is_fragment:
                    yield siblings(entry.packet.fragment_key)
                else:
                    emitted.add(entry.handle)
                    yield [entry]

    def peek(self, prefix: Prefix, eligible: Optional[Callable[[Packet], bool]] = None) -> Optional[Packet]:
        for unit in self._drain_order(prefix, eligible):
            return unit[0].packet
        return None

    def drain(
        self,
        prefix: Prefix,
        max_packets: Optional[int] = None,
        max_bytes: Optional[float] = None,
        now: float = 0.0,
        eligible: Optional[Callable[[Packet], bool]] = None,
    ) -> list[Packet]:
        """Remove and return parked packets covered by ``prefix``.

        ``max_packets`` counts drain units (a fragment run is one unit);
        ``max_bytes`` is never exceeded, and draining stops at the first
        packet that does not fit rather than skipping ahead.  Returned packets
        carry a DSCP longevity remarked from their remaining lifetime.
        """
        taken: list[StoredPacket] = []
        used = 0
        units = 0
        stop = False
        for unit in self._drain_order(prefix, eligible):
            if max_packets is not None and units >= max_packets:
                break
            units += 1
            for entry in unit:
                if max_bytes is not None and used + entry.size > max_bytes + 1e-9:
                    stop = True
                    break
                used += entry.size
                taken.append(entry)
            if stop:
                break

        out = []
        for entry in taken:
            category = self.wheel.current_category(entry.handle, now)
            out.append(entry.packet.with_marking(DipMarking(entry.service_class, category)))
            self._unlink(entry)
        # siblings left behind go first next time
        for entry in taken:
            key = entry.packet.fragment_key
            if entry.packet.is_fragment and key in self._frag_index:
                self._open_fragments[key] = None
        return out

    # -- introspection --------------------------------------------------------

    def packets(self) -> list[StoredPacket]:
        return sorted(self.entries.values(), key=lambda e: e.seq)

    def covered_count(self, prefix: Prefix) -> int:
        return sum(1 for e in self.entries.values() if prefix.contains(e.packet.dst))

    def check_invariants(self) -> None:
        assert self.bytes_used <= self.byte_capacity
        assert self.bytes_used == sum(e.size for e in self.entries.values())
        assert Counter(e.digest for e in self.entries.values()) == self.digests
        assert self.dupfilter.n_live == len(self.entries)
        assert len(self.wheel) == len(self.entries)
        seen = 0
        for group in self.groups():
            for b, bucket in enumerate(group.buckets):
                assert group.bucket_bytes[b] == sum(e.size for e in bucket.values())
                for entry in bucket.values():
                    assert self.entries[entry.handle] is entry and entry.group is group
                    seen += 1
        assert seen == len(self.entries)
