"""Route and neighbor tables fed by topology events.

Neighbor discovery and routing protocols are not modelled on the wire; they
reach a node as a single ordered stream of :class:`TopologyEvent` values.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Optional, Union

from .prefix import Prefix, PrefixTrie


class RouteSource(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    SCHEDULED = "scheduled"


class EventKind(enum.Enum):
    ROUTE_UP = "route_up"
    ROUTE_DOWN = "route_down"
    NEIGHBOR_UP = "neighbor_up"
    NEIGHBOR_DOWN = "neighbor_down"


class UnknownRoute(KeyError):
    pass


@dataclass(frozen=True)
class TopologyEvent:
    """A change reported by neighbor discovery or a routing protocol.

    Route events carry the prefix in ``subject`` and name the next hop; a
    ``ROUTE_UP`` for a route the table has never seen installs it.  Neighbor
    events carry the neighbor address in ``subject``.
    """

    kind: EventKind
    subject: Union[Prefix, int]
    time: float
    next_hop: Optional[int] = None
    interface: Optional[str] = None
    source: RouteSource = RouteSource.DYNAMIC

    @classmethod
    def route_up(cls, prefix: Prefix, next_hop: int, time: float, interface: Optional[str] = None,
                 source: RouteSource = RouteSource.DYNAMIC) -> "TopologyEvent":
        return cls(EventKind.ROUTE_UP, prefix, time, next_hop, interface, source)

    @classmethod
    def route_down(cls, prefix: Prefix, next_hop: int, time: float) -> "TopologyEvent":
        return cls(EventKind.ROUTE_DOWN, prefix, time, next_hop)

    @classmethod
    def neighbor_up(cls, address: int, time: float, interface: Optional[str] = None) -> "TopologyEvent":
        return cls(EventKind.NEIGHBOR_UP, address, time, interface=interface)

    @classmethod
    def neighbor_down(cls, address: int, time: float) -> "TopologyEvent":
        return cls(EventKind.NEIGHBOR_DOWN, address, time)


@dataclass
class RouteEntry:
    prefix: Prefix
    next_hop: int
    interface: Optional[str]
    up: bool = True
    source: RouteSource = RouteSource.STATIC
    updated: int = 0


@dataclass
class NeighborEntry:
    address: int
    reachable: bool = False
    last_change: float = 0.0
    interface: Optional[str] = None


@dataclass(frozen=True)
class Usable:
    next_hop: int
    interface: Optional[str]
    prefix: Prefix


@dataclass(frozen=True)
class RoutedButDown:
    prefix: Prefix


@dataclass(frozen=True)
class NoRoute:
    pass


LookupResult = Union[Usable, RoutedButDown, NoRoute]
NO_ROUTE = NoRoute()


@dataclass
class NeighborTable:
    entries: dict[int, NeighborEntry] = field(default_factory=dict)

    def reachable(self, address: int) -> bool:
        entry = self.entries.get(address)
        return entry is not None and entry.reachable

    def set(self, address: int, reachable: bool, time: float, interface: Optional[str] = None) -> bool:
        """Record reachability; returns True if the state changed."""
        entry = self.entries.get(address)
        if entry is None:
            entry = self.entries[address] = NeighborEntry(address, interface=interface)
        elif interface is not None:
            entry.interface = interface
        if entry.reachable == reachable:
            return False
        entry.reachable = reachable
        entry.last_change = time
        return True


class RouteTable:
    """Longest-prefix-match routes plus the neighbor table they depend on.

    A prefix may have several next hops; among the usable ones the most
    recently updated wins.  A route is usable when it is up and its next hop
    is a reachable neighbor.
    """

    def __init__(self) -> None:
        self.trie: PrefixTrie[dict[int, RouteEntry]] = PrefixTrie()
        self.neighbors = NeighborTable()
        self._by_next_hop: dict[int, set[Prefix]] = {}
        self._clock = itertools.count(1)
        self.last_event_time = float("-inf")

    def add_route(self, prefix: Prefix, next_hop: int, interface: Optional[str] = None,
                  source: RouteSource = RouteSource.STATIC, up: bool = True) -> RouteEntry:
        entries = self.trie.get(prefix)
        if entries is None:
            entries = {}
            self.trie[prefix] = entries
        entry = entries.get(next_hop)
        if entry is None:
            entry = entries[next_hop] = RouteEntry(prefix, next_hop, interface, up, source)
            self._by_next_hop.setdefault(next_hop, set()).add(prefix)
        else:
            entry.up = up
            entry.source = source
            if interface is not None:
                entry.interface = interface
        entry.updated = next(self._clock)
        return entry

    def remove_route(self, prefix: Prefix, next_hop: int) -> None:
        entries = self.trie.get(prefix)
        if not entries or next_hop not in entries:
            raise UnknownRoute((prefix, next_hop))
        del entries[next_hop]
        if not entries:
            del self.trie[prefix]
        prefixes = self._by_next_hop[next_hop]
        prefixes.discard(prefix)
        if not prefixes:
            del self._by_next_hop[next_hop]

    def routes(self) -> list[RouteEntry]:
        return [e for _, entries in self.trie.items() for e in entries.values()]

    def _best_usable(self, entries: dict[int, RouteEntry]) -> Optional[RouteEntry]:
        best = None
        for entry in entries.values():
            if entry.up and self.neighbors.reachable(entry.next_hop):
                if best is None or entry.updated > best.updated:
                    best = entry
        return best

    def lookup(self, dst: int) -> LookupResult:
        matches = self.trie.matches(dst)
        for _, entries in matches:
            best = self._best_usable(entries)
            if best is not None:
                return Usable(best.next_hop, best.interface, best.prefix)
        if matches:
            return RoutedButDown(matches[0][0])
        return NO_ROUTE

    def usable_route(self, prefix: Prefix) -> Optional[RouteEntry]:
        """The route selected for exactly ``prefix``, if one is usable."""
        entries = self.trie.get(prefix)
        return self._best_usable(entries) if entries else None

    def usable_prefixes(self) -> set[Prefix]:
        return {p for p, entries in self.trie.items() if self._best_usable(entries)}

    def apply_event(self, event: TopologyEvent) -> list[Prefix]:
        """Apply ``event``; return the prefixes that just became usable."""
        if event.time < self.last_event_time:
            raise ValueError(
                f"event at {event.time} precedes previously applied event at {self.last_event_time}"
            )
        self.last_event_time = event.time
        kind = event.kind
        if kind in (EventKind.NEIGHBOR_UP, EventKind.NEIGHBOR_DOWN):
            address = int(event.subject)
            affected = sorted(self._by_next_hop.get(address, ()))
            before = {p for p in affected if self.usable_route(p)}
            self.neighbors.set(address, kind is EventKind.NEIGHBOR_UP, event.time, event.interface)
        else:
            prefix = event.subject
            if not isinstance(prefix, Prefix) or event.next_hop is None:
                raise ValueError("route events need a prefix subject and a next hop")
            affected = [prefix]
            before = {prefix} if self.usable_route(prefix) else set()
            if kind is EventKind.ROUTE_UP:
                self.add_route(prefix, event.next_hop, event.interface, event.source, up=True)
            else:
                entries = self.trie.get(prefix)
                if not entries or event.next_hop not in entries:
                    raise UnknownRoute((prefix, event.next_hop))
                entry = entries[event.next_hop]
                if entry.up:
                    entry.up = False
                    entry.updated = next(self._clock)
        return [p for p in affected if p not in before and self.usable_route(p)]
