"""IPv4 prefixes and a binary (one bit per level) prefix trie."""

from __future__ import annotations

import ipaddress
from typing import Any, Generic, Iterator, NamedTuple, Optional, TypeVar

V = TypeVar("V")

_MISSING: Any = object()


def _mask(length: int) -> int:
    return (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF if length else 0


class Prefix(NamedTuple):
    network: int
    length: int

    @classmethod
    def parse(cls, text: str) -> "Prefix":
        net = ipaddress.IPv4Network(text.strip(), strict=True)
        return cls(int(net.network_address), net.prefixlen)

    @classmethod
    def host(cls, address: int) -> "Prefix":
        return cls(address, 32)

    @classmethod
    def of(cls, address: int, length: int) -> "Prefix":
        """Build a prefix, masking off host bits."""
        return cls(address & _mask(length), length)

    def contains(self, address: int) -> bool:
        return (address & _mask(self.length)) == self.network

    def covers(self, other: "Prefix") -> bool:
        return other.length >= self.length and self.contains(other.network)

    def __str__(self) -> str:
        return f"{ipaddress.IPv4Address(self.network)}/{self.length}"


DEFAULT_ROUTE = Prefix(0, 0)


class _Node:
    __slots__ = ("children", "value")

    def __init__(self) -> None:
        self.children: list[Optional[_Node]] = [None, None]
        self.value: Any = _MISSING


class PrefixTrie(Generic[V]):
    """Map from :class:`Prefix` to values with longest-prefix-match lookup."""

    def __init__(self) -> None:
        self._root = _Node()
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __contains__(self, prefix: Prefix) -> bool:
        node = self._find(prefix)
        return node is not None and node.value is not _MISSING

    def _find(self, prefix: Prefix) -> Optional[_Node]:
        node: Optional[_Node] = self._root
        addr = prefix.network
        for i in range(prefix.length):
            node = node.children[(addr >> (31 - i)) & 1]
            if node is None:
                return None
        return node

    def __setitem__(self, prefix: Prefix, value: V) -> None:
        node = self._root
        addr = prefix.network
        for i in range(prefix.length):
            bit = (addr >> (31 - i)) & 1
            child = node.children[bit]
            if child is None:
                child = node.children[bit] = _Node()
            node = child
        if node.value is _MISSING:
            self._size += 1
        node.value = value

    def __getitem__(self, prefix: Prefix) -> V:
        node = self._find(prefix)
        if node is None or node.value is _MISSING:
            raise KeyError(prefix)
        return node.value

    def get(self, prefix: Prefix, default: Optional[V] = None) -> Optional[V]:
        node = self._find(prefix)
        if node is None or node.value is _MISSING:
            return default
        return node.value

    def __delitem__(self, prefix: Prefix) -> None:
        path = [self._root]
        addr = prefix.network
        for i in range(prefix.length):
            nxt = path[-1].children[(addr >> (31 - i)) & 1]
            if nxt is None:
                raise KeyError(prefix)
            path.append(nxt)
        if path[-1].value is _MISSING:
            raise KeyError(prefix)
        path[-1].value = _MISSING
        self._size -= 1
        # prune now-empty branches
        for depth in range(prefix.length, 0, -1):
            node = path[depth]
            if node.value is not _MISSING or node.children[0] or node.children[1]:
                break
            path[depth - 1].children[(addr >> (32 - depth)) & 1] = None

    def longest_match(self, address: int) -> Optional[tuple[Prefix, V]]:
        node = self._root
        best_len = 0 if node.value is not _MISSING else -1
        best = node.value
        for i in range(32):
            node = node.children[(address >> (31 - i)) & 1]
            if node is None:
                break
            if node.value is not _MISSING:
                best_len, best = i + 1, node.value
        if best_len < 0:
            return None
        return Prefix.of(address, best_len), best

    def matches(self, address: int) -> list[tuple[Prefix, V]]:
        """All stored prefixes containing ``address``, longest first."""
        out = []
        node: Optional[_Node] = self._root
        depth = 0
        while node is not None:
            if node.value is not _MISSING:
                out.append((Prefix.of(address, depth), node.value))
            if depth == 32:
                break
            node = node.children[(address >> (31 - depth)) & 1]
            depth += 1
        out.reverse()
        return out

    def covered(self, prefix: Prefix) -> Iterator[tuple[Prefix, V]]:
        """Entries at or below ``prefix`` (``prefix`` covers each of them)."""
        node = self._find(prefix)
        if node is None:
            return
        stack = [(node, prefix.network, prefix.length)]
        while stack:
            node, net, length = stack.pop()
            if node.value is not _MISSING:
                yield Prefix(net, length), node.value
            # push 1 before 0 so iteration is in address order
            for bit in (1, 0):
                child = node.children[bit]
                if child is not None:
                    stack.append((child, net | (bit << (31 - length)), length + 1))

    def items(self) -> Iterator[tuple[Prefix, V]]:
        return self.covered(DEFAULT_ROUTE)
