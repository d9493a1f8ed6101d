"""Counting Bloom filter over packet digests."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from typing import Optional

COUNTER_MAX = 0xFF


def dimension(capacity: int, target_fpr: float) -> tuple[int, int]:
    """Number of counters ``m`` and hash functions ``k`` for a target FPR.

    >>> dimension(1000, 0.01)
    (9586, 7)
    """
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if not 0.0 < target_fpr < 1.0:
        raise ValueError(f"target_fpr must be in (0, 1), got {target_fpr}")
    m = math.ceil(-capacity * math.log(target_fpr) / math.log(2) ** 2)
    k = max(1, round(m / capacity * math.log(2)))
    return m, k


class CountingBloomFilter:
    """Bloom filter with 8-bit saturating counters, so members can be removed.

    Index ``i`` of a key is ``(h1 + i * h2) mod m`` where ``h1``/``h2`` are
    the two halves of one keyed BLAKE2b hash.  A counter that reaches 255
    stays there (and is never decremented again); ``overflowed`` records that
    this happened.

    With ``debug=True`` an exact shadow multiset rejects removal of keys that
    were never inserted, even when all their counters happen to be non-zero.
    """

    def __init__(self, m: int, k: int, hash_seed: bytes = b"", debug: bool = False):
        if m < 1 or k < 1:
            raise ValueError("m and k must be positive")
        self.m = m
        self.k = k
        self.hash_seed = bytes(hash_seed)[:64]
        self.counters = bytearray(m)
        self.n_live = 0
        self.overflowed = False
        self._shadow: Optional[Counter] = Counter() if debug else None

    @classmethod
    def for_capacity(cls, capacity: int, target_fpr: float = 0.01, **kwargs) -> "CountingBloomFilter":
        m, k = dimension(capacity, target_fpr)
        return cls(m, k, **kwargs)

    def _indexes(self, key: bytes) -> list[int]:
        h = hashlib.blake2b(key, digest_size=16, key=self.hash_seed).digest()
        h1 = int.from_bytes(h[:8], "big")
        h2 = int.from_bytes(h[8:], "big") | 1
        m = self.m
        return [(h1 + i * h2) % m for i in range(self.k)]

    def insert(self, key: bytes) -> None:
        for idx in self._indexes(key):
            if self.counters[idx] == COUNTER_MAX:
                self.overflowed = True
            else:
                self.counters[idx] += 1
        self.n_live += 1
        if self._shadow is not None:
            self._shadow[key] += 1

    add = insert

    def remove(self, key: bytes) -> bool:
        """Decrement ``key``'s counters; False (and no change) if it is absent."""
        idxs = self._indexes(key)
        if self._shadow is not None:
            if not self._shadow[key]:
                return False
            self._shadow[key] -= 1
            if not self._shadow[key]:
                del self._shadow[key]
        elif not all(self.counters[i] for i in idxs):
            return False
        for idx in idxs:
            if self.counters[idx] != COUNTER_MAX:
                self.counters[idx] -= 1
        self.n_live -= 1
        return True

    def contains(self, key: bytes) -> bool:
        counters = self.counters
        return all(counters[i] for i in self._indexes(key))

    __contains__ = contains

    def __len__(self) -> int:
        return self.n_live

    def expected_fpr(self, n: Optional[int] = None) -> float:
        n = self.n_live if n is None else n
        return (1.0 - math.exp(-self.k * n / self.m)) ** self.k

    def is_empty(self) -> bool:
        return not any(self.counters)
