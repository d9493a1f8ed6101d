"""Hierarchical timer wheel that tracks how long parked packets may stay at rest.

The wheel has 24 bins, six per longevity category::

    labels  0- 5   seconds   10 s per bin, shifts every tick
    labels  6-11   minutes   10 min per bin, shifts every 60th tick
    labels 12-17   hours      4 h per bin, shifts every 1440th tick
    labels 18-23   days       1 day per bin, shifts every 8640th tick

(periods shown for the default 10 s tick).  A new handle goes into the top bin
of its category (5, 11, 17 or 23) and drifts downwards as the bins rotate.
Each tick pops the handles in bin 0 whose deadline has been reached; with
the default tick that is all of bin 0.

Bins are aligned to absolute windows of their level's width.  The top bin of
every level also absorbs the partial window left over when a handle is
inserted between rotations, and the bottom bin of levels 1-3 is kept ordered
by expiry tick: the level below pulls handles out of it as soon as they fit in
its own range.  That is what lets coarse bins hand over to finer ones without
expiring anything early.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .packet import Longevity

BINS_PER_CATEGORY = 6

#: Remaining-lifetime upper bound of each category, in seconds.
CATEGORY_SPAN = {
    Longevity.SECONDS: 60.0,
    Longevity.MINUTES: 3600.0,
    Longevity.HOURS: 86400.0,
    Longevity.DAYS: 6 * 86400.0,
}

#: Width of one bin in each category, in seconds.
BIN_WIDTH = {cat: span / BINS_PER_CATEGORY for cat, span in CATEGORY_SPAN.items()}


class DuplicateHandle(KeyError):
    pass


class UnknownHandle(KeyError):
    pass


@dataclass
class PacketHandle:
    handle_id: int
    deadline: float
    insertion_category: Longevity
    expiry_tick: int
    seq: int


def category_for_remaining(remaining: float) -> Longevity:
    for cat in Longevity:
        if remaining <= CATEGORY_SPAN[cat]:
            return cat
    return Longevity.DAYS


class LifetimeWheel:
    """Tracks packet handles and expires them at their at-rest deadline.

    ``tick`` must be called once per ``tick_granularity`` seconds of simulated
    time, starting at ``start + tick_granularity``.
    """

    def __init__(self, tick_granularity: float = 10.0, start: float = 0.0):
        if tick_granularity <= 0:
            raise ValueError("tick_granularity must be positive")
        periods = []
        for cat in Longevity:
            ratio = BIN_WIDTH[cat] / tick_granularity
            if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(
                    f"tick_granularity {tick_granularity} s does not divide the "
                    f"{cat.name.lower()} bin width {BIN_WIDTH[cat]} s"
                )
            periods.append(round(ratio))
        self.tick_granularity = float(tick_granularity)
        self.start = float(start)
        self.tick_count = 0
        self._periods = periods
        self._levels: list[deque[list]] = [
            deque([] for _ in range(BINS_PER_CATEGORY)) for _ in range(len(periods))
        ]
        self._live: dict[int, PacketHandle] = {}
        self._seq = itertools.count()
        self.inserted = 0
        self.expired = 0
        self.removed = 0

    def __len__(self) -> int:
        return len(self._live)

    def __contains__(self, handle_id: int) -> bool:
        return handle_id in self._live

    @property
    def now(self) -> float:
        """Simulated time of the last tick."""
        return self.start + self.tick_count * self.tick_granularity

    def handle(self, handle_id: int) -> PacketHandle:
        try:
            return self._live[handle_id]
        except KeyError:
            raise UnknownHandle(handle_id) from None

    def insert(self, handle_id: int, category: Longevity, now: float) -> int:
        """Start tracking ``handle_id``; returns the bin label it lands in."""
        if handle_id in self._live:
            raise DuplicateHandle(handle_id)
        category = Longevity(category)
        deadline = now + CATEGORY_SPAN[category]
        exact = (deadline - self.start) / self.tick_granularity
        expiry_tick = max(math.ceil(exact - 1e-9), self.tick_count + 1)
        entry = PacketHandle(handle_id, deadline, category, expiry_tick, next(self._seq))
        self._live[handle_id] = entry
        self.inserted += 1
        return self._place(entry)

    def remove(self, handle_id: int) -> bool:
        # heap entries go stale and are skipped when they surface
        if self._live.pop(handle_id, None) is None:
            return False
        self.removed += 1
        return True

    def current_category(self, handle_id: int, now: float) -> Longevity:
        return category_for_remaining(self.handle(handle_id).deadline - now)

    def tick(self, now: Optional[float] = None) -> list[int]:
        """Advance one tick and return the handles that expired on it."""
        self.tick_count += 1
        k = self.tick_count
        if now is not None and abs(now - self.now) > 1e-6 * max(1.0, abs(now)):
            raise ValueError(f"tick at {now} but the wheel expected {self.now}")

        # bin 0 is ordered by expiry tick; everything due by now sits at its head
        bottom = self._levels[0][0]
        expired = []
        while bottom and bottom[0][0] <= k:
            item = heapq.heappop(bottom)
            if self._is_live(item):
                assert item[0] == k
                del self._live[item[2]]
                expired.append(item[2])
        self.expired += len(expired)

        rotated = [k % p == 0 for p in self._periods]
        for level in range(len(self._periods) - 1, -1, -1):
            if rotated[level]:
                leftover = self._rotate(level)
                assert not any(self._is_live(item) for item in leftover)
        for level in range(len(self._periods) - 2, -1, -1):
            if rotated[level]:
                self._pull_into(level)
        return expired

    def bin_of(self, handle_id: int) -> int:
        """Label (0-23) of the bin currently holding ``handle_id``."""
        entry = self.handle(handle_id)
        for level, bins in enumerate(self._levels):
            for index, heap in enumerate(bins):
                if (entry.expiry_tick, entry.seq, handle_id) in heap:
                    return level * BINS_PER_CATEGORY + index
        raise AssertionError(f"live handle {handle_id} is in no bin")

    def live_handles(self) -> list[int]:
        return list(self._live)

    # -- internals ---------------------------------------------------------

    def _is_live(self, item: tuple[int, int, int]) -> bool:
        entry = self._live.get(item[2])
        return entry is not None and entry.seq == item[1]

    def _window_label(self, level: int, expiry_tick: int) -> int:
        period = self._periods[level]
        return (expiry_tick - 1) // period - self.tick_count // period

    def _place(self, entry: PacketHandle) -> int:
        top = len(self._periods) - 1
        for level in range(len(self._periods)):
            label = self._window_label(level, entry.expiry_tick)
            if label <= BINS_PER_CATEGORY or level == top:
                index = min(label, BINS_PER_CATEGORY - 1)
                heapq.heappush(
                    self._levels[level][index], (entry.expiry_tick, entry.seq, entry.handle_id)
                )
                return level * BINS_PER_CATEGORY + index
        raise AssertionError("unreachable")

    def _rotate(self, level: int) -> list:
        """Shift a level down by one bin; returns the old bottom bin."""
        bins = self._levels[level]
        bottom = bins.popleft()
        bins.append([])
        # the old top bin also held the following window; split it back out
        old_top = bins[BINS_PER_CATEGORY - 2]
        if old_top:
            keep, move = [], []
            for item in old_top:
                if not self._is_live(item):
                    continue
                if self._window_label(level, item[0]) >= BINS_PER_CATEGORY - 1:
                    move.append(item)
                else:
                    keep.append(item)
            heapq.heapify(keep)
            heapq.heapify(move)
            bins[BINS_PER_CATEGORY - 2] = keep
            bins[BINS_PER_CATEGORY - 1] = move
        return bottom

    def _pull_into(self, level: int) -> None:
        source = self._levels[level + 1][0]
        while source:
            item = source[0]
            if not self._is_live(item):
                heapq.heappop(source)
                continue
            if self._window_label(level, item[0]) > BINS_PER_CATEGORY:
                break
            heapq.heappop(source)
            self._place(self._live[item[2]])
