"""Byte-budgeted, lock-per-partition LRU store shared by the FM caches."""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Hashable, List, Optional, Tuple


class LruPartition:
    """One partition: strict LRU over entries charged in bytes."""

    __slots__ = ("capacity", "used", "entries", "lock", "on_evict")

    def __init__(self, capacity: int, on_evict: Optional[Callable] = None):
        self.capacity = capacity
        self.used = 0
        self.entries: "OrderedDict[Hashable, Tuple[object, int, int]]" = OrderedDict()
        self.lock = threading.Lock()
        self.on_evict = on_evict

    def get(self, key):
        """Return (value, tag) and refresh recency, or None."""
        ent = self.entries.get(key)
        if ent is None:
            return None
        self.entries.move_to_end(key)
        return ent[0], ent[2]

    def put(self, key, value, charge: int, tag: int = 0) -> Optional[int]:
        """Insert or replace. Returns number of evictions, or None if refused."""
        if charge > self.capacity:
            return None
        old = self.entries.pop(key, None)
        if old is not None:
            self.used -= old[1]
        evicted = 0
        while self.used + charge > self.capacity:
            k, (v, c, t) = self.entries.popitem(last=False)
            self.used -= c
            evicted += 1
            if self.on_evict is not None:
                self.on_evict(k, c)
        self.entries[key] = (value, charge, tag)
        self.used += charge
        return evicted

    def discard(self, key) -> int:
        ent = self.entries.pop(key, None)
        if ent is None:
            return 0
        self.used -= ent[1]
        return ent[1]

    def clear(self) -> None:
        self.entries.clear()
        self.used = 0


def split_capacity(total: int, partitions: int) -> List[int]:
    base, extra = divmod(total, partitions)
    return [base + (1 if i < extra else 0) for i in range(partitions)]
