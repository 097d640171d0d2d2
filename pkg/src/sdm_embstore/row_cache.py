"""Unified FM row cache with two internally routed sub-caches.

Rows whose stored size is at most the routing threshold go to the
memory-optimized sub-cache (8-byte slots, 8 bytes of metadata per entry,
costlier probes); larger rows go to the CPU-optimized sub-cache (exact-fit
allocation, 48 bytes of metadata, cheap probes). Each sub-cache is split
into partitions by key hash, each a strict LRU with its own lock.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple, Union

from .embedding_core import TableMeta
from .lru import LruPartition, split_capacity

MEM_OPT_META_BYTES = 8
MEM_OPT_SLOT_ALIGN = 8
CPU_OPT_META_BYTES = 48
DEFAULT_ROUTE_THRESHOLD = 255

CacheKey = Tuple[int, int]


class SubCache(str, Enum):
    MEM_OPT = "mem_opt"
    CPU_OPT = "cpu_opt"


def entry_charge(kind: SubCache, row_bytes: int) -> int:
    if kind is SubCache.MEM_OPT:
        return -(-row_bytes // MEM_OPT_SLOT_ALIGN) * MEM_OPT_SLOT_ALIGN + MEM_OPT_META_BYTES
    return row_bytes + CPU_OPT_META_BYTES


def route(dim_bytes: Union[int, TableMeta], threshold: int = DEFAULT_ROUTE_THRESHOLD) -> SubCache:
    if isinstance(dim_bytes, TableMeta):
        dim_bytes = dim_bytes.dim_bytes
    return SubCache.MEM_OPT if dim_bytes <= threshold else SubCache.CPU_OPT


@dataclass
class CacheConfig:
    mem_opt_capacity_bytes: int = 64 << 20
    cpu_opt_capacity_bytes: int = 16 << 20
    partitions: int = 4
    dim_route_threshold_bytes: int = DEFAULT_ROUTE_THRESHOLD
    per_table_enabled: Dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if self.mem_opt_capacity_bytes < 0 or self.cpu_opt_capacity_bytes < 0:
            raise ValueError("cache capacities must be >= 0")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.dim_route_threshold_bytes <= 0:
            raise ValueError("dim_route_threshold_bytes must be > 0")

    def capacity(self, kind: SubCache) -> int:
        return self.mem_opt_capacity_bytes if kind is SubCache.MEM_OPT else self.cpu_opt_capacity_bytes


@dataclass
class SubCacheStats:
    hits: int = 0
    misses: int = 0
    insertions: int = 0
    evictions: int = 0
    refused: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    insertions: int = 0
    evictions: int = 0
    refused: int = 0
    bytes_resident: int = 0
    per_table: Dict[int, list] = field(default_factory=dict)
    per_subcache: Dict[SubCache, SubCacheStats] = field(default_factory=dict)

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def table_hit_rate(self, table_id: int) -> float:
        h, m = self.per_table.get(table_id, (0, 0))
        return h / (h + m) if h + m else 0.0


class _Sub:
    def __init__(self, kind: SubCache, capacity: int, partitions: int):
        self.kind = kind
        self.capacity = capacity
        self.parts = [LruPartition(c) for c in split_capacity(capacity, partitions)]
        self.stats = SubCacheStats()

    def part(self, key) -> LruPartition:
        return self.parts[hash(key) % len(self.parts)]

    @property
    def used(self) -> int:
        return sum(p.used for p in self.parts)


class RowCache:
    """Read-through cache of stored rows keyed by (table_id, row_id)."""

    def __init__(self, config: Optional[CacheConfig] = None):
        self.config = config or CacheConfig()
        cfg = self.config
        self._subs = {k: _Sub(k, cfg.capacity(k), cfg.partitions) for k in SubCache}
        self._row_bytes: Dict[int, int] = {}
        self._route: Dict[int, _Sub] = {}
        self._gen: Dict[int, int] = {}
        self._disabled = {t for t, on in cfg.per_table_enabled.items() if not on}
        self._per_table: Dict[int, list] = {}
        self._stats_lock = threading.Lock()

    # -- table registry ---------------------------------------------------
    def route(self, table: Union[int, TableMeta]) -> SubCache:
        return route(table, self.config.dim_route_threshold_bytes)

    def register_table(self, table_id: int, row_bytes: int) -> SubCache:
        kind = self.route(row_bytes)
        self._row_bytes[table_id] = row_bytes
        self._route[table_id] = self._subs[kind]
        return kind

    def subcache_of(self, table_id: int) -> Optional[SubCache]:
        sub = self._route.get(table_id)
        return sub.kind if sub else None

    def set_table_enabled(self, table_id: int, enabled: bool) -> None:
        with self._stats_lock:
            if enabled:
                if table_id in self._disabled:
                    self._disabled.discard(table_id)
                    self._gen[table_id] = self._gen.get(table_id, 0) + 1
            else:
                self._disabled.add(table_id)

    def is_enabled(self, table_id: int) -> bool:
        return table_id not in self._disabled

    def invalidate_table(self, table_id: int) -> None:
        """Make every entry of the table unreachable; space is reclaimed lazily."""
        with self._stats_lock:
            self._gen[table_id] = self._gen.get(table_id, 0) + 1

    def invalidate(self, key: CacheKey) -> None:
        sub = self._route.get(key[0])
        if sub is None:
            return
        part = sub.part(key)
        with part.lock:
            part.discard(key)

    # -- data path --------------------------------------------------------
    def _count(self, table_id: int, sub: Optional[_Sub], hit: bool) -> None:
        with self._stats_lock:
            pt = self._per_table.get(table_id)
            if pt is None:
                pt = self._per_table[table_id] = [0, 0]
            pt[0 if hit else 1] += 1
            if sub is not None:
                if hit:
                    sub.stats.hits += 1
                else:
                    sub.stats.misses += 1

    def get(self, key: CacheKey) -> Optional[bytes]:
        tid = key[0]
        sub = self._route.get(tid)
        if sub is None or tid in self._disabled:
            self._count(tid, sub, False)
            return None
        part = sub.part(key)
        gen = self._gen.get(tid, 0)
        with part.lock:
            ent = part.get(key)
            if ent is not None and ent[1] != gen:
                part.discard(key)
                ent = None
        self._count(tid, sub, ent is not None)
        return ent[0] if ent is not None else None

    def insert(self, key: CacheKey, row: bytes) -> bool:
        tid = key[0]
        if tid in self._disabled:
            return False
        sub = self._route.get(tid)
        if sub is None:
            self.register_table(tid, len(row))
            sub = self._route[tid]
        charge = entry_charge(sub.kind, len(row))
        part = sub.part(key)
        gen = self._gen.get(tid, 0)
        with part.lock:
            evicted = part.put(key, row, charge, gen)
        with self._stats_lock:
            if evicted is None:
                sub.stats.refused += 1
                return False
            sub.stats.insertions += 1
            sub.stats.evictions += evicted
        return True

    def clear(self) -> None:
        for sub in self._subs.values():
            for p in sub.parts:
                with p.lock:
                    p.clear()

    # -- introspection ----------------------------------------------------
    def bytes_resident(self, kind: Optional[SubCache] = None) -> int:
        if kind is not None:
            return self._subs[kind].used
        return sum(s.used for s in self._subs.values())

    def capacity_rows(self, row_bytes: int) -> int:
        """Rows of this size that fit, assuming a single partition."""
        kind = self.route(row_bytes)
        return self.config.capacity(kind) // entry_charge(kind, row_bytes)

    @property
    def stats(self) -> CacheStats:
        with self._stats_lock:
            out = CacheStats(per_table={k: list(v) for k, v in self._per_table.items()})
            for kind, sub in self._subs.items():
                s = sub.stats
                out.per_subcache[kind] = SubCacheStats(**vars(s))
                out.hits += s.hits
                out.misses += s.misses
                out.insertions += s.insertions
                out.evictions += s.evictions
                out.refused += s.refused
            # lookups on unregistered tables have no sub-cache
            out.misses += sum(v[1] for v in self._per_table.values()) - sum(
                s.stats.misses for s in self._subs.values())
        out.bytes_resident = self.bytes_resident()
        return out
