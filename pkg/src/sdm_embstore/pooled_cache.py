"""Cache of fully pooled vectors keyed by an order-invariant sequence hash."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .lru import LruPartition, split_capacity

POOLED_META_BYTES = 32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TABLE_SALT = 0x5DB3C0DE1F2E3A4B
_LEN_SALT = 0x2545F4914F6CDD1D


def mix64(x) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class PooledKey:
    table_id: int
    seq_hash: int
    seq_len: int


def table_salt(table_id: int) -> int:
    return int(mix64(np.array([(table_id ^ _TABLE_SALT) & 0xFFFFFFFFFFFFFFFF]))[0])


def sequence_key(table_id: int, indices: Sequence[int], salt: Optional[int] = None) -> PooledKey:
    """Order-invariant, multiplicity-sensitive key for an index sequence.

    Per-index hashes are summed modulo 2**64, so any permutation gives the
    same sum while repeated indices still contribute once per occurrence.
    """
    n = len(indices)
    if n == 0:
        raise ValueError("indices must be non-empty")
    if salt is None:
        salt = table_salt(table_id)
    s = np.uint64(salt)
    per = mix64(np.asarray(indices, dtype=np.int64).astype(np.uint64) ^ s)
    total = per.sum(dtype=np.uint64)
    tail = mix64(np.array([n ^ _LEN_SALT], dtype=np.uint64) + s)
    h = mix64(np.array([total], dtype=np.uint64) ^ tail)
    return PooledKey(table_id, int(h[0]), n)


@dataclass
class PooledConfig:
    capacity_bytes: int = 16 << 20
    len_threshold: int = 1
    partitions: int = 4
    audit: bool = False

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ValueError("capacity_bytes must be >= 0")
        if self.len_threshold < 1:
            raise ValueError("len_threshold must be >= 1")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")


@dataclass
class PooledStats:
    hits: int = 0
    misses: int = 0
    stores: int = 0
    refused: int = 0
    evictions: int = 0
    collisions: int = 0
    bytes_resident: int = 0
    per_table: Dict[int, list] = field(default_factory=dict)

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


def entry_charge(elem_count: int) -> int:
    return elem_count * 4 + POOLED_META_BYTES


class PooledCache:
    def __init__(self, config: Optional[PooledConfig] = None):
        self.config = config or PooledConfig()
        cfg = self.config
        self._parts = [LruPartition(c) for c in split_capacity(cfg.capacity_bytes, cfg.partitions)]
        self._gen: Dict[int, int] = {}
        self._stats = PooledStats()
        self._lock = threading.Lock()
        self._audit: Dict[PooledKey, tuple] = {}

    def eligible(self, seq_len: int) -> bool:
        return seq_len > self.config.len_threshold

    def _part(self, key: PooledKey) -> LruPartition:
        return self._parts[key.seq_hash % len(self._parts)]

    def _count(self, table_id: int, hit: bool) -> None:
        with self._lock:
            pt = self._stats.per_table.setdefault(table_id, [0, 0])
            if hit:
                self._stats.hits += 1
                pt[0] += 1
            else:
                self._stats.misses += 1
                pt[1] += 1

    def lookup(self, key: PooledKey, indices: Optional[Sequence[int]] = None) -> Optional[np.ndarray]:
        part = self._part(key)
        gen = self._gen.get(key.table_id, 0)
        with part.lock:
            ent = part.get(key)
            if ent is not None and ent[1] != gen:
                part.discard(key)
                ent = None
        if ent is not None and self.config.audit and indices is not None:
            if self._audit.get(key) != tuple(sorted(indices)):
                with self._lock:
                    self._stats.collisions += 1
                ent = None
        self._count(key.table_id, ent is not None)
        return ent[0] if ent is not None else None

    def store(self, key: PooledKey, pooled: np.ndarray, source_len: Optional[int] = None,
              indices: Optional[Sequence[int]] = None) -> bool:
        n = key.seq_len if source_len is None else source_len
        if not self.eligible(n):
            with self._lock:
                self._stats.refused += 1
            return False
        vec = np.array(pooled, dtype=np.float32, copy=True)
        vec.flags.writeable = False
        part = self._part(key)
        gen = self._gen.get(key.table_id, 0)
        with part.lock:
            evicted = part.put(key, vec, entry_charge(vec.size), gen)
        with self._lock:
            if evicted is None:
                self._stats.refused += 1
                return False
            self._stats.stores += 1
            self._stats.evictions += evicted
            if self.config.audit and indices is not None:
                seq = tuple(sorted(indices))
                prev = self._audit.get(key)
                if prev is not None and prev != seq:
                    self._stats.collisions += 1
                self._audit[key] = seq
        return True

    def invalidate_table(self, table_id: int) -> None:
        with self._lock:
            self._gen[table_id] = self._gen.get(table_id, 0) + 1

    def clear(self) -> None:
        for p in self._parts:
            with p.lock:
                p.clear()

    @property
    def bytes_resident(self) -> int:
        return sum(p.used for p in self._parts)

    @property
    def stats(self) -> PooledStats:
        with self._lock:
            s = PooledStats(**{k: v for k, v in vars(self._stats).items() if k != "per_table"})
            s.per_table = {k: list(v) for k, v in self._stats.per_table.items()}
        s.bytes_resident = self.bytes_resident
        return s
