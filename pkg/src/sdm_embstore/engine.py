"""Serving pipeline over the FM caches and the SM device.

Time is virtual (microseconds). Each embedding operator (one table over
all of a query's lookups for it) runs three phases: a CPU probe phase
(pooled-cache and row-cache probes), a device phase (all row misses of the
operator submitted as one batch), and a CPU pooling phase. In overlapped
mode every operator of a group starts at the query's start time and the
user and item groups run side by side; in sequential mode operators run
back to back. Lookups are always processed in the same logical order, so
cache contents and pooled outputs do not depend on the mode.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .embedding_core import (
    PRUNED,
    EmbeddingTable,
    PruningMap,
    QuantizedRow,
    QueryBatch,
    Role,
    TableMeta,
    decode_rows,
    dequantize_row,
    dequantize_table_at_load,
    pool_vectors,
)
from .pooled_cache import PooledCache, PooledConfig, sequence_key, table_salt
from .row_cache import CacheConfig, RowCache, SubCache
from .scm_device import DeviceError, IoRequest, QueueFullError, SimDevice

log = logging.getLogger(__name__)


class EngineError(Exception):
    pass


class QueryError(EngineError, ValueError):
    pass


class PlacementError(EngineError):
    pass


class CapacityError(EngineError):
    def __init__(self, message: str, report: Dict[str, int]):
        super().__init__(message + " " + ", ".join(f"{k}={v}" for k, v in report.items()))
        self.report = report


class Placement(str, Enum):
    FM_DIRECT = "fm_direct"
    SM_CACHED = "sm_cached"
    SM_UNCACHED = "sm_uncached"


class Mode(str, Enum):
    SEQUENTIAL = "sequential"
    OVERLAPPED = "overlapped"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        v = str(value).lower()
        if v in ("seq", "sequential"):
            return cls.SEQUENTIAL
        if v in ("overlap", "overlapped"):
            return cls.OVERLAPPED
        raise ValueError(f"unknown execution mode {value!r}")


@dataclass
class ModelManifest:
    tables: List[TableMeta]
    pruning: Dict[int, PruningMap] = field(default_factory=dict)
    fm_only: Set[int] = field(default_factory=set)
    no_cache: Set[int] = field(default_factory=set)
    quantization: str = "int8_rowwise"

    def __post_init__(self):
        ids = [t.table_id for t in self.tables]
        if len(set(ids)) != len(ids):
            raise ValueError("table ids must be unique")
        by_id = {t.table_id: t for t in self.tables}
        for tid, pm in self.pruning.items():
            meta = by_id.get(tid)
            if meta is None:
                raise ValueError(f"pruning map for unknown table {tid}")
            if not meta.pruned:
                raise ValueError(f"table {tid} has a pruning map but is not flagged pruned")
            if pm.unpruned_rows != meta.num_rows:
                raise ValueError(
                    f"table {tid}: pruning map covers {pm.unpruned_rows} rows, "
                    f"manifest says {meta.num_rows}")
        for t in self.tables:
            if t.pruned and t.table_id not in self.pruning:
                raise ValueError(f"table {t.table_id} is flagged pruned but has no pruning map")
        self._by_id = by_id

    def table(self, table_id: int) -> TableMeta:
        return self._by_id[table_id]

    @property
    def table_ids(self) -> List[int]:
        return [t.table_id for t in self.tables]

    def stored_rows(self, table_id: int, deprune: bool = False) -> int:
        pm = self.pruning.get(table_id)
        if pm is None or deprune:
            return self._by_id[table_id].num_rows
        return pm.pruned_num_rows

    def table_bytes(self, table_id: int, deprune: bool = False) -> int:
        return self.stored_rows(table_id, deprune) * self._by_id[table_id].dim_bytes

    def total_bytes(self, deprune: bool = False) -> int:
        return sum(self.table_bytes(t, deprune) for t in self.table_ids)

    def mapping_bytes(self) -> int:
        return sum(pm.size_bytes for pm in self.pruning.values())


@dataclass
class PlacementPlan:
    assignment: Dict[int, Placement]
    fm_budget_bytes: int
    policy: str
    deprune: bool = False
    fm_table_bytes: int = 0
    mapping_bytes: int = 0

    @property
    def fm_bytes(self) -> int:
        return self.fm_table_bytes + self.mapping_bytes

    def tables_with(self, placement: Placement) -> List[int]:
        return [t for t, p in self.assignment.items() if p is placement]


POLICIES = ("sm_only", "fixed_fm")


def bw_density(meta: TableMeta, table_bytes: int) -> float:
    return meta.avg_pooling_factor * meta.dim_bytes / table_bytes


def plan_placement(manifest: ModelManifest, policy: str = "sm_only", fm_budget_bytes: int = 0,
                   deprune: bool = False) -> PlacementPlan:
    """Assign every table to FM directly or to SM (cached or not).

    Deny-listed tables always go to FM. Mapping tensors of pruned tables
    stay in FM unless de-pruned, and are charged against the budget first.
    """
    if fm_budget_bytes < 0:
        raise PlacementError("fm_budget_bytes must be >= 0")
    if policy not in POLICIES:
        raise PlacementError(f"unknown placement policy {policy!r}; choose from {POLICIES}")
    mapping = 0 if deprune else manifest.mapping_bytes()
    left = fm_budget_bytes - mapping
    if left < 0:
        raise PlacementError(
            f"mapping tensors need {mapping} FM bytes, budget is {fm_budget_bytes}")
    assignment: Dict[int, Placement] = {}
    fm_bytes = 0
    for tid in sorted(manifest.fm_only):
        size = manifest.table_bytes(tid, deprune)
        if size > left:
            raise PlacementError(
                f"deny-listed tables exceed the FM budget ({fm_budget_bytes} bytes)")
        assignment[tid] = Placement.FM_DIRECT
        left -= size
        fm_bytes += size
    if policy == "fixed_fm":
        ranked = sorted(
            (t for t in manifest.tables if t.table_id not in assignment),
            key=lambda t: (-bw_density(t, manifest.table_bytes(t.table_id, deprune)), t.table_id))
        for meta in ranked:
            size = manifest.table_bytes(meta.table_id, deprune)
            if size <= left:
                assignment[meta.table_id] = Placement.FM_DIRECT
                left -= size
                fm_bytes += size
    for meta in manifest.tables:
        if meta.table_id not in assignment:
            assignment[meta.table_id] = (
                Placement.SM_UNCACHED if meta.table_id in manifest.no_cache
                else Placement.SM_CACHED)
    return PlacementPlan(assignment, fm_budget_bytes, policy, deprune, fm_bytes, mapping)


@dataclass
class LoadOptions:
    deprune: bool = False
    dequantize_at_load: bool = False


@dataclass
class TimingModel:
    """CPU-side costs in microseconds; device time comes from the simulator."""

    fm_bytes_per_us: float = 10_000.0
    fm_row_us: float = 0.02
    mapping_lookup_us: float = 0.01
    pooled_probe_us: float = 0.08
    hash_per_index_us: float = 0.004
    probe_us: Dict[SubCache, float] = field(default_factory=lambda: {
        SubCache.MEM_OPT: 0.12, SubCache.CPU_OPT: 0.06})
    cache_insert_us: float = 0.05
    io_submit_us: float = 0.25
    dequant_per_elem_us: float = 0.0008
    accumulate_per_elem_us: float = 0.0004


@dataclass
class EngineCounters:
    queries: int = 0
    lookups: int = 0
    sm_indices: int = 0
    row_lookups: int = 0
    row_hits: int = 0
    row_misses: int = 0
    pooled_probes: int = 0
    pooled_hits: int = 0
    device_reads: int = 0
    bytes_requested: int = 0
    rejected_reads: int = 0
    pruned_skips: int = 0
    fm_rows: int = 0
    errors: int = 0
    deferred_queries: int = 0

    def copy(self) -> "EngineCounters":
        return EngineCounters(**vars(self))

    def minus(self, other: "EngineCounters") -> "EngineCounters":
        return EngineCounters(**{k: v - getattr(other, k) for k, v in vars(self).items()})


@dataclass
class LookupResult:
    query_id: int
    pooled: Dict[int, List[np.ndarray]]
    user_us: float
    item_us: float
    end_to_end_us: float
    start_us: float = 0.0
    row_cache_hits: int = 0
    pooled_hits: int = 0
    device_reads: int = 0
    deferred: bool = False


@dataclass
class UpdateReport:
    applied: int = 0
    rejected: List[Tuple[int, int, str]] = field(default_factory=list)


@dataclass
class WarmupReport:
    steady_hit_rate: float
    queries_to_target: Optional[int]
    target_fraction: float
    warmup_qps_ratio: float
    window: int
    hit_series: np.ndarray
    smoothed: np.ndarray

    @property
    def warmup_queries(self) -> int:
        return self.queries_to_target if self.queries_to_target is not None else len(self.hit_series)


class _RWLock:
    """Many readers or one writer; writers wait for readers to drain."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class _Table:
    __slots__ = ("meta", "placement", "quantized", "row_bytes", "base", "fm_rows", "mapping",
                 "salt", "cached", "stored_rows", "probe_us", "elem")

    def __init__(self, meta: TableMeta, placement: Placement, table: EmbeddingTable):
        self.meta = meta
        self.placement = placement
        self.quantized = table.quantized
        self.row_bytes = table.row_bytes
        self.stored_rows = table.stored_rows
        self.mapping = table.pruning.mapping if table.pruning is not None else None
        self.base = 0
        self.fm_rows: Optional[np.ndarray] = None
        self.salt = table_salt(meta.table_id)
        self.cached = placement is Placement.SM_CACHED
        self.probe_us = 0.0
        self.elem = meta.elem_count


class Engine:
    def __init__(self, device: SimDevice, cache_config: Optional[CacheConfig] = None,
                 pooled_config: Optional[PooledConfig] = None,
                 timing: Optional[TimingModel] = None, row_cache_enabled: bool = True,
                 pooled_cache_enabled: bool = True, subblock: bool = True):
        self.device = device
        self.cache_config = cache_config or CacheConfig()
        self.pooled_config = pooled_config or PooledConfig()
        self.timing = timing or TimingModel()
        self.row_cache_enabled = row_cache_enabled
        self.pooled_cache_enabled = pooled_cache_enabled
        self.subblock = subblock and device.profile.supports_subblock
        self.row_cache = RowCache(self.cache_config)
        self.pooled_cache = PooledCache(self.pooled_config)
        self.counters = EngineCounters()
        self.clock_us = 0.0
        self.plan: Optional[PlacementPlan] = None
        self.options = LoadOptions()
        self._tables: Dict[int, _Table] = {}
        self._rw = _RWLock()
        self._stats_lock = threading.Lock()

    # -- loading ----------------------------------------------------------
    def load_model(self, manifest: ModelManifest, tables: Dict[int, EmbeddingTable],
                   plan: PlacementPlan, options: Optional[LoadOptions] = None) -> None:
        """Serialize tables to SM (or keep them in FM) according to ``plan``."""
        options = options or LoadOptions()
        missing = set(manifest.table_ids) - set(plan.assignment)
        if missing:
            raise PlacementError(f"tables without placement: {sorted(missing)}")
        prepared: Dict[int, EmbeddingTable] = {}
        for meta in manifest.tables:
            t = tables[meta.table_id]
            if t.meta != meta:
                raise ValueError(f"table {meta.table_id}: data does not match manifest")
            if options.deprune and t.pruning is not None:
                t = t.deprune()
            if plan.assignment[meta.table_id] is not Placement.FM_DIRECT and options.dequantize_at_load:
                t = dequantize_table_at_load(t)
            prepared[meta.table_id] = t

        fm_tables = sum(t.size_bytes for tid, t in prepared.items()
                        if plan.assignment[tid] is Placement.FM_DIRECT)
        fm_map = sum(t.pruning.size_bytes for t in prepared.values() if t.pruning is not None)
        if fm_tables + fm_map > plan.fm_budget_bytes:
            raise CapacityError("FM budget exceeded;", {
                "fm_budget_bytes": plan.fm_budget_bytes, "fm_table_bytes": fm_tables,
                "fm_mapping_bytes": fm_map})
        bb = self.device.profile.block_bytes
        layout: Dict[int, int] = {}
        cursor = 0
        for tid, t in prepared.items():
            if plan.assignment[tid] is Placement.FM_DIRECT:
                continue
            layout[tid] = cursor
            cursor += -(-t.size_bytes // bb) * bb
        if cursor > self.device.capacity_bytes:
            raise CapacityError("device capacity exceeded;", {
                "device_capacity_bytes": self.device.capacity_bytes,
                "sm_bytes_required": cursor,
                "sm_table_bytes": sum(prepared[t].size_bytes for t in layout)})

        with self._rw.write():
            self.row_cache = RowCache(self.cache_config)
            self.pooled_cache = PooledCache(self.pooled_config)
            self._tables = {}
            for meta in manifest.tables:
                tid = meta.table_id
                t = prepared[tid]
                st = _Table(meta, plan.assignment[tid], t)
                if st.placement is Placement.FM_DIRECT:
                    st.fm_rows = t.rows.copy()
                else:
                    st.base = layout[tid]
                    if t.size_bytes:
                        self.device.write_region(st.base, t.to_bytes())
                    kind = self.row_cache.register_table(tid, t.row_bytes)
                    st.probe_us = self.timing.probe_us[kind]
                self._tables[tid] = st
            self.plan = plan
            self.options = options
            self.manifest = manifest
        log.info("loaded %d tables: %d FM bytes, %d SM bytes", len(self._tables),
                 fm_tables + fm_map, cursor)

    @property
    def fm_bytes_resident(self) -> int:
        total = 0
        for st in self._tables.values():
            if st.fm_rows is not None:
                total += st.fm_rows.nbytes
            if st.mapping is not None:
                total += self.manifest.pruning[st.meta.table_id].size_bytes
        return total

    @property
    def sm_bytes(self) -> int:
        return sum(st.stored_rows * st.row_bytes for st in self._tables.values()
                   if st.placement is not Placement.FM_DIRECT)

    def table_state(self, table_id: int) -> _Table:
        return self._tables[table_id]

    def sm_tables(self) -> List[int]:
        return [t for t, st in self._tables.items() if st.placement is not Placement.FM_DIRECT]

    # -- lookup path ------------------------------------------------------
    def _check(self, st: _Table, idx: Sequence[int]) -> np.ndarray:
        arr = np.asarray(idx, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= st.meta.num_rows):
            bad = int(arr[(arr < 0) | (arr >= st.meta.num_rows)][0])
            raise QueryError(
                f"index {bad} out of range for table {st.meta.table_id} "
                f"({st.meta.num_rows} rows)")
        return arr

    def _pool_block(self, st: _Table, block: np.ndarray) -> np.ndarray:
        if block.shape[0] == 0:
            return np.zeros(st.elem, dtype=np.float32)
        return pool_vectors(decode_rows(block, st.quantized), st.elem)

    def _run_op(self, st: _Table, lookups: Sequence[Sequence[int]], t0: float, c: EngineCounters):
        """One embedding operator over all lookups of a table. Returns
        (pooled vectors, end time, any IO deferred)."""
        tm = self.timing
        tid = st.meta.table_id
        out: List[Optional[np.ndarray]] = [None] * len(lookups)
        arrays = [self._check(st, idx) for idx in lookups]
        cpu = 0.0
        c.lookups += len(lookups)

        if st.placement is Placement.FM_DIRECT:
            for j, arr in enumerate(arrays):
                if st.mapping is not None:
                    cpu += arr.size * tm.mapping_lookup_us
                    stored = st.mapping[arr]
                    c.pruned_skips += int(np.count_nonzero(stored == PRUNED))
                    stored = stored[stored != PRUNED]
                else:
                    stored = arr
                c.fm_rows += stored.size
                cpu += stored.size * (tm.fm_row_us + st.row_bytes / tm.fm_bytes_per_us
                                      + st.elem * (tm.dequant_per_elem_us + tm.accumulate_per_elem_us))
                out[j] = self._pool_block(st, st.fm_rows[stored])
            return out, t0 + cpu, False

        pooled_on = self.pooled_cache_enabled
        row_on = self.row_cache_enabled and st.cached
        cache = self.row_cache
        pending = []
        requests: List[IoRequest] = []
        req_slots = []
        rb = st.row_bytes
        for j, arr in enumerate(arrays):
            n = arr.size
            c.sm_indices += n
            key = None
            if pooled_on and self.pooled_cache.eligible(n):
                cpu += tm.pooled_probe_us + n * tm.hash_per_index_us
                key = sequence_key(tid, arr, st.salt)
                c.pooled_probes += 1
                hit = self.pooled_cache.lookup(key)
                if hit is not None:
                    c.pooled_hits += 1
                    out[j] = hit
                    continue
            if st.mapping is not None:
                cpu += n * tm.mapping_lookup_us
                stored = st.mapping[arr]
                skips = int(np.count_nonzero(stored == PRUNED))
                if skips:
                    c.pruned_skips += skips
                    stored = stored[stored != PRUNED]
            else:
                stored = arr
            rows = stored.tolist()
            slots: List[Optional[bytes]] = [None] * len(rows)
            c.row_lookups += len(rows)
            for p, r in enumerate(rows):
                if row_on:
                    cpu += st.probe_us
                    got = cache.get((tid, r))
                    if got is not None:
                        slots[p] = got
                        c.row_hits += 1
                        continue
                c.row_misses += 1
                requests.append(IoRequest(tid, st.base + r * rb, rb, self.subblock))
                req_slots.append((slots, p, r))
            pending.append((j, slots, key))

        t_io = t0 + cpu
        deferred = False
        if requests:
            t_submit = t_io + len(requests) * tm.io_submit_us
            try:
                handle = self.device.submit_reads(requests, t_submit)
            except QueueFullError:
                c.rejected_reads += len(requests)
                raise
            for (slots, p, r), comp in zip(req_slots, handle.in_order()):
                if not comp.ok:
                    raise EngineError(f"device read failed for table {tid} row {r}: {comp.error}")
                slots[p] = comp.data
                if row_on:
                    cache.insert((tid, r), comp.data)
            c.device_reads += len(requests)
            c.bytes_requested += len(requests) * rb
            deferred = handle.any_deferred
            t_io = max(handle.done_us, t_submit)
            if row_on:
                t_io += len(requests) * tm.cache_insert_us

        cpu2 = 0.0
        per_row = st.elem * ((tm.dequant_per_elem_us if st.quantized else 0.0)
                             + tm.accumulate_per_elem_us)
        for j, slots, key in pending:
            if slots:
                block = np.frombuffer(b"".join(slots), dtype=np.uint8).reshape(len(slots), rb)
            else:
                block = np.zeros((0, rb), dtype=np.uint8)
            vec = self._pool_block(st, block)
            cpu2 += len(slots) * per_row
            out[j] = vec
            if key is not None:
                self.pooled_cache.store(key, vec)
        return out, t_io + cpu2, deferred

    def lookup_pooled(self, table_id: int, indices: Sequence[int]) -> np.ndarray:
        """Pooled vector for one lookup, advancing the engine clock."""
        st = self._tables.get(table_id)
        if st is None:
            raise QueryError(f"unknown table {table_id}")
        with self._rw.read():
            c = EngineCounters()
            try:
                out, end, _ = self._run_op(st, [indices], self.clock_us, c)
            except QueryError:
                c.errors += 1
                raise
            finally:
                self._merge(c)
        self.clock_us = end
        return out[0]

    def _merge(self, c: EngineCounters) -> None:
        with self._stats_lock:
            for k, v in vars(c).items():
                setattr(self.counters, k, getattr(self.counters, k) + v)

    def execute_query(self, batch: QueryBatch, mode="overlapped",
                      start_us: Optional[float] = None) -> LookupResult:
        mode = Mode.parse(mode)
        advance = start_us is None
        t0 = self.clock_us if advance else start_us
        c = EngineCounters(queries=1)
        ops_user = [(tid, [batch.user[tid]]) for tid in batch.user]
        ops_item = [(tid, batch.item[tid]) for tid in batch.item]
        pooled: Dict[int, List[np.ndarray]] = {}
        deferred = False
        with self._rw.read():
            try:
                if mode is Mode.OVERLAPPED:
                    ends = []
                    for group in (ops_user, ops_item):
                        end = t0
                        for tid, lookups in group:
                            vecs, e, d = self._run_op(self._state(tid), lookups, t0, c)
                            pooled[tid] = vecs
                            deferred |= d
                            end = max(end, e)
                        ends.append(end)
                    user_us, item_us = ends[0] - t0, ends[1] - t0
                    e2e = max(user_us, item_us)
                else:
                    t = t0
                    marks = []
                    for group in (ops_user, ops_item):
                        for tid, lookups in group:
                            vecs, t, d = self._run_op(self._state(tid), lookups, t, c)
                            pooled[tid] = vecs
                            deferred |= d
                        marks.append(t)
                    user_us, item_us = marks[0] - t0, marks[1] - marks[0]
                    e2e = user_us + item_us
            except (QueryError, DeviceError):
                c.errors += 1
                raise
            finally:
                c.deferred_queries += int(deferred)
                self._merge(c)
        if advance:
            self.clock_us = t0 + e2e
        return LookupResult(batch.query_id, pooled, user_us, item_us, e2e, t0,
                            c.row_hits, c.pooled_hits, c.device_reads, deferred)

    def _state(self, tid: int) -> _Table:
        st = self._tables.get(tid)
        if st is None:
            raise QueryError(f"unknown table {tid}")
        return st

    # -- updates ----------------------------------------------------------
    def apply_update(self, updates: Iterable[Tuple[int, int, QuantizedRow]]) -> UpdateReport:
        """Rewrite rows in place and invalidate the affected cache entries.

        ``row_id`` is a logical (un-pruned) index. Rows that are pruned and
        not de-pruned have no storage and are rejected.
        """
        report = UpdateReport()
        touched: Set[int] = set()
        with self._rw.write():
            for tid, row_id, row in updates:
                st = self._tables.get(tid)
                if st is None:
                    report.rejected.append((tid, row_id, "unknown table"))
                    continue
                if not 0 <= row_id < st.meta.num_rows:
                    report.rejected.append((tid, row_id, "row out of range"))
                    continue
                if row.elem_count != st.elem:
                    report.rejected.append((tid, row_id, "elem_count mismatch"))
                    continue
                stored = int(st.mapping[row_id]) if st.mapping is not None else row_id
                if stored == PRUNED:
                    report.rejected.append((tid, row_id, "row is pruned"))
                    continue
                if st.quantized:
                    data = row.to_bytes()
                else:
                    data = dequantize_row(row).astype("<f4").tobytes()
                if st.fm_rows is not None:
                    st.fm_rows[stored] = np.frombuffer(data, dtype=np.uint8)
                else:
                    self.device.write_region(st.base + stored * st.row_bytes, data)
                    self.row_cache.invalidate((tid, stored))
                touched.add(tid)
                report.applied += 1
            for tid in touched:
                self.pooled_cache.invalidate_table(tid)
        return report

    # -- warmup -----------------------------------------------------------
    def warmup_stats(self, trace: Sequence[QueryBatch], mode="overlapped",
                     window: Optional[int] = None, target_fraction: float = 0.9,
                     steady_fraction: float = 0.25) -> WarmupReport:
        """Replay ``trace`` from cold caches and summarize the warmup phase.

        The per-query hit rate counts row-level lookups served by the row
        cache. Steady state is the mean over the final ``steady_fraction``
        of the trace; warmup ends at the first smoothed window reaching
        ``target_fraction`` of it.
        """
        with self._rw.write():
            self.row_cache = RowCache(self.cache_config)
            for tid, st in self._tables.items():
                if st.placement is not Placement.FM_DIRECT:
                    self.row_cache.register_table(tid, st.row_bytes)
            self.pooled_cache = PooledCache(self.pooled_config)
        n = len(trace)
        if n == 0:
            return WarmupReport(0.0, None, target_fraction, 1.0, 0, np.zeros(0), np.zeros(0))
        hits = np.zeros(n)
        lookups = np.zeros(n)
        lat = np.zeros(n)
        for i, q in enumerate(trace):
            before = self.counters.copy()
            res = self.execute_query(q, mode)
            d = self.counters.minus(before)
            hits[i] = d.row_hits
            lookups[i] = d.row_hits + d.row_misses
            lat[i] = res.end_to_end_us
        return summarize_warmup(hits, lookups, lat, window, target_fraction, steady_fraction)


def summarize_warmup(hits: np.ndarray, lookups: np.ndarray, latency_us: np.ndarray,
                     window: Optional[int] = None, target_fraction: float = 0.9,
                     steady_fraction: float = 0.25) -> WarmupReport:
    """Warmup summary from per-query row-cache hits, lookups and latencies."""
    hits = np.asarray(hits, dtype=np.float64)
    lookups = np.asarray(lookups, dtype=np.float64)
    lat = np.asarray(latency_us, dtype=np.float64)
    n = hits.size
    if n == 0:
        return WarmupReport(0.0, None, target_fraction, 1.0, 0, np.zeros(0), np.zeros(0))
    window = window or max(1, min(1000, n // 10))
    nwin = max(1, n // window)
    wh = hits[:nwin * window].reshape(nwin, window).sum(axis=1) if n >= window else hits.sum(keepdims=True)
    wl = lookups[:nwin * window].reshape(nwin, window).sum(axis=1) if n >= window else lookups.sum(keepdims=True)
    smoothed = np.divide(wh, wl, out=np.zeros(wh.size), where=wl > 0)
    tail = max(1, int(n * steady_fraction))
    tail_l = lookups[-tail:].sum()
    steady = hits[-tail:].sum() / tail_l if tail_l else 0.0
    series = np.divide(hits, lookups, out=np.zeros(n), where=lookups > 0)
    if window == 1:
        ok = np.nonzero(series >= target_fraction * steady)[0]
        reached = int(ok[0]) if ok.size else None
    else:
        ok = np.nonzero(smoothed >= target_fraction * steady)[0]
        reached = int((ok[0] + 1) * window) if ok.size else None
    ratio = 1.0
    if reached and reached < n and lat[:reached].sum() > 0 and lat[-tail:].sum() > 0:
        warm_qps = reached / lat[:reached].sum()
        steady_qps = tail / lat[-tail:].sum()
        ratio = float(warm_qps / steady_qps)
    return WarmupReport(float(steady), reached, target_fraction, ratio, window, series, smoothed)
