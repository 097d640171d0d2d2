"""Synthetic query traces, the trace file format, and locality analyzers."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .embedding_core import QueryBatch, Role

BLOCK_BYTES = 4096
DEFAULT_WINDOW = 100_000

Trace = List[QueryBatch]


@dataclass
class TableWorkload:
    """Access pattern of one table. ``pooling`` is the mean lookup length."""

    table_id: int
    num_rows: int
    role: Role = Role.USER
    s: float = 1.05
    pooling: float = 10.0
    fixed_length: bool = False
    dim_bytes: int = 128

    def __post_init__(self):
        self.role = Role(self.role)
        if self.num_rows < 1:
            raise ValueError(f"table {self.table_id}: num_rows must be >= 1")
        if self.s < 0:
            raise ValueError(f"table {self.table_id}: zipf exponent must be >= 0")
        if self.pooling < 1:
            raise ValueError(f"table {self.table_id}: mean pooling must be >= 1")


@dataclass
class ZipfSpec:
    tables: List[TableWorkload]
    item_batch: int = 1
    repeat_rate: float = 0.0
    seed: int = 0
    reservoir_size: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.repeat_rate <= 1.0:
            raise ValueError("repeat_rate must be in [0, 1]")
        if self.item_batch < 1:
            raise ValueError("item_batch must be >= 1")
        if self.reservoir_size < 1:
            raise ValueError("reservoir_size must be >= 1")
        ids = [t.table_id for t in self.tables]
        if len(set(ids)) != len(ids):
            raise ValueError("table ids must be unique")

    def table(self, table_id: int) -> TableWorkload:
        for t in self.tables:
            if t.table_id == table_id:
                return t
        raise KeyError(table_id)


def zipf_cdf(num_rows: int, s: float) -> np.ndarray:
    """Cumulative probability over popularity ranks 1..num_rows."""
    w = np.arange(1, num_rows + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return cdf


class ZipfSampler:
    """Zipf over ranks with a seeded rank-to-row permutation.

    Sampling inverts the CDF with a binary search, which is plenty fast
    for desk-scale traces and needs no extra table besides the CDF.
    """

    def __init__(self, num_rows: int, s: float, perm_rng: np.random.Generator):
        self.num_rows = num_rows
        self.s = s
        self.cdf = zipf_cdf(num_rows, s)
        self.row_of_rank = perm_rng.permutation(num_rows).astype(np.int64)

    def ranks(self, n: int, rng: np.random.Generator) -> np.ndarray:
        r = np.searchsorted(self.cdf, rng.random(n), side="right")
        return np.minimum(r, self.num_rows - 1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.row_of_rank[self.ranks(n, rng)]

    def rank_mass(self, lo: int, hi: int) -> float:
        """Probability mass of ranks in [lo, hi) (0-based)."""
        below = self.cdf[lo - 1] if lo > 0 else 0.0
        return float(self.cdf[hi - 1] - below) if hi > lo else 0.0


def make_samplers(spec: ZipfSpec) -> Dict[int, ZipfSampler]:
    """Samplers used by ``generate_trace`` for this spec, e.g. to find hot rows."""
    perm_rng = np.random.default_rng([spec.seed, 1])
    return {t.table_id: ZipfSampler(t.num_rows, t.s, perm_rng) for t in spec.tables}


def generate_trace(spec: ZipfSpec, num_queries: int) -> Trace:
    if num_queries < 0:
        raise ValueError("num_queries must be >= 0")
    samplers = make_samplers(spec)
    rng = np.random.default_rng([spec.seed, 2])
    reservoirs: Dict[int, List[List[int]]] = {t.table_id: [] for t in spec.tables}
    seen: Dict[int, int] = {t.table_id: 0 for t in spec.tables}

    def draw(t: TableWorkload) -> List[int]:
        res = reservoirs[t.table_id]
        if res and spec.repeat_rate > 0 and rng.random() < spec.repeat_rate:
            return list(res[int(rng.integers(len(res)))])
        n = int(round(t.pooling)) if t.fixed_length else 1 + int(rng.poisson(t.pooling - 1))
        seq = samplers[t.table_id].sample(n, rng).tolist()
        seen[t.table_id] += 1
        if len(res) < spec.reservoir_size:
            res.append(seq)
        else:
            j = int(rng.integers(seen[t.table_id]))
            if j < spec.reservoir_size:
                res[j] = seq
        return seq

    trace: Trace = []
    for qid in range(num_queries):
        q = QueryBatch(query_id=qid)
        for t in spec.tables:
            if t.role is Role.USER:
                q.user[t.table_id] = draw(t)
            else:
                q.item[t.table_id] = [draw(t) for _ in range(spec.item_batch)]
        trace.append(q)
    return trace


# -- trace file format ------------------------------------------------------

class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int, offset: int):
        super().__init__(f"line {line} (byte offset {offset}): {message}")
        self.line = line
        self.offset = offset


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(",")] if text else []


def format_trace(trace: Sequence[QueryBatch]) -> str:
    tables: List[int] = []
    for q in trace:
        for tid in q.table_ids():
            if tid not in tables:
                tables.append(tid)
    out = io.StringIO()
    out.write("TABLES " + ",".join(str(t) for t in tables) + "\n")
    for q in trace:
        parts = [f"Q {q.query_id}"]
        for tid, idx in q.user.items():
            parts.append(f"{tid}:" + ",".join(map(str, idx)))
        for tid, seqs in q.item.items():
            parts.append(f"{tid}x{len(seqs)}:" + ";".join(",".join(map(str, s)) for s in seqs))
        out.write(" | ".join(parts) + "\n")
    return out.getvalue()


def write_trace(trace: Sequence[QueryBatch], path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_trace(trace))


def parse_trace(text: str) -> Trace:
    trace: Trace = []
    offset = 0
    declared: Optional[set] = None
    for lineno, line in enumerate(text.split("\n"), start=1):
        start = offset
        offset += len(line.encode("utf-8")) + 1
        if not line.strip():
            continue
        if declared is None:
            if not line.startswith("TABLES"):
                raise TraceFormatError("expected 'TABLES' header", lineno, start)
            body = line[len("TABLES"):].strip()
            try:
                declared = set(_ints(body))
            except ValueError:
                raise TraceFormatError("bad table list in header", lineno, start) from None
            continue
        fields = [f.strip() for f in line.split("|")]
        head = fields[0].split()
        if len(head) != 2 or head[0] != "Q":
            raise TraceFormatError("record must start with 'Q <id>'", lineno, start)
        try:
            q = QueryBatch(query_id=int(head[1]))
            for fld in fields[1:]:
                if ":" not in fld:
                    raise ValueError(f"truncated table group {fld!r}")
                tag, body = fld.split(":", 1)
                if "x" in tag:
                    tid_s, b_s = tag.split("x", 1)
                    tid, b = int(tid_s), int(b_s)
                    seqs = [_ints(s) for s in body.split(";")] if b else []
                    if len(seqs) != b:
                        raise ValueError(f"table {tid}: expected {b} item lookups, found {len(seqs)}")
                    q.item[tid] = seqs
                else:
                    tid = int(tag)
                    q.user[tid] = _ints(body)
                if tid not in declared:
                    raise ValueError(f"table {tid} not declared in header")
        except ValueError as e:
            raise TraceFormatError(str(e), lineno, start) from None
        trace.append(q)
    return trace


def read_trace(path: Union[str, os.PathLike]) -> Trace:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return parse_trace(f.read())


# -- analyzers --------------------------------------------------------------

def table_accesses(trace: Iterable[QueryBatch], table_id: int) -> np.ndarray:
    """All indices of a table in trace order (item lookups in batch order)."""
    chunks = []
    for q in trace:
        for seq in q.lookups(table_id):
            chunks.append(seq)
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    return np.fromiter((i for c in chunks for i in c), dtype=np.int64)


@dataclass
class CdfPoints:
    row_fraction: np.ndarray
    access_share: np.ndarray

    def __len__(self):
        return len(self.row_fraction)

    def at(self, fraction: float) -> float:
        """Access share carried by the hottest ``fraction`` of rows."""
        if not len(self):
            return 0.0
        return float(np.interp(fraction, np.r_[0.0, self.row_fraction], np.r_[0.0, self.access_share]))


def temporal_cdf(trace: Sequence[QueryBatch], table_id: int, num_rows: Optional[int] = None,
                 points: Optional[int] = None) -> CdfPoints:
    """Cumulative access share vs fraction of rows, hottest first.

    Rows are those accessed in the trace, or ``num_rows`` if given so that
    never-accessed rows count toward the row fraction.
    """
    acc = table_accesses(trace, table_id)
    if acc.size == 0:
        return CdfPoints(np.zeros(0), np.zeros(0))
    _, counts = np.unique(acc, return_counts=True)
    counts = np.sort(counts)[::-1]
    n = counts.size if num_rows is None else max(num_rows, counts.size)
    if n > counts.size:
        counts = np.r_[counts, np.zeros(n - counts.size, dtype=counts.dtype)]
    share = np.cumsum(counts) / acc.size
    frac = np.arange(1, n + 1) / n
    if points is not None and points < n:
        pick = np.unique(np.linspace(0, n - 1, points).round().astype(np.int64))
        frac, share = frac[pick], share[pick]
    return CdfPoints(frac, share)


def rows_per_block(dim_bytes: int, block_bytes: int = BLOCK_BYTES) -> int:
    return max(1, block_bytes // dim_bytes)


def window_metric(rows: np.ndarray, dim_bytes: int, block_bytes: int = BLOCK_BYTES) -> float:
    """(unique rows / unique blocks) / rows-per-block for one window, capped at 1."""
    uniq = np.unique(rows)
    blocks = np.unique(uniq * dim_bytes // block_bytes)
    r = rows_per_block(dim_bytes, block_bytes)
    return min(1.0, (uniq.size / blocks.size) / r)


def spatial_locality(trace: Sequence[QueryBatch], table_id: int, dim_bytes: int,
                     window: int = DEFAULT_WINDOW, block_bytes: int = BLOCK_BYTES) -> np.ndarray:
    """Spatial-locality metric for consecutive windows of ``window`` accesses."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if dim_bytes < 1:
        raise ValueError("dim_bytes must be >= 1")
    acc = table_accesses(trace, table_id)
    return np.array([window_metric(acc[i:i + window], dim_bytes, block_bytes)
                     for i in range(0, acc.size, window)])


@dataclass
class LocalityReport:
    window: int
    temporal: Dict[int, CdfPoints] = field(default_factory=dict)
    spatial: Dict[int, np.ndarray] = field(default_factory=dict)

    def mean_spatial(self, table_id: int) -> float:
        s = self.spatial.get(table_id)
        return float(s.mean()) if s is not None and s.size else 0.0


def analyze(trace: Sequence[QueryBatch], dim_bytes: Dict[int, int], window: int = DEFAULT_WINDOW,
            cdf_points: Optional[int] = 101) -> LocalityReport:
    rep = LocalityReport(window)
    for tid, dim in dim_bytes.items():
        rep.temporal[tid] = temporal_cdf(trace, tid, points=cdf_points)
        rep.spatial[tid] = spatial_locality(trace, tid, dim, window)
    return rep


def trace_tables(trace: Sequence[QueryBatch]) -> List[int]:
    seen: List[int] = []
    for q in trace:
        for tid in q.table_ids():
            if tid not in seen:
                seen.append(tid)
    return seen


def lookup_counts(trace: Sequence[QueryBatch]) -> Tuple[int, int]:
    """(lookups, indices) summed over every table of the trace."""
    n_lookups = n_idx = 0
    for q in trace:
        for tid in q.table_ids():
            for seq in q.lookups(tid):
                n_lookups += 1
                n_idx += len(seq)
    return n_lookups, n_idx
