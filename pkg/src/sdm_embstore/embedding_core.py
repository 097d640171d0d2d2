"""Embedding table data model, row-wise int8 quantization and pooling.

Row layout (little-endian)::

    [scale: f32][bias: f32][code_0 .. code_{elem_count-1}: u8]

A table image is its rows concatenated in row-id order, so row ``r`` lives
at byte offset ``r * dim_bytes``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

QPARAM_BYTES = 8
PRUNED = -1

_ROW_HEADER = struct.Struct("<ff")


class Role(str, Enum):
    USER = "user"
    ITEM = "item"


@dataclass(frozen=True)
class TableMeta:
    """Static description of one embedding table.

    ``num_rows`` is the logical (post-hash, un-pruned) index space that
    queries address. For pruned tables the number of stored rows comes
    from the pruning map.
    """

    table_id: int
    num_rows: int
    elem_count: int
    role: Role = Role.USER
    avg_pooling_factor: float = 1.0
    pruned: bool = False

    def __post_init__(self):
        if self.num_rows < 1:
            raise ValueError(f"table {self.table_id}: num_rows must be >= 1")
        if self.elem_count < 1:
            raise ValueError(f"table {self.table_id}: elem_count must be >= 1")
        if not self.avg_pooling_factor > 0:
            raise ValueError(f"table {self.table_id}: avg_pooling_factor must be > 0")

    @property
    def dim_bytes(self) -> int:
        return self.elem_count + QPARAM_BYTES

    @property
    def raw_row_bytes(self) -> int:
        """Row size once dequantized to fp32."""
        return self.elem_count * 4


@dataclass(frozen=True)
class QuantizedRow:
    scale: float
    bias: float
    payload: bytes

    @property
    def elem_count(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return _ROW_HEADER.pack(self.scale, self.bias) + self.payload

    @classmethod
    def from_bytes(cls, buf) -> "QuantizedRow":
        buf = bytes(buf)
        if len(buf) < QPARAM_BYTES + 1:
            raise ValueError(f"row buffer too short: {len(buf)} bytes")
        scale, bias = _ROW_HEADER.unpack_from(buf)
        return cls(scale, bias, buf[QPARAM_BYTES:])

    @classmethod
    def zero(cls, elem_count: int) -> "QuantizedRow":
        return cls(0.0, 0.0, bytes(elem_count))


def quantize_row(values) -> QuantizedRow:
    """Asymmetric min/max int8 quantization of one row.

    scale and bias are rounded to fp32 outward (bias down, scale up) so the
    stored range always covers the input and the round-trip error stays
    within scale/2 before fp32 evaluation error.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot quantize an empty row")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return QuantizedRow(0.0, float(np.float32(lo)), bytes(v.size))
    bias = np.float32(lo)
    if float(bias) > lo:
        bias = np.nextafter(bias, np.float32(-np.inf))
    scale = np.float32((hi - float(bias)) / 255.0)
    while float(bias) + 255.0 * float(scale) < hi:
        scale = np.nextafter(scale, np.float32(np.inf))
    codes = np.rint((v - float(bias)) / float(scale))
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    return QuantizedRow(float(scale), float(bias), codes.tobytes())


def dequantize_row(row: QuantizedRow) -> np.ndarray:
    codes = np.frombuffer(row.payload, dtype=np.uint8).astype(np.float32)
    return np.float32(row.scale) * codes + np.float32(row.bias)


def decode_rows(buf: np.ndarray, quantized: bool = True) -> np.ndarray:
    """Decode a (k, row_bytes) uint8 block into (k, elem_count) float32.

    Element-wise identical to calling :func:`dequantize_row` per row.
    """
    buf = np.ascontiguousarray(buf, dtype=np.uint8)
    if buf.ndim == 1:
        buf = buf[None, :]
    if not quantized:
        return buf.view("<f4").astype(np.float32, copy=False)
    params = np.ascontiguousarray(buf[:, :QPARAM_BYTES]).view("<f4")
    codes = buf[:, QPARAM_BYTES:].astype(np.float32)
    return params[:, 0:1] * codes + params[:, 1:2]


def pool_vectors(vectors, elem_count: int) -> np.ndarray:
    """Sum rows into an fp32 accumulator in input order."""
    acc = np.zeros(elem_count, dtype=np.float32)
    for vec in vectors:
        acc += vec
    return acc


def pool_rows(rows: Sequence[QuantizedRow], elem_count: Optional[int] = None) -> np.ndarray:
    if not rows:
        if elem_count is None:
            raise ValueError("elem_count is required to pool an empty row list")
        return np.zeros(elem_count, dtype=np.float32)
    n = rows[0].elem_count
    if elem_count is not None and elem_count != n:
        raise ValueError(f"expected elem_count {elem_count}, got {n}")
    for r in rows:
        if r.elem_count != n:
            raise ValueError(f"mismatched elem_count: {r.elem_count} != {n}")
    return pool_vectors((dequantize_row(r) for r in rows), n)


@dataclass
class PruningMap:
    """Maps un-pruned row ids to stored row ids, or to ``PRUNED``."""

    mapping: np.ndarray
    idx_type_bytes: int = 4

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if self.idx_type_bytes not in (4, 8):
            raise ValueError("idx_type_bytes must be 4 or 8")
        kept = self.mapping[self.mapping != PRUNED]
        if kept.size and (kept.min() < 0 or kept.max() >= kept.size):
            raise ValueError("pruning map entries must lie in [0, pruned_num_rows)")
        if np.unique(kept).size != kept.size:
            raise ValueError("pruning map entries must be unique")

    @property
    def unpruned_rows(self) -> int:
        return int(self.mapping.size)

    @property
    def pruned_num_rows(self) -> int:
        return int(np.count_nonzero(self.mapping != PRUNED))

    @property
    def size_bytes(self) -> int:
        return self.unpruned_rows * self.idx_type_bytes

    @classmethod
    def from_keep_mask(cls, keep, idx_type_bytes: int = 4) -> "PruningMap":
        keep = np.asarray(keep, dtype=bool)
        mapping = np.full(keep.size, PRUNED, dtype=np.int64)
        mapping[keep] = np.arange(int(keep.sum()))
        return cls(mapping, idx_type_bytes)

    def to_bytes(self) -> bytes:
        dt = "<u4" if self.idx_type_bytes == 4 else "<u8"
        arr = np.where(self.mapping == PRUNED, 0, self.mapping).astype(np.uint64)
        arr[self.mapping == PRUNED] = np.uint64((1 << (8 * self.idx_type_bytes)) - 1)
        return arr.astype(dt).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, idx_type_bytes: int = 4) -> "PruningMap":
        if len(buf) % idx_type_bytes:
            raise ValueError(
                f"pruning map length {len(buf)} is not a multiple of {idx_type_bytes}")
        dt = "<u4" if idx_type_bytes == 4 else "<u8"
        raw = np.frombuffer(buf, dtype=dt).astype(np.uint64)
        sentinel = np.uint64((1 << (8 * idx_type_bytes)) - 1)
        mapping = np.where(raw == sentinel, PRUNED, raw.astype(np.int64))
        return cls(mapping, idx_type_bytes)


@dataclass
class EmbeddingTable:
    """A table's stored rows plus optional pruning map.

    ``rows`` is (stored_rows, row_bytes) uint8; when ``quantized`` is False
    each row holds ``elem_count`` little-endian fp32 values instead.
    """

    meta: TableMeta
    rows: np.ndarray
    pruning: Optional[PruningMap] = None
    quantized: bool = True

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.uint8)
        if self.rows.ndim != 2 or self.rows.shape[1] != self.row_bytes:
            raise ValueError(
                f"table {self.meta.table_id}: rows must be (n, {self.row_bytes}), "
                f"got {self.rows.shape}")
        expected = self.pruning.pruned_num_rows if self.pruning is not None else self.meta.num_rows
        if self.rows.shape[0] != expected:
            raise ValueError(
                f"table {self.meta.table_id}: expected {expected} stored rows, "
                f"got {self.rows.shape[0]}")
        if self.pruning is not None and self.pruning.unpruned_rows != self.meta.num_rows:
            raise ValueError(
                f"table {self.meta.table_id}: pruning map covers "
                f"{self.pruning.unpruned_rows} rows, table has {self.meta.num_rows}")

    @property
    def row_bytes(self) -> int:
        return self.meta.dim_bytes if self.quantized else self.meta.raw_row_bytes

    @property
    def stored_rows(self) -> int:
        return int(self.rows.shape[0])

    @property
    def size_bytes(self) -> int:
        return self.stored_rows * self.row_bytes

    def row(self, stored_id: int) -> QuantizedRow:
        if not self.quantized:
            raise TypeError("table is dequantized")
        return QuantizedRow.from_bytes(self.rows[stored_id].tobytes())

    def to_bytes(self) -> bytes:
        return self.rows.tobytes()

    def deprune(self) -> "EmbeddingTable":
        """Expand a pruned table over the un-pruned index space.

        Pruned entries become zero rows (scale 0, bias 0, zero codes), which
        decode to exact zeros.
        """
        if self.pruning is None:
            return self
        dense = np.zeros((self.meta.num_rows, self.row_bytes), dtype=np.uint8)
        kept = self.pruning.mapping != PRUNED
        dense[kept] = self.rows[self.pruning.mapping[kept]]
        return EmbeddingTable(self.meta, dense, None, self.quantized)


def dequantize_table_at_load(table: EmbeddingTable) -> EmbeddingTable:
    if not table.quantized:
        return table
    values = decode_rows(table.rows, quantized=True) if table.stored_rows else \
        np.zeros((0, table.meta.elem_count), dtype=np.float32)
    raw = np.ascontiguousarray(values.astype("<f4")).view(np.uint8)
    raw = raw.reshape(table.stored_rows, table.meta.raw_row_bytes)
    return EmbeddingTable(table.meta, raw, table.pruning, quantized=False)


def random_table(meta: TableMeta, rng: np.random.Generator,
                 pruning: Optional[PruningMap] = None) -> EmbeddingTable:
    """Synthesize a quantized table with random rows."""
    n = pruning.pruned_num_rows if pruning is not None else meta.num_rows
    rows = np.empty((n, meta.dim_bytes), dtype=np.uint8)
    lo = rng.normal(0.0, 0.05, size=n).astype(np.float32)
    span = rng.uniform(0.01, 0.2, size=n).astype(np.float32)
    params = np.stack([span / np.float32(255.0), lo], axis=1).astype("<f4")
    rows[:, :QPARAM_BYTES] = params.view(np.uint8).reshape(n, QPARAM_BYTES)
    rows[:, QPARAM_BYTES:] = rng.integers(0, 256, size=(n, meta.elem_count), dtype=np.uint8)
    return EmbeddingTable(meta, rows, pruning)


@dataclass
class QueryBatch:
    """One inference query: user index lists once, item lists per ranked item."""

    query_id: int = 0
    user: Dict[int, List[int]] = field(default_factory=dict)
    item: Dict[int, List[List[int]]] = field(default_factory=dict)

    @property
    def item_batch(self) -> int:
        return max((len(v) for v in self.item.values()), default=1)

    def table_ids(self) -> List[int]:
        return list(self.user) + list(self.item)

    def lookups(self, table_id: int) -> List[List[int]]:
        if table_id in self.user:
            return [self.user[table_id]]
        return self.item.get(table_id, [])
