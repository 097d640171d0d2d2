"""Manifest files, desk-scale model presets and synthetic table data."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Union

import numpy as np

from .embedding_core import EmbeddingTable, PruningMap, Role, TableMeta, random_table
from .engine import ModelManifest
from .workload import TableWorkload, ZipfSpec


class ManifestError(ValueError):
    pass


def parse_manifest(text: str) -> List[tuple]:
    """Records ``table_id role num_rows elem_count avg_pf pruned idx_type``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ManifestError(f"manifest line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            tid, role, rows, elem, pf, pruned, idx = parts
            pruned_b = {"0": False, "1": True, "false": False, "true": True}[pruned.lower()]
            meta = TableMeta(int(tid), int(rows), int(elem), Role(role.lower()), float(pf), pruned_b)
            idx_bytes = int(idx)
            if idx_bytes not in (4, 8):
                raise ValueError("idx_type must be 4 or 8")
        except (KeyError, ValueError) as e:
            raise ManifestError(f"manifest line {lineno}: {e}") from None
        out.append((meta, idx_bytes))
    return out


def format_manifest(manifest: ModelManifest, idx_bytes: int = 4) -> str:
    lines = ["# table_id role num_rows elem_count avg_pf pruned idx_type"]
    for t in manifest.tables:
        ib = manifest.pruning[t.table_id].idx_type_bytes if t.table_id in manifest.pruning else idx_bytes
        lines.append(f"{t.table_id} {t.role.value} {t.num_rows} {t.elem_count} "
                     f"{t.avg_pooling_factor:g} {int(t.pruned)} {ib}")
    return "\n".join(lines) + "\n"


def sidecar_path(manifest_path: Union[str, os.PathLike], table_id: int) -> str:
    return f"{os.fspath(manifest_path)}.{table_id}.prune"


def synth_pruning(meta: TableMeta, keep_fraction: float, seed: int, idx_bytes: int = 4) -> PruningMap:
    """Random keep mask with exactly round(keep_fraction * rows) survivors (at least one)."""
    rng = np.random.default_rng([seed, meta.table_id, 7])
    keep = np.zeros(meta.num_rows, dtype=bool)
    n_keep = min(meta.num_rows, max(1, round(keep_fraction * meta.num_rows)))
    keep[rng.choice(meta.num_rows, size=n_keep, replace=False)] = True
    return PruningMap.from_keep_mask(keep, idx_bytes)


def load_manifest(path: Union[str, os.PathLike], keep_fraction: float = 0.5, seed: int = 0,
                  fm_only: Optional[Set[int]] = None, no_cache: Optional[Set[int]] = None) -> ModelManifest:
    """Read a manifest file; pruned tables use their sidecar map or a synthetic one."""
    with open(path, "r", encoding="utf-8") as f:
        records = parse_manifest(f.read())
    pruning = {}
    for meta, idx_bytes in records:
        if not meta.pruned:
            continue
        side = sidecar_path(path, meta.table_id)
        if os.path.exists(side):
            with open(side, "rb") as f:
                pruning[meta.table_id] = PruningMap.from_bytes(f.read(), idx_bytes)
        else:
            pruning[meta.table_id] = synth_pruning(meta, keep_fraction, seed, idx_bytes)
    return ModelManifest([m for m, _ in records], pruning, set(fm_only or ()), set(no_cache or ()))


def save_manifest(manifest: ModelManifest, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_manifest(manifest))
    for tid, pm in manifest.pruning.items():
        with open(sidecar_path(path, tid), "wb") as f:
            f.write(pm.to_bytes())


@dataclass
class ModelPreset:
    """Desk-scale stand-in for a target model: a few tables of each role."""

    name: str
    user: List[tuple]
    item: List[tuple]
    item_batch: int
    pruned_tables: Set[int] = field(default_factory=set)
    items_in_fm: bool = True


# (count, num_rows, elem_count, avg_pf) per group
PRESETS: Dict[str, ModelPreset] = {
    "small": ModelPreset("small", [(4, 4000, 24, 6), (2, 2000, 300, 4)], [(2, 1000, 16, 3)],
                         item_batch=4, pruned_tables={1}),
    "m1": ModelPreset("m1", [(12, 20000, 43, 42)], [(4, 4000, 61, 9)], item_batch=50),
    "m2": ModelPreset("m2", [(16, 20000, 56, 25)], [(6, 4000, 30, 14)], item_batch=30),
    "masking": ModelPreset("masking", [(4, 20000, 56, 8)], [(4, 4000, 56, 12)], item_batch=40),
}


def preset_manifest(name: str, keep_fraction: float = 0.5, seed: int = 0) -> ModelManifest:
    try:
        p = PRESETS[name.lower()]
    except KeyError:
        raise ManifestError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    metas = []
    tid = 0
    for role, groups in ((Role.USER, p.user), (Role.ITEM, p.item)):
        for count, rows, elem, pf in groups:
            for _ in range(count):
                metas.append(TableMeta(tid, rows, elem, role, float(pf), tid in p.pruned_tables))
                tid += 1
    pruning = {m.table_id: synth_pruning(m, keep_fraction, seed) for m in metas if m.pruned}
    fm_only = {m.table_id for m in metas if m.role is Role.ITEM} if p.items_in_fm else set()
    return ModelManifest(metas, pruning, fm_only)


def preset_item_batch(name: str) -> int:
    return PRESETS[name.lower()].item_batch


def synthesize_tables(manifest: ModelManifest, seed: int = 0) -> Dict[int, EmbeddingTable]:
    out = {}
    for meta in manifest.tables:
        rng = np.random.default_rng([seed, meta.table_id, 3])
        out[meta.table_id] = random_table(meta, rng, manifest.pruning.get(meta.table_id))
    return out


def workload_for(manifest: ModelManifest, s: float = 1.05, repeat_rate: float = 0.0,
                 item_batch: int = 1, seed: int = 0, fixed_length: bool = False) -> ZipfSpec:
    tables = [TableWorkload(t.table_id, t.num_rows, t.role, s, max(1.0, t.avg_pooling_factor),
                            fixed_length, t.dim_bytes) for t in manifest.tables]
    return ZipfSpec(tables, item_batch=item_batch, repeat_rate=repeat_rate, seed=seed)
