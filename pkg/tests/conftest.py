import numpy as np
import pytest

from sdm_embstore.embedding_core import PRUNED, PruningMap, Role, TableMeta, dequantize_row, pool_vectors, QuantizedRow
from sdm_embstore.engine import Engine, LoadOptions, ModelManifest, Placement, plan_placement
from sdm_embstore.presets import synthesize_tables
from sdm_embstore.scm_device import SimDevice, get_profile


def make_manifest(n_user=4, n_item=2, rows=500, seed=0, pruned=(), keep=0.5, fm_items=True,
                  elems=(16, 40, 300), pf=4.0):
    rng = np.random.default_rng(seed)
    metas, pruning = [], {}
    for tid in range(n_user + n_item):
        role = Role.USER if tid < n_user else Role.ITEM
        elem = int(elems[tid % len(elems)])
        meta = TableMeta(tid, rows, elem, role, pf, tid in pruned)
        metas.append(meta)
        if tid in pruned:
            mask = rng.random(rows) < keep
            mask[0] = True
            pruning[tid] = PruningMap.from_keep_mask(mask)
    fm_only = {m.table_id for m in metas if m.role is Role.ITEM} if fm_items else set()
    return ModelManifest(metas, pruning, fm_only)


def build_engine(manifest, tables=None, profile="optane", policy="sm_only", budget=None,
                 deprune=False, dequant=False, seed=0, **engine_kw):
    tables = tables or synthesize_tables(manifest, seed)
    if budget is None:
        budget = (0 if deprune else manifest.mapping_bytes()) + sum(
            manifest.table_bytes(t, deprune) for t in manifest.fm_only)
    plan = plan_placement(manifest, policy, budget, deprune)
    prof = get_profile(profile)
    cap = sum(manifest.table(t).num_rows * manifest.table(t).raw_row_bytes for t in manifest.table_ids)
    dev = SimDevice(prof, cap + prof.block_bytes * (len(manifest.tables) + 2), seed=seed)
    eng = Engine(dev, **engine_kw)
    eng.load_model(manifest, tables, plan, LoadOptions(deprune, dequant))
    return eng, tables


def oracle_pool(manifest, tables, table_id, indices):
    """Brute-force pooled vector from the original quantized rows."""
    meta = manifest.table(table_id)
    pm = manifest.pruning.get(table_id)
    t = tables[table_id]
    vecs = []
    for i in indices:
        s = int(pm.mapping[i]) if pm is not None else int(i)
        if s == PRUNED:
            continue
        vecs.append(dequantize_row(QuantizedRow.from_bytes(t.rows[s].tobytes())))
    return pool_vectors(vecs, meta.elem_count)


def image_pool(eng, table_id, indices):
    """Brute-force pooled vector read straight from the loaded storage (device image or FM)."""
    st = eng.table_state(table_id)
    vecs = []
    for i in indices:
        s = int(st.mapping[i]) if st.mapping is not None else int(i)
        if s == PRUNED:
            continue
        if st.fm_rows is not None:
            raw = st.fm_rows[s].tobytes()
        else:
            off = st.base + s * st.row_bytes
            raw = eng.device.image[off:off + st.row_bytes].tobytes()
        if st.quantized:
            vecs.append(dequantize_row(QuantizedRow.from_bytes(raw)))
        else:
            vecs.append(np.frombuffer(raw, dtype="<f4").astype(np.float32))
    return pool_vectors(vecs, st.elem)


def bits(v):
    return np.asarray(v, dtype=np.float32).view(np.uint32)


# -- acceptance report -----------------------------------------------------

ACCEPTANCE_LINES = []


class Verdict:
    def __init__(self, name):
        self.name = name
        self.line = None

    def check(self, ok, detail):
        self.line = f"[{'PASS' if ok else 'FAIL'}] {self.name}: {detail}"
        ACCEPTANCE_LINES.append(self.line)
        print(self.line)
        assert ok, self.line


@pytest.fixture
def verdict(request):
    v = Verdict(request.node.get_closest_marker("criterion").args[0])
    yield v
    if v.line is None:
        line = f"[FAIL] {v.name}: error before a verdict was reached"
        ACCEPTANCE_LINES.append(line)
        print(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion name")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
