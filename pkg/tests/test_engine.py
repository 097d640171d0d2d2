import threading

import numpy as np
import pytest

from conftest import bits, build_engine, image_pool, make_manifest, oracle_pool
from sdm_embstore.embedding_core import (
    PRUNED, EmbeddingTable, PruningMap, QueryBatch, Role, TableMeta, quantize_row, random_table,
)
from sdm_embstore.engine import (
    CapacityError, Engine, LoadOptions, ModelManifest, Placement, PlacementError, QueryError,
    plan_placement,
)
from sdm_embstore.pooled_cache import PooledConfig
from sdm_embstore.presets import preset_manifest, synthesize_tables, workload_for
from sdm_embstore.row_cache import CacheConfig, SubCache, entry_charge
from sdm_embstore.scm_device import OPTANE, SimDevice
from sdm_embstore.workload import TableWorkload, ZipfSpec, generate_trace


def single_table(rows=1000, elem=16, pruned=None, pf=4.0):
    meta = TableMeta(0, rows, elem, Role.USER, pf, pruned is not None)
    return ModelManifest([meta], {0: pruned} if pruned is not None else {})


# -- manifest / placement ---------------------------------------------------

def test_manifest_validation():
    a = TableMeta(0, 10, 4)
    with pytest.raises(ValueError):
        ModelManifest([a, a])
    with pytest.raises(ValueError):
        ModelManifest([TableMeta(0, 10, 4, pruned=True)])
    with pytest.raises(ValueError):
        ModelManifest([a], {0: PruningMap.from_keep_mask([1] * 10)})
    m = make_manifest(2, 0, rows=100, elems=(16,))
    assert m.total_bytes() == 2 * 100 * 24


def test_plan_sm_only_zero_budget():
    m = make_manifest(3, 2, fm_items=False)
    plan = plan_placement(m, "sm_only", 0)
    assert set(plan.assignment.values()) == {Placement.SM_CACHED}
    assert len(plan.assignment) == 5


def test_plan_fixed_fm_everything_fits():
    m = make_manifest(3, 2, fm_items=False)
    plan = plan_placement(m, "fixed_fm", m.total_bytes())
    assert set(plan.assignment.values()) == {Placement.FM_DIRECT}
    assert plan.fm_bytes <= plan.fm_budget_bytes


def test_plan_fixed_fm_prefers_high_pooling_factor():
    m = ModelManifest([TableMeta(0, 100, 16, avg_pooling_factor=1),
                       TableMeta(1, 100, 16, avg_pooling_factor=100)])
    plan = plan_placement(m, "fixed_fm", 100 * 24)
    assert plan.assignment == {1: Placement.FM_DIRECT, 0: Placement.SM_CACHED}


def test_plan_deny_list_and_no_cache():
    m = make_manifest(3, 2)
    m.no_cache = {1}
    need = sum(m.table_bytes(t) for t in m.fm_only)
    plan = plan_placement(m, "sm_only", need)
    assert plan.tables_with(Placement.FM_DIRECT) == [3, 4]
    assert plan.assignment[1] is Placement.SM_UNCACHED
    with pytest.raises(PlacementError):
        plan_placement(m, "sm_only", need - 1)
    with pytest.raises(PlacementError):
        plan_placement(m, "sm_only", -1)
    with pytest.raises(PlacementError):
        plan_placement(m, "nope", need)


def test_plan_charges_mapping_bytes():
    m = make_manifest(2, 0, pruned=(0,))
    with pytest.raises(PlacementError):
        plan_placement(m, "sm_only", 0)
    assert plan_placement(m, "sm_only", 0, deprune=True).mapping_bytes == 0
    assert plan_placement(m, "sm_only", 2000).mapping_bytes == 500 * 4


# -- load ------------------------------------------------------------------

def test_unpruned_table_identical_on_device_regardless_of_deprune():
    m = make_manifest(2, 0, pruned=(1,))
    tables = synthesize_tables(m)
    images = []
    for dp in (False, True):
        eng, _ = build_engine(m, tables, deprune=dp)
        st = eng.table_state(0)
        images.append(eng.device.image[st.base:st.base + m.table_bytes(0)].tobytes())
    assert images[0] == images[1] == tables[0].to_bytes()


def test_deprune_footprint_and_fm_bytes_freed():
    keep = np.zeros(1000, bool)
    keep[::2] = True
    pm = PruningMap.from_keep_mask(keep, 8)
    m = single_table(1000, 16, pm)
    off, _ = build_engine(m)
    on, _ = build_engine(m, deprune=True)
    assert on.sm_bytes == 2 * off.sm_bytes
    assert off.fm_bytes_resident - on.fm_bytes_resident == 1000 * 8
    assert on.fm_bytes_resident == 0


def test_deprune_equivalence_random_streams():
    m = make_manifest(3, 0, rows=300, pruned=(0, 2), keep=0.5)
    tables = synthesize_tables(m)
    a, _ = build_engine(m, tables, deprune=False)
    b, _ = build_engine(m, tables, deprune=True)
    rng = np.random.default_rng(0)
    for _ in range(300):
        tid = int(rng.integers(3))
        idx = rng.integers(0, 300, int(rng.integers(0, 12))).tolist()
        va, vb = a.lookup_pooled(tid, idx), b.lookup_pooled(tid, idx)
        assert np.array_equal(bits(va), bits(vb))
        assert np.array_equal(bits(va), bits(oracle_pool(m, tables, tid, idx)))


def test_load_refuses_when_device_too_small():
    m = make_manifest(2, 0, rows=1000, elems=(64,))
    tables = synthesize_tables(m)
    plan = plan_placement(m, "sm_only", 0)
    eng = Engine(SimDevice(OPTANE, 100_000))
    with pytest.raises(CapacityError) as ei:
        eng.load_model(m, tables, plan)
    assert ei.value.report["sm_bytes_required"] >= 2 * 1000 * 72
    # de-quantizing grows the footprint past a device that holds the quantized form
    eng = Engine(SimDevice(OPTANE, 200_000))
    eng.load_model(m, tables, plan)
    with pytest.raises(CapacityError):
        eng.load_model(m, tables, plan, LoadOptions(dequantize_at_load=True))


def test_fm_resident_within_budget():
    m = make_manifest(4, 2, pruned=(0,))
    for policy in ("sm_only", "fixed_fm"):
        budget = m.mapping_bytes() + sum(m.table_bytes(t) for t in m.fm_only) + 50_000
        eng, _ = build_engine(m, policy=policy, budget=budget)
        assert eng.fm_bytes_resident <= budget


# -- lookup path ------------------------------------------------------------

def test_cold_distinct_indices_read_once_each_then_cached():
    m = single_table()
    eng, tables = build_engine(m, pooled_cache_enabled=False)
    idx = [5, 17, 900, 3]
    v = eng.lookup_pooled(0, idx)
    assert eng.counters.device_reads == 4
    assert np.array_equal(bits(v), bits(oracle_pool(m, tables, 0, idx)))
    eng.lookup_pooled(0, [3, 900])
    assert eng.counters.device_reads == 4
    assert eng.counters.row_hits == 2


def test_pooled_hit_skips_row_cache_and_device():
    m = single_table()
    eng, _ = build_engine(m)
    eng.lookup_pooled(0, [1, 2, 3])
    before = eng.counters.copy()
    eng.lookup_pooled(0, [3, 1, 2])
    d = eng.counters.minus(before)
    assert d.pooled_hits == 1 and d.row_lookups == 0 and d.device_reads == 0


def test_len_threshold_gates_pooled_cache():
    m = single_table()
    eng, _ = build_engine(m, pooled_config=PooledConfig(len_threshold=3))
    eng.lookup_pooled(0, [1, 2, 3])
    eng.lookup_pooled(0, [1, 2, 3])
    assert eng.counters.pooled_probes == 0
    eng.lookup_pooled(0, [1, 2, 3, 4])
    eng.lookup_pooled(0, [1, 2, 3, 4])
    assert eng.counters.pooled_hits == 1


def test_fm_direct_skips_caches_and_device():
    m = make_manifest(1, 1, rows=100)
    eng, tables = build_engine(m)
    v = eng.lookup_pooled(1, [1, 2, 2, 99])
    c = eng.counters
    assert c.device_reads == 0 and c.row_lookups == 0 and c.pooled_probes == 0 and c.fm_rows == 4
    assert np.array_equal(bits(v), bits(oracle_pool(m, tables, 1, [1, 2, 2, 99])))


def test_sm_uncached_bypasses_row_cache():
    m = make_manifest(2, 0)
    m.no_cache = {1}
    eng, _ = build_engine(m, pooled_cache_enabled=False)
    eng.lookup_pooled(1, [4])
    eng.lookup_pooled(1, [4])
    assert eng.counters.device_reads == 2 and eng.counters.row_hits == 0
    assert eng.row_cache.bytes_resident() == 0


def test_empty_lookup_is_zero_vector():
    m = single_table()
    eng, _ = build_engine(m)
    v = eng.lookup_pooled(0, [])
    assert v.shape == (16,) and not v.any()


def test_out_of_range_is_counted_query_error():
    m = make_manifest(1, 1, rows=50)
    eng, _ = build_engine(m)
    with pytest.raises(QueryError):
        eng.lookup_pooled(0, [1, 50])
    with pytest.raises(QueryError):
        eng.execute_query(QueryBatch(0, {0: [1]}, {1: [[-1]]}))
    with pytest.raises(QueryError):
        eng.lookup_pooled(9, [1])
    assert eng.counters.errors == 2


def test_matches_device_image_oracle_all_placements():
    m = make_manifest(4, 2, rows=300, pruned=(1,))
    for policy, dq in (("sm_only", False), ("fixed_fm", False), ("sm_only", True)):
        budget = m.mapping_bytes() + sum(m.table_bytes(t) for t in m.fm_only) + 10_000
        eng, tables = build_engine(m, policy=policy, budget=budget, dequant=dq)
        rng = np.random.default_rng(1)
        for _ in range(200):
            tid = int(rng.integers(6))
            idx = rng.integers(0, 300, int(rng.integers(1, 8))).tolist()
            v = eng.lookup_pooled(tid, idx)
            assert np.array_equal(bits(v), bits(image_pool(eng, tid, idx)))
            assert np.array_equal(bits(v), bits(oracle_pool(m, tables, tid, idx)))


# -- execution modes --------------------------------------------------------

def _trace(m, n=100, b_i=3, seed=0):
    return generate_trace(workload_for(m, 1.05, 0.05, b_i, seed), n)


def test_all_fm_direct_modes_give_identical_vectors():
    m = make_manifest(3, 2, fm_items=False)
    tr = _trace(m, 50)
    a, _ = build_engine(m, policy="fixed_fm", budget=m.total_bytes())
    b, _ = build_engine(m, policy="fixed_fm", budget=m.total_bytes())
    for q in tr:
        ra, rb = a.execute_query(q, "seq"), b.execute_query(q, "overlap")
        for tid in ra.pooled:
            for x, y in zip(ra.pooled[tid], rb.pooled[tid]):
                assert np.array_equal(bits(x), bits(y))


@pytest.mark.parametrize("profile", ["nand", "optane"])
def test_overlapped_never_slower_than_sequential(profile):
    m = make_manifest(6, 2, rows=2000)
    tr = _trace(m, 200)
    a, _ = build_engine(m, profile=profile, seed=3)
    b, _ = build_engine(m, profile=profile, seed=3)
    for q in tr:
        rs, ro = a.execute_query(q, "sequential"), b.execute_query(q, "overlapped")
        assert ro.end_to_end_us <= rs.end_to_end_us
        assert rs.end_to_end_us == pytest.approx(rs.user_us + rs.item_us)
        assert ro.end_to_end_us == max(ro.user_us, ro.item_us)


def test_masking_identity_when_user_path_faster():
    m = preset_manifest("masking")
    eng, _ = build_engine(m, profile="optane")
    tr = generate_trace(workload_for(m, 1.05, 0.0, 40, 0), 200)
    masked = 0
    for q in tr:
        r = eng.execute_query(q, "overlapped")
        if r.user_us <= r.item_us:
            assert r.end_to_end_us == r.item_us
            masked += 1
    assert masked >= 0.99 * len(tr)


def test_explicit_start_time_does_not_move_clock():
    m = make_manifest(2, 1)
    eng, _ = build_engine(m)
    q = _trace(m, 1)[0]
    r = eng.execute_query(q, start_us=1e6)
    assert r.start_us == 1e6 and eng.clock_us == 0.0
    eng.execute_query(q)
    assert eng.clock_us > 0


# -- updates ----------------------------------------------------------------

def test_update_is_visible_and_invalidates():
    m = make_manifest(2, 0, rows=100)
    eng, tables = build_engine(m)
    eng.lookup_pooled(0, [7, 8])
    eng.lookup_pooled(1, [1, 2])
    new = quantize_row(np.arange(m.table(0).elem_count, dtype=np.float64))
    hits_before = eng.row_cache.stats.per_table.get(1)
    rep = eng.apply_update([(0, 7, new)])
    assert rep.applied == 1 and not rep.rejected
    v = eng.lookup_pooled(0, [7, 8])
    tables[0].rows[7] = np.frombuffer(new.to_bytes(), np.uint8)
    assert np.array_equal(bits(v), bits(oracle_pool(m, tables, 0, [7, 8])))
    assert eng.row_cache.stats.per_table.get(1) == hits_before


def test_update_rejections():
    m = make_manifest(2, 0, rows=100, pruned=(1,))
    eng, _ = build_engine(m)
    pm = m.pruning[1]
    pruned_row = int(np.nonzero(pm.mapping == PRUNED)[0][0])
    e = m.table(0).elem_count
    rep = eng.apply_update([
        (9, 0, quantize_row(np.ones(e))), (0, 100, quantize_row(np.ones(e))),
        (0, 1, quantize_row(np.ones(e + 1))), (1, pruned_row, quantize_row(np.ones(m.table(1).elem_count)))])
    assert rep.applied == 0
    assert [r[2] for r in rep.rejected] == ["unknown table", "row out of range",
                                            "elem_count mismatch", "row is pruned"]
    # with de-pruning the same row has storage
    eng2, _ = build_engine(m, deprune=True)
    assert eng2.apply_update([(1, pruned_row, quantize_row(np.ones(m.table(1).elem_count)))]).applied == 1


def test_post_update_replay_equals_cold_load():
    m = make_manifest(3, 1, rows=200, pruned=(2,))
    tables = synthesize_tables(m, 1)
    eng, _ = build_engine(m, {k: EmbeddingTable(v.meta, v.rows.copy(), v.pruning) for k, v in tables.items()},
                          dequant=True)
    tr = _trace(m, 100, b_i=2, seed=4)
    for q in tr[:50]:
        eng.execute_query(q)
    rng = np.random.default_rng(2)
    updates = []
    for tid in (0, 2, 3):
        pm = m.pruning.get(tid)
        for r in rng.choice(200, 30, replace=False):
            if pm is not None and pm.mapping[r] == PRUNED:
                continue
            updates.append((tid, int(r), quantize_row(rng.normal(size=m.table(tid).elem_count))))
    assert eng.apply_update(updates).applied == len(updates)
    for tid, r, row in updates:
        pm = m.pruning.get(tid)
        s = int(pm.mapping[r]) if pm is not None else r
        tables[tid].rows[s] = np.frombuffer(row.to_bytes(), np.uint8)
    cold, _ = build_engine(m, tables, dequant=True)
    for q in tr:
        ra, rb = eng.execute_query(q), cold.execute_query(q)
        for tid in ra.pooled:
            for x, y in zip(ra.pooled[tid], rb.pooled[tid]):
                assert np.array_equal(bits(x), bits(y))


def test_concurrent_queries_and_updates():
    m = make_manifest(3, 1, rows=200)
    eng, _ = build_engine(m)
    tr = _trace(m, 60)
    errors = []

    def run(part):
        try:
            for q in part:
                eng.execute_query(q, start_us=0.0)
        except Exception as e:  # pragma: no cover - surfaced below
            errors.append(e)

    ts = [threading.Thread(target=run, args=(tr[i::3],)) for i in range(3)]
    for t in ts:
        t.start()
    for i in range(20):
        eng.apply_update([(0, i, quantize_row(np.ones(m.table(0).elem_count)))])
    for t in ts:
        t.join()
    assert not errors
    assert eng.counters.queries == 60
    c = eng.counters
    assert c.row_hits + c.row_misses == c.row_lookups


# -- accounting -------------------------------------------------------------

def test_device_reads_equal_sm_indices_without_caches():
    m = make_manifest(4, 2, rows=300, pruned=(2,))
    eng, _ = build_engine(m, row_cache_enabled=False, pooled_cache_enabled=False)
    tr = _trace(m, 100)
    expected = 0
    for q in tr:
        eng.execute_query(q)
        for tid in q.table_ids():
            if tid in m.fm_only:
                continue
            pm = m.pruning.get(tid)
            for seq in q.lookups(tid):
                expected += sum(1 for i in seq if pm is None or pm.mapping[i] != PRUNED)
    assert eng.counters.device_reads == eng.device.stats.reads == expected
    assert eng.device.stats.bytes_requested == eng.counters.bytes_requested


def test_device_reads_equal_misses_after_both_caches():
    m = make_manifest(4, 2, rows=300)
    eng, _ = build_engine(m)
    for q in _trace(m, 200):
        eng.execute_query(q)
    c = eng.counters
    per_table_misses = sum(v[1] for v in eng.row_cache.stats.per_table.values())
    assert c.device_reads == eng.device.stats.reads == c.row_misses == per_table_misses
    assert c.row_hits + c.row_misses == c.row_lookups


# -- warmup ----------------------------------------------------------------

def test_warmup_repeating_query_steady_after_first():
    m = single_table()
    eng, _ = build_engine(m, pooled_cache_enabled=False)
    q = QueryBatch(0, {0: [1, 2, 3, 4]})
    rep = eng.warmup_stats([q] * 20, window=1)
    assert rep.steady_hit_rate == 1.0
    assert rep.queries_to_target == 1
    assert rep.hit_series[0] == 0.0 and np.all(rep.hit_series[1:] == 1.0)


def test_warmup_uniform_plateau():
    rows, cache_rows = 5000, 1000
    m = single_table(rows, 16)
    charge = entry_charge(SubCache.MEM_OPT, 24)
    eng, _ = build_engine(m, cache_config=CacheConfig(cache_rows * charge, 0, 1),
                          pooled_cache_enabled=False)
    tr = generate_trace(ZipfSpec([TableWorkload(0, rows, s=0.0, pooling=10)], seed=5), 6000)
    rep = eng.warmup_stats(tr)
    assert rep.steady_hit_rate == pytest.approx(cache_rows / rows, abs=0.02)


def test_warmup_zipf_smoothed_nondecreasing():
    rows = 100_000
    m = ModelManifest([TableMeta(0, rows, 8, avg_pooling_factor=20)])
    eng, _ = build_engine(m, cache_config=CacheConfig(rows * 24, 0, 4), pooled_cache_enabled=False)
    tr = generate_trace(ZipfSpec([TableWorkload(0, rows, s=1.05, pooling=20)], seed=3), 20_000)
    rep = eng.warmup_stats(tr, window=1000)
    sm = rep.smoothed
    # windows of ~20k accesses; allow two binomial standard errors of sampling noise
    noise = 2 * np.sqrt(sm * (1 - sm) / 20_000)
    assert np.all(np.diff(sm) >= -noise[1:])
    assert sm[-1] > sm[0] + 0.2
    assert rep.queries_to_target is not None and rep.warmup_qps_ratio > 0
