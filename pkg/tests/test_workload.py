import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import zeta

from sdm_embstore.embedding_core import QueryBatch, Role
from sdm_embstore.workload import (
    TableWorkload, TraceFormatError, ZipfSpec, analyze, format_trace, generate_trace, lookup_counts,
    make_samplers, parse_trace, read_trace, rows_per_block, spatial_locality, table_accesses,
    temporal_cdf, window_metric, write_trace,
)


def one_table(rows, s, pooling=100, seed=0, rho=0.0, fixed=True):
    return ZipfSpec([TableWorkload(0, rows, s=s, pooling=pooling, fixed_length=fixed)],
                    repeat_rate=rho, seed=seed)


def trace_of(rows_list, tid=0):
    return [QueryBatch(i, {tid: list(r)}) for i, r in enumerate(rows_list)]


# -- generator ------------------------------------------------------------

def test_workload_validation():
    with pytest.raises(ValueError):
        TableWorkload(0, 0)
    with pytest.raises(ValueError):
        TableWorkload(0, 10, s=-1)
    with pytest.raises(ValueError):
        ZipfSpec([TableWorkload(0, 10)], repeat_rate=1.5)
    with pytest.raises(ValueError):
        ZipfSpec([TableWorkload(0, 10), TableWorkload(0, 20)])


def test_uniform_passes_chi_square():
    rows = 1000
    tr = generate_trace(one_table(rows, 0.0, pooling=100), 10_000)
    acc = table_accesses(tr, 0)
    assert acc.size == 1_000_000
    counts = np.bincount(acc, minlength=rows)
    assert stats.chisquare(counts).pvalue > 0.01


def test_zipf_top_decile_share():
    rows = 1_000_000
    s = 1.05
    # independent oracle: generalized harmonic numbers via the Hurwitz zeta function
    H = lambda n: zeta(s) - zeta(s, n + 1)
    analytic = H(rows // 10) / H(rows)
    assert analytic >= 0.60
    tr = generate_trace(one_table(rows, s, pooling=100), 10_000)
    cdf = temporal_cdf(tr, 0, num_rows=rows)
    assert cdf.at(0.1) >= 0.60 - 0.05
    # the rank draws themselves match the analytic mass closely
    sampler = make_samplers(one_table(rows, s))[0]
    ranks = sampler.ranks(1_000_000, np.random.default_rng(9))
    assert np.mean(ranks < rows // 10) == pytest.approx(analytic, abs=0.003)


def test_zipf_rows_are_permuted():
    sampler = make_samplers(one_table(10_000, 1.05))[0]
    assert sorted(sampler.row_of_rank.tolist()) == list(range(10_000))
    assert not np.array_equal(sampler.row_of_rank, np.arange(10_000))


def test_indices_in_range_and_roles():
    spec = ZipfSpec([TableWorkload(0, 50, Role.USER, pooling=5),
                     TableWorkload(1, 7, Role.ITEM, pooling=3)], item_batch=4, seed=2)
    for q in generate_trace(spec, 200):
        assert set(q.user) == {0} and set(q.item) == {1}
        assert len(q.item[1]) == 4
        assert all(0 <= i < 50 for i in q.user[0])
        assert all(0 <= i < 7 for seq in q.item[1] for i in seq)
        assert len(q.user[0]) >= 1


def test_mean_pooling_matches():
    tr = generate_trace(one_table(1000, 1.0, pooling=12, fixed=False, seed=4), 5000)
    _, n_idx = lookup_counts(tr)
    assert n_idx / 5000 == pytest.approx(12, rel=0.03)


def test_full_replay_repeats_first_sequence():
    tr = generate_trace(one_table(10_000, 1.05, pooling=20, rho=1.0), 50)
    first = tr[0].user[0]
    assert all(q.user[0] == first for q in tr)


def test_replay_rate():
    tr = generate_trace(one_table(10**6, 0.0, pooling=30, rho=0.2, seed=1), 5000)
    seen = set()
    repeats = 0
    for q in tr:
        key = tuple(q.user[0])
        repeats += key in seen
        seen.add(key)
    assert repeats / len(tr) == pytest.approx(0.2, abs=0.02)


def test_determinism():
    spec = ZipfSpec([TableWorkload(0, 100, pooling=4), TableWorkload(1, 30, Role.ITEM, pooling=2)],
                    item_batch=3, repeat_rate=0.1, seed=11)
    assert format_trace(generate_trace(spec, 100)) == format_trace(generate_trace(spec, 100))
    spec.seed = 12
    other = format_trace(generate_trace(spec, 100))
    spec.seed = 11
    assert other != format_trace(generate_trace(spec, 100))


# -- temporal CDF ----------------------------------------------------------

def test_cdf_every_row_once_is_diagonal():
    cdf = temporal_cdf(trace_of([range(100)]), 0)
    assert np.allclose(cdf.access_share, cdf.row_fraction)


def test_cdf_single_row_jumps():
    cdf = temporal_cdf(trace_of([[5]] * 20), 0, num_rows=10)
    assert cdf.access_share[0] == 1.0
    assert cdf.row_fraction[0] == 0.1


def test_cdf_empty():
    cdf = temporal_cdf([], 0)
    assert len(cdf) == 0 and cdf.at(0.5) == 0.0


def test_cdf_zipf_dominates_diagonal():
    tr = generate_trace(one_table(5000, 1.05, pooling=50, seed=3), 400)
    cdf = temporal_cdf(tr, 0, num_rows=5000)
    assert np.all(cdf.access_share >= cdf.row_fraction - 1e-12)
    assert np.all(np.diff(cdf.access_share) >= 0)
    assert cdf.access_share[-1] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=300))
def test_cdf_dominance_any_counts(rows):
    cdf = temporal_cdf(trace_of([rows]), 0)
    assert np.all(cdf.access_share >= cdf.row_fraction - 1e-12)
    assert cdf.access_share[-1] == pytest.approx(1.0)


# -- spatial metric --------------------------------------------------------

def test_spatial_hand_cases():
    assert rows_per_block(128) == 32
    assert window_metric(np.arange(32), 128) == 1.0
    assert window_metric(np.arange(32) * 32, 128) == 1 / 32
    assert window_metric(np.array([7, 7, 7]), 128) == 1 / 32
    assert window_metric(np.array([3]), 8192) == 1.0
    assert rows_per_block(8192) == 1


def test_spatial_series_windows():
    tr = trace_of([list(range(32)), list(np.arange(32) * 32)])
    s = spatial_locality(tr, 0, 128, window=32)
    assert s.tolist() == [1.0, 1 / 32]
    with pytest.raises(ValueError):
        spatial_locality(tr, 0, 128, window=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=200), st.integers(1, 9000))
def test_spatial_bounds(rows, dim):
    m = window_metric(np.array(rows), dim)
    assert 0 < m <= 1


@pytest.mark.parametrize("dim", [128, 256])
def test_permuted_generation_has_low_spatial_locality(dim):
    assert rows_per_block(dim) >= 16
    tr = generate_trace(one_table(1_000_000, 1.05, pooling=100, seed=5), 3000)
    rep = analyze(tr, {0: dim}, window=100_000)
    assert rep.mean_spatial(0) < 0.2


# -- trace file ------------------------------------------------------------

def test_round_trip(tmp_path):
    spec = ZipfSpec([TableWorkload(3, 100, pooling=4), TableWorkload(1, 30, Role.ITEM, pooling=2)],
                    item_batch=3, repeat_rate=0.1, seed=11)
    tr = generate_trace(spec, 60)
    p = tmp_path / "t.trace"
    write_trace(tr, p)
    back = read_trace(p)
    assert [(q.query_id, q.user, q.item) for q in back] == [(q.query_id, q.user, q.item) for q in tr]
    assert p.read_bytes().startswith(b"TABLES 3,1\nQ 0 | 3:")
    assert b"\r" not in p.read_bytes()


def test_empty_file_is_empty_trace(tmp_path):
    p = tmp_path / "e.trace"
    p.write_text("")
    assert read_trace(p) == []


def test_truncated_record_names_offset():
    text = "TABLES 0,1\nQ 0 | 0:1,2 | 1x2:3;4\nQ 1 | 0:5 | 1x2:3\n"
    with pytest.raises(TraceFormatError) as ei:
        parse_trace(text)
    assert ei.value.line == 3
    assert ei.value.offset == len("TABLES 0,1\nQ 0 | 0:1,2 | 1x2:3;4\n")
    with pytest.raises(TraceFormatError) as ei:
        parse_trace("TABLES 0\nQ 0 | 0")
    assert ei.value.offset == 9 and "offset 9" in str(ei.value)


def test_malformed_lines():
    for bad in ("Q 0 | 0:1\n", "TABLES 0\nX 0\n", "TABLES 0\nQ 0 | 2:1\n", "TABLES 0\nQ 0 | 0:a\n"):
        with pytest.raises(TraceFormatError):
            parse_trace(bad)
