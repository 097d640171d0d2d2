"""Command-line front end: bench, gen-trace, analyze and plan."""
from __future__ import annotations

import argparse
import configparser
import csv
import heapq
import io
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .embedding_core import Role
from .engine import (
    Engine,
    EngineError,
    LoadOptions,
    ModelManifest,
    Placement,
    PlacementError,
    Mode,
    plan_placement,
    summarize_warmup,
)
from .planner import REPORT_HEADER, fleet_power, parse_scenario, plan_csv, plan_text
from .pooled_cache import PooledConfig
from .presets import (
    ManifestError,
    load_manifest,
    preset_item_batch,
    preset_manifest,
    synthesize_tables,
    workload_for,
)
from .row_cache import CacheConfig
from .scm_device import DeviceError, SimDevice, get_profile
from .workload import (
    DEFAULT_WINDOW,
    TraceFormatError,
    analyze,
    generate_trace,
    read_trace,
    trace_tables,
    write_trace,
)

log = logging.getLogger("sdm_embstore")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ids(v: str) -> List[int]:
    return [int(x) for x in v.replace(",", " ").split()] if v and v.strip() else []


@dataclass
class RunConfig:
    preset: Optional[str] = "small"
    manifest: Optional[str] = None
    prune_keep: float = 0.5
    item_batch: Optional[int] = None
    trace: Optional[str] = None
    zipf_s: float = 1.05
    repeat_rate: float = 0.05
    queries: int = 500
    seed: int = 0
    profile: str = "nand"
    capacity_bytes: Optional[int] = None
    max_outstanding_per_table: Optional[int] = None
    max_tables_in_flight: Optional[int] = None
    max_outstanding_total: Optional[int] = None
    max_pending: Optional[int] = None
    policy: str = "sm_only"
    fm_budget_bytes: Optional[int] = None
    fm_tables: Optional[str] = None
    no_cache_tables: List[int] = field(default_factory=list)
    row_cache: bool = True
    mem_opt_capacity_bytes: int = 8 << 20
    cpu_opt_capacity_bytes: int = 4 << 20
    partitions: int = 4
    route_threshold: int = 255
    pooled_cache: bool = True
    pooled_capacity_bytes: int = 4 << 20
    len_threshold: int = 1
    deprune: bool = False
    dequantize_at_load: bool = False
    mode: str = "overlapped"
    streams: int = 1
    window: int = DEFAULT_WINDOW
    cdf_points: int = 101
    dim_bytes: int = 128
    out: Optional[str] = None
    base_dir: str = "."
    raw: Optional[configparser.ConfigParser] = None

    def path(self, p: Optional[str]) -> Optional[str]:
        if p is None or os.path.isabs(p):
            return p
        return os.path.join(self.base_dir, p)

    def validate(self) -> None:
        if self.queries < 0:
            raise ConfigError("queries must be >= 0")
        if self.streams < 1:
            raise ConfigError("streams must be >= 1")
        if not 0.0 <= self.repeat_rate <= 1.0:
            raise ConfigError("repeat_rate must be in [0, 1]")
        if self.zipf_s < 0:
            raise ConfigError("zipf s must be >= 0")
        if self.len_threshold < 1:
            raise ConfigError("len_threshold must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < self.prune_keep <= 1.0:
            raise ConfigError("prune_keep must be in (0, 1]")
        try:
            Mode.parse(self.mode)
            get_profile(self.profile)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for p in (self.manifest, self.trace):
            if p is not None and not os.path.exists(self.path(p)):
                raise ConfigError(f"file not found: {self.path(p)}")


# (section, key, attribute, converter)
_KEYS = [
    ("model", "preset", "preset", str), ("model", "manifest", "manifest", str),
    ("model", "prune_keep", "prune_keep", float), ("model", "item_batch", "item_batch", int),
    ("workload", "trace", "trace", str), ("workload", "s", "zipf_s", float),
    ("workload", "repeat_rate", "repeat_rate", float), ("workload", "queries", "queries", int),
    ("workload", "seed", "seed", int),
    ("device", "profile", "profile", str), ("device", "capacity_bytes", "capacity_bytes", int),
    ("device", "max_outstanding_per_table", "max_outstanding_per_table", int),
    ("device", "max_tables_in_flight", "max_tables_in_flight", int),
    ("device", "max_outstanding_total", "max_outstanding_total", int),
    ("device", "max_pending", "max_pending", int),
    ("placement", "policy", "policy", str), ("placement", "fm_budget_bytes", "fm_budget_bytes", int),
    ("placement", "fm_tables", "fm_tables", str), ("placement", "no_cache_tables", "no_cache_tables", _ids),
    ("cache", "enabled", "row_cache", _bool),
    ("cache", "mem_opt_capacity_bytes", "mem_opt_capacity_bytes", int),
    ("cache", "cpu_opt_capacity_bytes", "cpu_opt_capacity_bytes", int),
    ("cache", "partitions", "partitions", int),
    ("cache", "dim_route_threshold_bytes", "route_threshold", int),
    ("pooled", "enabled", "pooled_cache", _bool),
    ("pooled", "capacity_bytes", "pooled_capacity_bytes", int),
    ("pooled", "len_threshold", "len_threshold", int),
    ("load", "deprune", "deprune", _bool), ("load", "dequantize_at_load", "dequantize_at_load", _bool),
    ("run", "mode", "mode", str), ("run", "streams", "streams", int), ("run", "seed", "seed", int),
    ("run", "out", "out", str),
    ("analyze", "window", "window", int), ("analyze", "cdf_points", "cdf_points", int),
    ("analyze", "dim_bytes", "dim_bytes", int),
]


def load_config(path: Optional[str]) -> RunConfig:
    cfg = RunConfig()
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        cfg.base_dir = os.path.dirname(os.path.abspath(path))
    for section, key, attr, conv in _KEYS:
        if cp.has_option(section, key):
            raw = cp.get(section, key).strip()
            try:
                setattr(cfg, attr, conv(raw) if raw != "" or conv is _ids else None)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
    if cfg.manifest:
        cfg.preset = None if not cp.has_option("model", "preset") else cfg.preset
    cfg.raw = cp
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for attr in ("seed", "queries", "profile", "policy", "fm_budget_bytes", "len_threshold",
                 "out", "trace"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
    if getattr(args, "deprune", False):
        cfg.deprune = True
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    return cfg


# -- model / engine assembly ------------------------------------------------

def build_manifest(cfg: RunConfig) -> ModelManifest:
    try:
        if cfg.manifest:
            m = load_manifest(cfg.path(cfg.manifest), cfg.prune_keep, cfg.seed)
        else:
            m = preset_manifest(cfg.preset or "small", cfg.prune_keep, cfg.seed)
    except (ManifestError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg.fm_tables is not None:
        v = cfg.fm_tables.strip().lower()
        if v == "item":
            m.fm_only = {t.table_id for t in m.tables if t.role is Role.ITEM}
        elif v in ("", "none"):
            m.fm_only = set()
        else:
            m.fm_only = set(_ids(v))
    m.no_cache = set(cfg.no_cache_tables)
    unknown = (m.fm_only | m.no_cache) - set(m.table_ids)
    if unknown:
        raise ConfigError(f"placement lists unknown tables {sorted(unknown)}")
    return m


def item_batch_for(cfg: RunConfig) -> int:
    if cfg.item_batch is not None:
        return cfg.item_batch
    if not cfg.manifest and cfg.preset:
        return preset_item_batch(cfg.preset)
    return 1


def default_budget(m: ModelManifest, deprune: bool) -> int:
    mapping = 0 if deprune else m.mapping_bytes()
    return mapping + sum(m.table_bytes(t, deprune) for t in m.fm_only)


def build_engine(cfg: RunConfig, m: ModelManifest) -> Engine:
    budget = cfg.fm_budget_bytes
    if budget is None:
        budget = default_budget(m, cfg.deprune)
    try:
        plan = plan_placement(m, cfg.policy, budget, cfg.deprune)
    except PlacementError as e:
        raise ConfigError(str(e)) from None
    profile = get_profile(cfg.profile)
    sm = sum(m.stored_rows(t, cfg.deprune) * (m.table(t).raw_row_bytes if cfg.dequantize_at_load
                                              else m.table(t).dim_bytes)
             for t, p in plan.assignment.items() if p is not Placement.FM_DIRECT)
    blocks = len(m.tables) + 1
    capacity = cfg.capacity_bytes or max(profile.block_bytes,
                                         sm + blocks * profile.block_bytes)
    dev = SimDevice(profile, capacity, seed=cfg.seed, max_pending=cfg.max_pending)
    # unset total cap defaults to ~75% of saturation; 0 disables it
    total = cfg.max_outstanding_total
    if total is None:
        total = profile.default_outstanding_cap()
    dev.throttle_config(cfg.max_outstanding_per_table, cfg.max_tables_in_flight, total or None)
    cache = CacheConfig(cfg.mem_opt_capacity_bytes, cfg.cpu_opt_capacity_bytes, cfg.partitions,
                        cfg.route_threshold)
    pooled = PooledConfig(cfg.pooled_capacity_bytes, cfg.len_threshold, cfg.partitions)
    eng = Engine(dev, cache, pooled, row_cache_enabled=cfg.row_cache,
                 pooled_cache_enabled=cfg.pooled_cache)
    eng.load_model(m, synthesize_tables(m, cfg.seed), plan,
                   LoadOptions(cfg.deprune, cfg.dequantize_at_load))
    return eng


def build_trace(cfg: RunConfig, m: ModelManifest):
    if cfg.trace:
        try:
            return read_trace(cfg.path(cfg.trace))
        except TraceFormatError as e:
            raise ConfigError(f"{cfg.trace}: {e}") from None
    spec = workload_for(m, cfg.zipf_s, cfg.repeat_rate, item_batch_for(cfg), cfg.seed)
    return generate_trace(spec, cfg.queries)


# -- bench ------------------------------------------------------------------

@dataclass
class BenchReport:
    queries: int
    failed_queries: int
    qps: float
    makespan_us: float
    e2e_p50_us: float
    e2e_p95_us: float
    e2e_p99_us: float
    user_p50_us: float
    user_p95_us: float
    user_p99_us: float
    item_p50_us: float
    item_p95_us: float
    item_p99_us: float
    row_lookups: int
    row_hits: int
    row_misses: int
    row_hit_rate: float
    pooled_probes: int
    pooled_hits: int
    pooled_hit_rate: float
    device_reads: int
    rejected_reads: int
    offered_iops: float
    sustained_iops: float
    bytes_requested: int
    bytes_transferred: int
    read_amplification: float
    device_p99_us: float
    deferred_queries: int
    fm_bytes_resident: int
    fm_budget_bytes: int
    warmup_queries: int
    steady_hit_rate: float
    warmup_qps_ratio: float

    def rows(self):
        for k, v in vars(self).items():
            yield k, (f"{v:.6g}" if isinstance(v, float) else str(v))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(REPORT_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(k) for k in vars(self))
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in self.rows())


class ReconciliationError(RuntimeError):
    pass


def reconcile(eng: Engine) -> None:
    c, d = eng.counters, eng.device.stats
    checks = [
        ("row hits + misses = row lookups", c.row_hits + c.row_misses, c.row_lookups),
        ("device reads = row misses - refused", d.reads, c.row_misses - c.rejected_reads),
        ("engine reads = device reads", c.device_reads, d.reads),
        ("requested bytes", c.bytes_requested, d.bytes_requested),
    ]
    bad = [f"{name}: {a} != {b}" for name, a, b in checks if a != b]
    if bad:
        raise ReconciliationError("; ".join(bad))


def _pct(a: np.ndarray, q: float) -> float:
    return float(np.percentile(a, q)) if a.size else 0.0


def run_bench(cfg: RunConfig) -> BenchReport:
    m = build_manifest(cfg)
    eng = build_engine(cfg, m)
    trace = build_trace(cfg, m)
    mode = Mode.parse(cfg.mode)
    n = len(trace)
    e2e, user, item = np.zeros(n), np.zeros(n), np.zeros(n)
    hits, lookups = np.zeros(n), np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    streams = [(0.0, s, s) for s in range(min(cfg.streams, n))]
    heapq.heapify(streams)
    failed = 0
    end = 0.0
    while streams:
        clock, s, qi = heapq.heappop(streams)
        before = eng.counters.copy()
        try:
            res = eng.execute_query(trace[qi], mode, start_us=clock)
            e2e[qi], user[qi], item[qi] = res.end_to_end_us, res.user_us, res.item_us
            ok[qi] = True
            clock += res.end_to_end_us
        except (EngineError, DeviceError) as e:
            failed += 1
            log.warning("query %d failed: %s", trace[qi].query_id, e)
        d = eng.counters.minus(before)
        hits[qi], lookups[qi] = d.row_hits, d.row_hits + d.row_misses
        end = max(end, clock)
        if qi + cfg.streams < n:
            heapq.heappush(streams, (clock, s, qi + cfg.streams))
    reconcile(eng)
    c, d = eng.counters, eng.device.stats
    secs = end / 1e6
    good = ok.nonzero()[0]
    wu = summarize_warmup(hits, lookups, e2e)
    return BenchReport(
        queries=n, failed_queries=failed, qps=(good.size / secs) if secs else 0.0, makespan_us=end,
        e2e_p50_us=_pct(e2e[good], 50), e2e_p95_us=_pct(e2e[good], 95), e2e_p99_us=_pct(e2e[good], 99),
        user_p50_us=_pct(user[good], 50), user_p95_us=_pct(user[good], 95),
        user_p99_us=_pct(user[good], 99), item_p50_us=_pct(item[good], 50),
        item_p95_us=_pct(item[good], 95), item_p99_us=_pct(item[good], 99),
        row_lookups=c.row_lookups, row_hits=c.row_hits, row_misses=c.row_misses,
        row_hit_rate=c.row_hits / c.row_lookups if c.row_lookups else 0.0,
        pooled_probes=c.pooled_probes, pooled_hits=c.pooled_hits,
        pooled_hit_rate=c.pooled_hits / c.pooled_probes if c.pooled_probes else 0.0,
        device_reads=d.reads, rejected_reads=c.rejected_reads,
        offered_iops=c.row_lookups / secs if secs else 0.0,
        sustained_iops=d.reads / secs if secs else 0.0,
        bytes_requested=d.bytes_requested, bytes_transferred=d.bytes_transferred,
        read_amplification=d.amplification, device_p99_us=d.p99,
        deferred_queries=c.deferred_queries, fm_bytes_resident=eng.fm_bytes_resident,
        fm_budget_bytes=eng.plan.fm_budget_bytes, warmup_queries=wu.warmup_queries,
        steady_hit_rate=wu.steady_hit_rate, warmup_qps_ratio=wu.warmup_qps_ratio)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)


def cmd_bench(cfg: RunConfig) -> int:
    rep = run_bench(cfg)
    print(rep.to_text())
    _emit(rep.to_csv(), cfg.out)
    return EXIT_OK


def cmd_gen_trace(cfg: RunConfig) -> int:
    if not cfg.out:
        raise ConfigError("gen-trace needs --out (or [run] out)")
    m = build_manifest(cfg)
    spec = workload_for(m, cfg.zipf_s, cfg.repeat_rate, item_batch_for(cfg), cfg.seed)
    trace = generate_trace(spec, cfg.queries)
    write_trace(trace, cfg.out)
    print(f"wrote {len(trace)} queries over {len(spec.tables)} tables to {cfg.out}")
    return EXIT_OK


def analysis_csv(trace, dims: Dict[int, int], window: int, cdf_points: int) -> str:
    rep = analyze(trace, dims, window, cdf_points)
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "table_id", "x", "y"])
    for tid in dims:
        cdf = rep.temporal[tid]
        for x, y in zip(cdf.row_fraction, cdf.access_share):
            w.writerow(["temporal", tid, f"{x:.6f}", f"{y:.6f}"])
        for i, v in enumerate(rep.spatial[tid]):
            w.writerow(["spatial", tid, i, f"{v:.6f}"])
    return buf.getvalue()


def cmd_analyze(cfg: RunConfig) -> int:
    if not cfg.trace:
        raise ConfigError("analyze needs a trace ([workload] trace or --trace)")
    try:
        trace = read_trace(cfg.path(cfg.trace))
    except TraceFormatError as e:
        raise ConfigError(f"{cfg.trace}: {e}") from None
    dims = {t: cfg.dim_bytes for t in trace_tables(trace)}
    has_model = cfg.manifest or (cfg.raw is not None and cfg.raw.has_option("model", "preset"))
    if has_model:
        m = build_manifest(cfg)
        dims.update({t.table_id: t.dim_bytes for t in m.tables if t.table_id in dims})
    text = analysis_csv(trace, dims, cfg.window, cfg.cdf_points)
    rep = analyze(trace, dims, cfg.window, None)
    for tid in dims:
        print(f"table {tid}: top10% rows carry {100 * rep.temporal[tid].at(0.1):.1f}% of accesses, "
              f"mean spatial metric {rep.mean_spatial(tid):.4f}")
    _emit(text, cfg.out)
    return EXIT_OK


def cmd_plan(cfg: RunConfig, config_path: Optional[str]) -> int:
    if config_path is None:
        raise ConfigError("plan needs --config with a [scenario] section")
    with open(config_path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        scenario = parse_scenario(text)
    except (ValueError, KeyError, configparser.Error) as e:
        raise ConfigError(f"{config_path}: {e}") from None
    results = fleet_power(scenario)
    print(plan_text(scenario, results))
    _emit(plan_csv(scenario, results), cfg.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdm-embstore", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("bench", "gen-trace", "analyze", "plan"):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--queries", type=int)
        sp.add_argument("--profile")
        sp.add_argument("--policy")
        sp.add_argument("--fm-budget-bytes", type=int, dest="fm_budget_bytes")
        sp.add_argument("--len-threshold", type=int, dest="len_threshold")
        sp.add_argument("--deprune", action="store_true")
        sp.add_argument("--mode", choices=["seq", "overlap"])
        sp.add_argument("--trace")
        sp.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("SDM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        cfg.validate()
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "gen-trace":
            return cmd_gen_trace(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_plan(cfg, args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, DeviceError, ReconciliationError, OSError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
