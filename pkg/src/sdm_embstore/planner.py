"""Closed-form capacity, bandwidth, IOPS, endurance, warmup and fleet-power arithmetic.

Throughput and latency figures from the proportional models use a
constant of 1, so they are relative units: ratios between options are
meaningful, absolute values are not.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

from .embedding_core import Role
from .scm_device import DeviceProfile, OPTANE, NAND, endurance_report

update_interval = endurance_report


@dataclass
class TableSpec:
    pooling: float
    dim_bytes: float
    role: Role = Role.USER
    count: int = 1

    def __post_init__(self):
        self.role = Role(self.role)
        if self.pooling <= 0 or self.dim_bytes <= 0 or self.count < 1:
            raise ValueError("pooling, dim_bytes and count must be positive")

    @property
    def bytes_per_lookup(self) -> float:
        return self.count * self.pooling * self.dim_bytes


@dataclass
class ModelSpec:
    tables: List[TableSpec]
    b_u: int = 1
    b_i: int = 1
    comp_q: float = 1.0

    def __post_init__(self):
        if self.b_u < 1 or self.b_i < 1 or self.comp_q <= 0:
            raise ValueError("batches and comp_q must be positive")

    def _sum(self, role: Optional[Role]) -> float:
        return sum(t.bytes_per_lookup for t in self.tables if role is None or t.role is role)

    @property
    def user_bytes(self) -> float:
        """Bytes per query over user tables, before batching."""
        return self._sum(Role.USER)

    @property
    def item_bytes(self) -> float:
        return self._sum(Role.ITEM)

    @property
    def bytes_per_query(self) -> float:
        return self.b_u * self.user_bytes + self.b_i * self.item_bytes

    def lookups_per_query(self, role: Optional[Role] = Role.USER) -> float:
        return sum(t.count * t.pooling for t in self.tables if role is None or t.role is role)


@dataclass
class HwSpec:
    bw_fast: float
    bw_slow: float
    comp: float = math.inf
    per_host_power: float = 1.0
    sm_iops_capacity: Optional[float] = None
    sm_capacity_gb: Optional[float] = None
    pdwpd: Optional[float] = None

    def __post_init__(self):
        if self.bw_fast <= 0 or self.bw_slow <= 0 or self.comp <= 0:
            raise ValueError("hardware rates must be positive")

    @classmethod
    def from_profile(cls, profile: DeviceProfile, bw_fast: float, devices: int = 1,
                     row_bytes: int = 64, **kw) -> "HwSpec":
        """Slow-memory BW from device IOPS at one row per IO."""
        return cls(bw_fast=bw_fast, bw_slow=profile.effective_bandwidth(row_bytes, devices),
                   sm_iops_capacity=devices * profile.saturation_iops, pdwpd=profile.pdwpd, **kw)


@dataclass
class BwRequirement:
    bw_total: float
    bw_user: float
    bw_item: float

    @property
    def bw_split_total(self) -> float:
        return self.bw_user + self.bw_item


def bw_required(model: ModelSpec, qps: float) -> BwRequirement:
    """``bw_total`` ignores batching; the user/item split applies B_U and B_I."""
    return BwRequirement(
        bw_total=qps * (model.user_bytes + model.item_bytes),
        bw_user=qps * model.b_u * model.user_bytes,
        bw_item=qps * model.b_i * model.item_bytes)


@dataclass
class LatencyBudget:
    slow_mem_bw_needed: float
    device_bw_needed: float
    exposed: bool
    degenerate: bool = False


def latency_budget(model: ModelSpec, hw: HwSpec, hit_rate: float = 0.0) -> LatencyBudget:
    """Slow-memory BW that keeps the user path within the item path's time.

    With a row cache in front of slow memory only misses reach the device,
    so the device must supply ``(1 - hit_rate)`` of the needed BW.
    """
    if not 0.0 <= hit_rate <= 1.0:
        raise ValueError("hit_rate must be in [0, 1]")
    user = model.b_u * model.user_bytes
    item = model.b_i * model.item_bytes
    if item == 0:
        return LatencyBudget(0.0, 0.0, False, degenerate=True)
    needed = user * hw.bw_fast / item
    device = needed * (1.0 - hit_rate)
    return LatencyBudget(needed, device, hw.bw_slow < device)


@dataclass
class HostEstimate:
    qps_host: float
    latency_rel: float
    hosts: int
    hosts_exact: float


def hosts_for(total_qps: float, qps_host: float) -> int:
    if qps_host <= 0:
        raise ValueError("qps_host must be positive")
    return math.ceil(total_qps / qps_host - 1e-9)


def qps_latency_hosts(model: ModelSpec, hw: HwSpec, total_qps: float) -> HostEstimate:
    bw_q = model.bytes_per_query
    qps_bw = hw.bw_fast / bw_q if bw_q else math.inf
    qps_host = min(qps_bw, hw.comp / model.comp_q)
    latency = bw_q / hw.bw_fast + model.comp_q / hw.comp
    exact = total_qps / qps_host
    return HostEstimate(qps_host, latency, hosts_for(total_qps, qps_host), exact)


@dataclass
class IopsRequirement:
    offered_iops: float
    sustained_iops: float
    ssds_needed: Optional[int] = None


def iops_required(qps: float, lookups_per_query: float, hit_rate: float,
                  profile: Optional[DeviceProfile] = None) -> IopsRequirement:
    """``lookups_per_query`` is the sum of pooling factors over SM tables."""
    if not 0.0 <= hit_rate <= 1.0:
        raise ValueError("hit_rate must be in [0, 1]")
    offered = qps * lookups_per_query
    sustained = offered * (1.0 - hit_rate)
    ssds = None
    if profile is not None:
        ssds = math.ceil(sustained / profile.saturation_iops - 1e-9)
    return IopsRequirement(offered, sustained, ssds)


@dataclass(frozen=True)
class IopsPreset:
    name: str
    qps: float
    sm_tables: int
    pooling: float
    hit_rate: float
    profile: DeviceProfile
    ref_offered: float
    ref_sustained: float
    ref_ssds: Optional[int] = None

    def evaluate(self) -> IopsRequirement:
        return iops_required(self.qps, self.sm_tables * self.pooling, self.hit_rate, self.profile)


IOPS_PRESETS: Dict[str, IopsPreset] = {
    "M1": IopsPreset("M1", 120, 50, 42, 0.96, NAND, 246_000, 10_000),
    "M2": IopsPreset("M2", 450, 450, 25, 0.90, OPTANE, 4_800_000, 480_000),
    "M3": IopsPreset("M3", 3150, 2000, 30, 0.80, OPTANE, 36_000_000, 36_000_000, 9),
}


# -- model presets ----------------------------------------------------------


def model_preset(name: str) -> ModelSpec:
    """Aggregate per-role table shapes for the three target models (avg dims)."""
    shapes = {
        "M1": ((61, 42, 51), (30, 9, 69), 50),
        "M2": ((450, 25, 64), (280, 14, 38), 150),
        "M3": ((1800, 26, 192), (900, 26, 192), 1000),
    }
    try:
        (nu, pu, du), (ni, pi, di), b_i = shapes[name.upper()]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(shapes)}")
    return ModelSpec([TableSpec(pu, du, Role.USER, nu), TableSpec(pi, di, Role.ITEM, ni)],
                     b_u=1, b_i=b_i)


def m2_latency_hw(profile: DeviceProfile) -> HwSpec:
    """Host for the M2 latency-budget check: two devices, 64 B rows."""
    return HwSpec.from_profile(profile, bw_fast=50e9, devices=2, row_bytes=64)


M2_HIT_RATE = 0.9


# -- fleet power ------------------------------------------------------------

@dataclass
class HostOption:
    name: str
    power: float = 1.0
    qps: Optional[float] = None
    aux_ratio: float = 0.0
    aux_power: float = 0.0
    utilization: Optional[float] = None

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError(f"{self.name}: power must be positive")
        if self.qps is not None and self.qps <= 0:
            raise ValueError(f"{self.name}: qps must be positive")
        if self.utilization is not None and not 0.0 < self.utilization <= 1.0:
            raise ValueError(f"{self.name}: utilization must be in (0, 1]")
        if self.aux_ratio < 0 or self.aux_power < 0:
            raise ValueError(f"{self.name}: auxiliary ratio and power must be >= 0")


@dataclass
class WarmupSpec:
    r: float
    w: float
    p: float
    t: float


@dataclass
class ScenarioSpec:
    name: str
    options: List[HostOption]
    total_qps: Optional[float] = None
    baseline: Optional[str] = None
    warmup: Optional[WarmupSpec] = None

    def __post_init__(self):
        if not self.options:
            raise ValueError("scenario needs at least one option")
        if self.baseline is None:
            self.baseline = self.options[0].name
        if self.baseline not in {o.name for o in self.options}:
            raise ValueError(f"baseline {self.baseline!r} is not an option")
        needs_qps = any(o.qps is not None for o in self.options)
        if needs_qps and (self.total_qps is None or self.total_qps <= 0):
            raise ValueError("options with qps need a positive total_qps demand")


@dataclass
class OptionResult:
    name: str
    qps: Optional[float]
    power: float
    hosts: Optional[float]
    aux_hosts: float
    utilization: Optional[float]
    total_power: float
    savings_pct: float = 0.0

    @property
    def hosts_display(self) -> Optional[int]:
        return None if self.hosts is None else math.ceil(self.hosts - 1e-9)

    @property
    def aux_hosts_display(self) -> int:
        return math.ceil(self.aux_hosts - 1e-9)


def fleet_power(scenario: ScenarioSpec) -> List[OptionResult]:
    """Total power per option and savings against the baseline option.

    Options with a QPS figure need demand/qps hosts plus auxiliary hosts at
    ``aux_ratio`` per host. Options with a utilization figure are scaled by
    baseline utilization over their own. Power uses exact host counts.
    """
    base_util = next(o.utilization for o in scenario.options if o.name == scenario.baseline)
    out = []
    for o in scenario.options:
        if o.qps is not None:
            hosts = scenario.total_qps / o.qps
            aux = hosts * o.aux_ratio
            total = hosts * o.power + aux * o.aux_power
        else:
            hosts, aux, total = None, 0.0, o.power
        if o.utilization is not None and base_util is not None:
            total *= base_util / o.utilization
        out.append(OptionResult(o.name, o.qps, o.power, hosts, aux, o.utilization, total))
    base = next(r for r in out if r.name == scenario.baseline)
    for r in out:
        r.savings_pct = 100.0 * (1.0 - r.total_power / base.total_power)
    return out


def warmup_overprovision(r: float, w: float, p: float, t: float) -> float:
    """Extra capacity fraction (r * w) / (p * t) for rolling updates."""
    if p <= 0 or t <= 0:
        raise ValueError("p and t must be positive")
    if not 0 < r <= 1 or not 0 < p <= 1:
        raise ValueError("r and p are fractions in (0, 1]")
    if w <= 0:
        raise ValueError("w must be positive")
    return (r * w) / (p * t)


def table6() -> ScenarioSpec:
    return ScenarioSpec("table6", [HostOption("HW-L", 1.0, qps=240),
                                   HostOption("HW-SS+SDM", 0.4, qps=120)], total_qps=288_000)


def table7() -> ScenarioSpec:
    return ScenarioSpec("table7", [
        HostOption("HW-AN+ScaleOut", 1.0, qps=450, aux_ratio=0.2, aux_power=0.25),
        HostOption("HW-AN+SDM", 1.4, qps=230),
        HostOption("HW-AO+SDM", 1.0, qps=450)], total_qps=675_000)


def table9() -> ScenarioSpec:
    return ScenarioSpec("table9", [HostOption("HW-FA", 1.0, utilization=0.63),
                                   HostOption("HW-FAO+SDM", 1.01, utilization=0.90)])


SCENARIOS = {"table6": table6, "table7": table7, "table9": table9}


# -- scenario files and reports ---------------------------------------------

def _opt_float(sec, key) -> Optional[float]:
    v = sec.get(key)
    return None if v is None or v.strip() == "" else float(v)


def parse_scenario(text: str) -> ScenarioSpec:
    """INI text: a ``[scenario]`` section plus one ``[option NAME]`` per host type."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    if "scenario" not in cp:
        raise ValueError("missing [scenario] section")
    sc = cp["scenario"]
    preset = sc.get("preset")
    if preset:
        if preset not in SCENARIOS:
            raise ValueError(f"unknown scenario preset {preset!r}")
        return SCENARIOS[preset]()
    options = []
    for name in cp.sections():
        if not name.startswith("option "):
            continue
        s = cp[name]
        options.append(HostOption(
            name=name[len("option "):].strip(), power=float(s.get("power", "1.0")),
            qps=_opt_float(s, "qps"), aux_ratio=float(s.get("aux_ratio", "0")),
            aux_power=float(s.get("aux_power", "0")), utilization=_opt_float(s, "utilization")))
    warm = None
    if "warmup" in cp:
        w = cp["warmup"]
        warm = WarmupSpec(float(w["r"]), float(w["w"]), float(w["p"]), float(w["t"]))
    return ScenarioSpec(sc.get("name", "scenario"), options, _opt_float(sc, "total_qps"),
                        sc.get("baseline") or None, warm)


REPORT_HEADER = "# sdm-embstore report v1"
PLAN_COLUMNS = ["scenario", "option", "qps", "power", "hosts", "aux_hosts", "utilization",
                "total_power", "savings_pct"]


def _fmt(v, digits=4) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))
    return str(v)


def plan_rows(scenario: ScenarioSpec, results: Sequence[OptionResult]) -> List[List[str]]:
    return [[scenario.name, r.name, _fmt(r.qps), _fmt(r.power), _fmt(r.hosts_display),
             _fmt(r.aux_hosts_display if r.aux_hosts else None), _fmt(r.utilization),
             f"{r.total_power:.2f}", f"{r.savings_pct:.1f}"] for r in results]


def plan_csv(scenario: ScenarioSpec, results: Sequence[OptionResult]) -> str:
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_COLUMNS)
    w.writerows(plan_rows(scenario, results))
    if scenario.warmup is not None:
        wu = scenario.warmup
        buf.write(f"# warmup_overprovision,{warmup_overprovision(wu.r, wu.w, wu.p, wu.t):.4f}\n")
    return buf.getvalue()


def plan_text(scenario: ScenarioSpec, results: Sequence[OptionResult]) -> str:
    rows = [PLAN_COLUMNS[1:]] + [r[1:] for r in plan_rows(scenario, results)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"scenario: {scenario.name}"]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    if scenario.warmup is not None:
        wu = scenario.warmup
        lines.append(f"warmup over-provisioning: "
                     f"{100 * warmup_overprovision(wu.r, wu.w, wu.p, wu.t):.2f}%")
    return "\n".join(lines)
