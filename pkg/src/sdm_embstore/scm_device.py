"""Slow-memory block device: a discrete-event simulated SSD and a file backend.

Time is virtual and measured in microseconds. The simulated device is a
multi-channel server: each request is dispatched (subject to throttle
caps) to the earliest-free channel, waits FIFO behind that channel's
backlog, is serviced for a lognormal time, and then pays a link transfer
time proportional to the bytes actually moved over the bus.
"""
from __future__ import annotations

import heapq
import math
import mmap
import os
import threading
from array import array
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

DWORD = 4
GB = 1000 ** 3


class DeviceError(Exception):
    pass


class QueueFullError(DeviceError):
    """Submission refused because the software submission queue is full."""

    def __init__(self, pending: int, limit: int, rejected: int):
        super().__init__(
            f"submission queue full: {pending} pending + {rejected} new > limit {limit}")
        self.pending = pending
        self.limit = limit
        self.rejected = rejected


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    saturation_iops: float
    base_latency_us: float
    block_bytes: int
    supports_subblock: bool
    link_bytes_per_us: float
    pdwpd: float
    max_outstanding: int
    channels: int
    sigma: float = 0.2
    write_latency_us: Optional[float] = None
    subblock_service_factor: float = 0.96

    def __post_init__(self):
        if self.saturation_iops <= 0 or self.base_latency_us <= 0:
            raise ValueError("saturation_iops and base_latency_us must be positive")
        if self.block_bytes not in (512, 4096):
            raise ValueError("block_bytes must be 512 or 4096")
        if self.channels < 1 or self.max_outstanding < 1:
            raise ValueError("channels and max_outstanding must be >= 1")
        if self.link_bytes_per_us <= 0 or self.sigma < 0:
            raise ValueError("link_bytes_per_us must be positive and sigma non-negative")
        if abs(self.calibration_error()) > 0.05:
            raise ValueError(
                f"profile {self.name}: channels/base_latency = "
                f"{self.channels / self.base_latency_us * 1e6:.0f} IOPS is not within 5% "
                f"of saturation_iops {self.saturation_iops:.0f}")

    def calibration_error(self) -> float:
        return (self.channels / (self.base_latency_us * 1e-6)) / self.saturation_iops - 1.0

    @property
    def write_service_us(self) -> float:
        return self.write_latency_us if self.write_latency_us is not None else self.base_latency_us

    def effective_bandwidth(self, row_bytes: int, devices: int = 1) -> float:
        """Useful bytes/s when every IO carries one row of ``row_bytes``."""
        return devices * self.saturation_iops * row_bytes

    def default_outstanding_cap(self) -> int:
        """Outstanding IO cap that holds the device near 75% of saturation."""
        return max(1, int(0.75 * self.channels))

    @classmethod
    def calibrated(cls, name: str, saturation_iops: float, base_latency_us: float,
                   **kwargs) -> "DeviceProfile":
        channels = max(1, round(saturation_iops * base_latency_us * 1e-6))
        return cls(name, saturation_iops, base_latency_us, channels=channels, **kwargs)


NAND = DeviceProfile(
    name="nand", saturation_iops=0.5e6, base_latency_us=100.0, block_bytes=4096,
    supports_subblock=False, link_bytes_per_us=3500.0, pdwpd=5.0,
    max_outstanding=1024, channels=50, sigma=0.35, write_latency_us=400.0)

OPTANE = DeviceProfile(
    name="optane", saturation_iops=4e6, base_latency_us=10.0, block_bytes=512,
    supports_subblock=True, link_bytes_per_us=3500.0, pdwpd=100.0,
    max_outstanding=1024, channels=40, sigma=0.1, write_latency_us=12.0)

PROFILES: Dict[str, DeviceProfile] = {"nand": NAND, "optane": OPTANE}


def get_profile(name: str, **overrides) -> DeviceProfile:
    try:
        base = PROFILES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown device profile {name!r}; choose from {sorted(PROFILES)}")
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class IoRequest:
    table_id: int
    byte_offset: int
    length: int
    subblock: bool = False


@dataclass
class IoCompletion:
    request: IoRequest
    data: bytes
    latency_us: float
    bytes_transferred: int
    submit_us: float = 0.0
    dispatch_us: float = 0.0
    complete_us: float = 0.0
    deferred: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def device_latency_us(self) -> float:
        return self.complete_us - self.dispatch_us


class IoHandle:
    """Completions for one submission. Everything is resolved in virtual time
    at submit, so ``wait`` never blocks; ``poll`` filters by a virtual clock."""

    def __init__(self, completions: List[IoCompletion], submit_us: float):
        self._completions = completions
        self.submit_us = submit_us

    def __len__(self):
        return len(self._completions)

    def wait(self) -> List[IoCompletion]:
        return sorted(self._completions, key=lambda c: c.complete_us)

    def poll(self, now_us: float) -> List[IoCompletion]:
        return [c for c in self.wait() if c.complete_us <= now_us]

    @property
    def done_us(self) -> float:
        return max((c.complete_us for c in self._completions), default=self.submit_us)

    @property
    def any_deferred(self) -> bool:
        return any(c.deferred for c in self._completions)

    def in_order(self) -> List[IoCompletion]:
        """Completions in submission order."""
        return list(self._completions)


@dataclass
class DeviceStats:
    reads: int = 0
    writes: int = 0
    errors: int = 0
    bytes_transferred: int = 0
    bytes_requested: int = 0
    bytes_written: int = 0
    rejected_for_queue_full: int = 0
    deferred: int = 0
    first_submit_us: Optional[float] = None
    last_complete_us: float = 0.0
    latencies: array = field(default_factory=lambda: array("d"))

    def percentile(self, q: float) -> float:
        if not self.latencies:
            return 0.0
        return float(np.percentile(np.frombuffer(self.latencies, dtype=np.float64), q))

    @property
    def p50(self) -> float:
        return self.percentile(50)

    @property
    def p95(self) -> float:
        return self.percentile(95)

    @property
    def p99(self) -> float:
        return self.percentile(99)

    @property
    def mean_latency_us(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else 0.0

    @property
    def amplification(self) -> float:
        return self.bytes_transferred / self.bytes_requested if self.bytes_requested else 0.0

    @property
    def offered_iops(self) -> float:
        if self.first_submit_us is None or self.last_complete_us <= self.first_submit_us:
            return 0.0
        return self.reads / ((self.last_complete_us - self.first_submit_us) * 1e-6)


def transferred_bytes(offset: int, length: int, block_bytes: int, subblock: bool) -> int:
    """Bytes moved over the bus for one read."""
    if length <= 0:
        return 0
    end = offset + length
    if subblock:
        return (-(-end // DWORD) - offset // DWORD) * DWORD
    return (-(-end // block_bytes) - offset // block_bytes) * block_bytes


class SimDevice:
    """Simulated block device backed by an in-memory image."""

    def __init__(self, profile: DeviceProfile, capacity_bytes: int, seed: int = 0,
                 max_pending: Optional[int] = None):
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        self.profile = profile
        self.capacity_bytes = int(capacity_bytes)
        self.image = np.zeros(self.capacity_bytes, dtype=np.uint8)
        self.seed = seed
        self.max_pending = max_pending
        self.stats = DeviceStats()
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._channels = [(0.0, ch) for ch in range(profile.channels)]
        self._per_table_cap: Optional[int] = None
        self._tables_cap: Optional[int] = None
        self._total_cap = profile.max_outstanding
        self._inflight: List[float] = []
        self._table_inflight: Dict[int, List[float]] = {}

    # -- configuration ----------------------------------------------------
    def throttle_config(self, max_outstanding_per_table: Optional[int] = None,
                        max_tables_in_flight: Optional[int] = None,
                        max_outstanding_total: Optional[int] = None) -> None:
        for name, v in (("max_outstanding_per_table", max_outstanding_per_table),
                        ("max_tables_in_flight", max_tables_in_flight),
                        ("max_outstanding_total", max_outstanding_total)):
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        with self._lock:
            self._per_table_cap = max_outstanding_per_table
            self._tables_cap = max_tables_in_flight
            total = max_outstanding_total or self.profile.max_outstanding
            self._total_cap = min(total, self.profile.max_outstanding)

    @property
    def throttle(self):
        return (self._per_table_cap, self._tables_cap, self._total_cap)

    def reset_clock(self) -> None:
        with self._lock:
            self._channels = [(0.0, ch) for ch in range(self.profile.channels)]
            self._inflight = []
            self._table_inflight = {}

    # -- internals --------------------------------------------------------
    def _service_times(self, n: int, mean_us: float) -> np.ndarray:
        sigma = self.profile.sigma
        if sigma == 0:
            return np.full(n, mean_us)
        mu = math.log(mean_us) - 0.5 * sigma * sigma
        return self._rng.lognormal(mu, sigma, size=n)

    def _purge(self, now: float) -> None:
        inflight = self._inflight
        while inflight and inflight[0] <= now:
            heapq.heappop(inflight)
        for tid in list(self._table_inflight):
            h = self._table_inflight[tid]
            while h and h[0] <= now:
                heapq.heappop(h)
            if not h:
                del self._table_inflight[tid]

    def _admit_time(self, table_id: int, t: float) -> float:
        """Earliest time >= t at which a request for ``table_id`` may dispatch."""
        while True:
            self._purge(t)
            waits = []
            h = self._table_inflight.get(table_id)
            if self._per_table_cap is not None and h and len(h) >= self._per_table_cap:
                waits.append(h[0])
            if len(self._inflight) >= self._total_cap:
                waits.append(self._inflight[0])
            if (self._tables_cap is not None and not h
                    and len(self._table_inflight) >= self._tables_cap):
                waits.append(min(max(v) for v in self._table_inflight.values()))
            if not waits:
                return t
            t = max(waits)

    def _pending_at(self, t: float) -> int:
        return sum(1 for c in self._inflight if c > t)

    def _schedule(self, table_id: int, at_us: float, service: float, transfer: float):
        t = self._admit_time(table_id, at_us)
        free, ch = heapq.heappop(self._channels)
        start = free if free > t else t
        heapq.heappush(self._channels, (start + service, ch))
        done = start + service + transfer
        heapq.heappush(self._inflight, done)
        heapq.heappush(self._table_inflight.setdefault(table_id, []), done)
        return t, done, (start - t) + service + transfer

    # -- IO ---------------------------------------------------------------
    def submit_reads(self, requests: Sequence[IoRequest], at_us: float = 0.0) -> IoHandle:
        """Submit a batch of reads at virtual time ``at_us``.

        Requests beyond the throttle caps are deferred, never dropped. If
        ``max_pending`` is set and the batch would overflow it, the whole
        batch is refused with :class:`QueueFullError`.
        """
        requests = list(requests)
        prof = self.profile
        with self._lock:
            if self.max_pending is not None:
                self._purge(at_us)
                pending = len(self._inflight)
                if pending + len(requests) > self.max_pending:
                    self.stats.rejected_for_queue_full += len(requests)
                    raise QueueFullError(pending, self.max_pending, len(requests))
            st = self.stats
            if st.first_submit_us is None or at_us < st.first_submit_us:
                st.first_submit_us = at_us
            subs = [r.subblock and prof.supports_subblock for r in requests]
            base = prof.base_latency_us
            factor = prof.subblock_service_factor
            draws = self._service_times(len(requests), 1.0) if requests else ()
            out = []
            for req, sub, unit in zip(requests, subs, draws):
                off, ln = req.byte_offset, req.length
                if off < 0 or ln <= 0 or off + ln > self.capacity_bytes:
                    st.errors += 1
                    out.append(IoCompletion(req, b"", 0.0, 0, at_us, at_us, at_us,
                                            error=f"out of range: [{off}, {off + ln})"))
                    continue
                nbytes = transferred_bytes(off, ln, prof.block_bytes, sub)
                service = unit * base * (factor if sub else 1.0)
                dispatch, done, dev_lat = self._schedule(
                    req.table_id, at_us, service, nbytes / prof.link_bytes_per_us)
                deferred = dispatch > at_us
                st.reads += 1
                st.deferred += deferred
                st.bytes_requested += ln
                st.bytes_transferred += nbytes
                st.latencies.append(dev_lat)
                if done > st.last_complete_us:
                    st.last_complete_us = done
                out.append(IoCompletion(
                    req, self.image[off:off + ln].tobytes(), done - at_us, nbytes,
                    at_us, dispatch, done, deferred))
            return IoHandle(out, at_us)

    def read(self, offset: int, length: int, subblock: bool = False,
             table_id: int = -1, at_us: float = 0.0) -> IoCompletion:
        return self.submit_reads([IoRequest(table_id, offset, length, subblock)], at_us).wait()[0]

    def write_region(self, byte_offset: int, data, at_us: Optional[float] = None,
                     table_id: int = -1) -> Optional[IoHandle]:
        """Write bytes into the device image.

        Untimed writes (``at_us`` None) model offline bulk loading: only the
        image, write counters and endurance accounting change. Timed writes
        also occupy channels, one IO per block spanned.
        """
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        end = byte_offset + buf.size
        if byte_offset < 0 or end > self.capacity_bytes:
            raise DeviceError(
                f"write [{byte_offset}, {end}) outside device capacity {self.capacity_bytes}")
        with self._lock:
            self.image[byte_offset:end] = buf
            self.stats.writes += 1
            self.stats.bytes_written += int(buf.size)
            if at_us is None or buf.size == 0:
                return None
            bb = self.profile.block_bytes
            first, last = byte_offset // bb, -(-end // bb)
            draws = self._service_times(last - first, self.profile.write_service_us)
            out = []
            for i, service in enumerate(draws):
                blk = first + i
                dispatch, done, _ = self._schedule(table_id, at_us, float(service),
                                                   bb / self.profile.link_bytes_per_us)
                req = IoRequest(table_id, blk * bb, bb)
                out.append(IoCompletion(req, b"", done - at_us, bb, at_us, dispatch, done,
                                        dispatch > at_us))
            return IoHandle(out, at_us)

    def snapshot(self) -> bytes:
        return self.image.tobytes()


def endurance_report(model_size_gb: float, capacity_gb: float, pdwpd: float) -> float:
    """Model update interval implied by drive endurance.

    365 * model_size / (pdwpd * capacity), applied literally; the result is
    dimensionless.
    """
    if model_size_gb <= 0:
        raise ValueError("model_size_gb must be positive")
    if capacity_gb <= 0 or pdwpd <= 0:
        raise ValueError("capacity_gb and pdwpd must be positive")
    return 365.0 * model_size_gb / (pdwpd * capacity_gb)


@dataclass
class SweepPoint:
    offered_iops: float
    mean_us: float
    p50_us: float
    p99_us: float
    batch_mean_us: float
    batch_p99_us: float
    achieved_iops: float


def load_sweep(profile: DeviceProfile, offered: Iterable[float], n_batches: int = 2000,
               batch: int = 20, read_bytes: int = 128, subblock: bool = False,
               seed: int = 0) -> List[SweepPoint]:
    """Open-loop latency vs offered-IOPS sweep.

    Batches of ``batch`` reads arrive as a Poisson process. Every point
    reuses the same seed, so service times and normalized inter-arrival
    gaps are common across points and only the arrival rate changes.
    """
    rng = np.random.default_rng(seed + 1)
    gaps = rng.exponential(1.0, size=n_batches)
    n_rows = 4096
    offsets = rng.integers(0, n_rows, size=(n_batches, batch)) * read_bytes
    points = []
    for iops in offered:
        dev = SimDevice(profile, n_rows * read_bytes, seed=seed)
        t = 0.0
        mean_gap_us = batch / iops * 1e6
        batch_lat = np.empty(n_batches)
        lat = np.empty(n_batches * batch)
        for b in range(n_batches):
            t += gaps[b] * mean_gap_us
            reqs = [IoRequest(0, int(o), read_bytes, subblock) for o in offsets[b]]
            h = dev.submit_reads(reqs, t)
            batch_lat[b] = h.done_us - t
            lat[b * batch:(b + 1) * batch] = [c.latency_us for c in h.in_order()]
        points.append(SweepPoint(
            offered_iops=float(iops), mean_us=float(lat.mean()),
            p50_us=float(np.percentile(lat, 50)), p99_us=float(np.percentile(lat, 99)),
            batch_mean_us=float(batch_lat.mean()),
            batch_p99_us=float(np.percentile(batch_lat, 99)),
            achieved_iops=dev.stats.offered_iops))
    return points


class FileDevice:
    """File-backed device using unbuffered (O_DIRECT) block reads.

    Sub-block reads are emulated by reading whole blocks and discarding the
    rest; transfer accounting reports what a bit-bucket read would move.
    Latencies are wall-clock.
    """

    def __init__(self, path: str, block_bytes: int = 4096, create_bytes: Optional[int] = None):
        import time
        self._time = time
        self.path = path
        self.block_bytes = block_bytes
        self.stats = DeviceStats()
        if create_bytes is not None:
            with open(path, "wb") as f:
                f.truncate(-(-create_bytes // block_bytes) * block_bytes)
        self.capacity_bytes = os.path.getsize(path)
        flags = os.O_RDWR | getattr(os, "O_DIRECT", 0)
        if not hasattr(os, "O_DIRECT"):
            raise OSError("O_DIRECT is not available on this platform")
        self._fd = os.open(path, flags)
        self._lock = threading.Lock()

    def close(self) -> None:
        os.close(self._fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _aligned(self, offset: int, length: int):
        bb = self.block_bytes
        start = offset // bb * bb
        end = -(-(offset + length) // bb) * bb
        return start, end

    def read(self, offset: int, length: int, subblock: bool = False) -> IoCompletion:
        req = IoRequest(-1, offset, length, subblock)
        if offset < 0 or length <= 0 or offset + length > self.capacity_bytes:
            self.stats.errors += 1
            return IoCompletion(req, b"", 0.0, 0, error="out of range")
        start, end = self._aligned(offset, length)
        buf = mmap.mmap(-1, end - start)
        with self._lock:
            t0 = self._time.perf_counter()
            os.preadv(self._fd, [buf], start)
            lat = (self._time.perf_counter() - t0) * 1e6
            data = bytes(buf[offset - start:offset - start + length])
            nbytes = transferred_bytes(offset, length, self.block_bytes, subblock)
            self.stats.reads += 1
            self.stats.bytes_requested += length
            self.stats.bytes_transferred += nbytes
            self.stats.latencies.append(lat)
        buf.close()
        return IoCompletion(req, data, lat, nbytes)

    def write_region(self, byte_offset: int, data) -> None:
        data = bytes(data)
        start, end = self._aligned(byte_offset, len(data))
        if byte_offset < 0 or end > self.capacity_bytes:
            raise DeviceError("write outside device capacity")
        buf = mmap.mmap(-1, end - start)
        with self._lock:
            os.preadv(self._fd, [buf], start)
            buf[byte_offset - start:byte_offset - start + len(data)] = data
            os.pwritev(self._fd, [buf], start)
            self.stats.writes += 1
            self.stats.bytes_written += len(data)
        buf.close()
