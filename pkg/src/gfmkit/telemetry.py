"""Per-rank telemetry: phase markers, sampling, and energy integration.

Utilization has an instrumented definition rather than an OS-counter one:
every rank owns a :class:`PhaseClock` whose markers bracket the training
phases, and utilization over a sampling interval is the fraction of that
interval spent inside the busy phases (forward + backward). A linear model
turns utilization into watts; a trapezoidal rule turns (timestamp, watts)
samples into joules. Aggregation rolls per-rank samples of one job step into
a single report: energies add, peaks take maxima, utilization is
time-weighted.

Sample log CSV columns: ``step_id,rank,timestamp,utilization,power_w,
mem_bytes``.
"""

from __future__ import annotations

import csv
import logging
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import psutil

from .errors import ValidationError

log = logging.getLogger(__name__)

PHASES = ("dataload", "forward", "backward", "sync")
BUSY_PHASES = ("forward", "backward")

IDLE_POWER_W = 90.0
PEAK_POWER_W = 560.0
J_PER_KWH = 3.6e6


class PhaseClock:
    """Accumulates wall time per named phase; at most one phase open."""

    def __init__(self, phases=PHASES):
        self._lock = threading.Lock()
        self._totals = {p: 0.0 for p in phases}
        self._current: tuple[str, float] | None = None

    @contextmanager
    def phase(self, name: str):
        self.start(name)
        try:
            yield
        finally:
            self.stop()

    def start(self, name: str) -> None:
        with self._lock:
            if name not in self._totals:
                raise ValidationError(f"unknown phase {name!r}")
            if self._current is not None:
                raise ValidationError(
                    f"phase {self._current[0]!r} is still open"
                )
            self._current = (name, time.perf_counter())

    def stop(self) -> None:
        with self._lock:
            if self._current is None:
                raise ValidationError("no phase open")
            name, t0 = self._current
            self._totals[name] += time.perf_counter() - t0
            self._current = None

    def totals(self) -> dict[str, float]:
        """Per-phase seconds so far, including the open phase's partial."""
        with self._lock:
            out = dict(self._totals)
            if self._current is not None:
                name, t0 = self._current
                out[name] += time.perf_counter() - t0
            return out

    def busy_seconds(self) -> float:
        totals = self.totals()
        return sum(totals[p] for p in BUSY_PHASES if p in totals)


class PowerModel:
    """Watts as a linear function of utilization."""

    def __init__(self, idle_w: float = IDLE_POWER_W, peak_w: float = PEAK_POWER_W):
        self.idle_w = float(idle_w)
        self.peak_w = float(peak_w)
        self.clamp_count = 0

    def power(self, utilization: float) -> float:
        u = float(utilization)
        if u < 0.0 or u > 1.0:
            self.clamp_count += 1
            log.warning("utilization %.6g outside [0, 1], clamped", u)
            u = min(max(u, 0.0), 1.0)
        return self.idle_w + u * (self.peak_w - self.idle_w)


@dataclass
class TelemetrySample:
    step_id: str
    rank: int
    timestamp: float  # monotonic seconds
    utilization: float
    power_w: float
    mem_bytes: int


class Sampler:
    """Background sampling thread for one rank's job step.

    Samples at a fixed interval plus once at ``stop``; utilization per sample
    is the busy fraction of the window since the previous sample. Samples
    whose timestamp fails to advance are dropped and counted.
    """

    def __init__(
        self,
        step_id: str,
        rank: int,
        clock: PhaseClock,
        interval: float = 1.0,
        power_model: PowerModel | None = None,
    ):
        self.step_id = step_id
        self.rank = rank
        self.clock = clock
        self.interval = float(interval)
        self.power_model = power_model or PowerModel()
        self.samples: list[TelemetrySample] = []
        self.dropped = 0
        self._process = psutil.Process()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._last_t = 0.0
        self._last_busy = 0.0

    def start(self) -> "Sampler":
        self._last_t = time.monotonic()
        self._last_busy = self.clock.busy_seconds()
        self._thread = threading.Thread(
            target=self._run, name=f"sampler-{self.rank}", daemon=True
        )
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self._take_sample()

    def _take_sample(self) -> None:
        now = time.monotonic()
        if self.samples and now <= self.samples[-1].timestamp:
            self.dropped += 1
            return
        busy = self.clock.busy_seconds()
        window = now - self._last_t
        u = 0.0 if window <= 0 else (busy - self._last_busy) / window
        u = min(max(u, 0.0), 1.0)
        self.samples.append(
            TelemetrySample(
                step_id=self.step_id,
                rank=self.rank,
                timestamp=now,
                utilization=u,
                power_w=self.power_model.power(u),
                mem_bytes=int(self._process.memory_info().rss),
            )
        )
        self._last_t = now
        self._last_busy = busy

    def stop(self) -> list[TelemetrySample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._take_sample()  # closing boundary sample
        return self.samples


# --------------------------------------------------------------------------
# Energy integration and aggregation
# --------------------------------------------------------------------------


def integrate_energy_j(samples: list[TelemetrySample]) -> float:
    """Trapezoidal integral of power over time, in joules."""
    if len(samples) < 2:
        log.warning("energy integration needs >= 2 samples, got %d", len(samples))
        return 0.0
    t = np.array([s.timestamp for s in samples], dtype=np.float64)
    p = np.array([s.power_w for s in samples], dtype=np.float64)
    dt = np.diff(t)
    if np.any(dt < 0):
        raise ValidationError("sample timestamps must be nondecreasing")
    return float(np.sum(0.5 * (p[1:] + p[:-1]) * dt))


def integrate_energy_kwh(samples: list[TelemetrySample]) -> float:
    return integrate_energy_j(samples) / J_PER_KWH


@dataclass
class EnergyReport:
    step_id: str
    duration_s: float
    mean_utilization: float
    energy_kwh: float
    peak_power_w: float
    peak_mem_bytes: int
    rank_count: int
    sample_count: int

    @property
    def energy_j(self) -> float:
        return self.energy_kwh * J_PER_KWH

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "duration_s": self.duration_s,
            "mean_utilization": self.mean_utilization,
            "energy_kwh": self.energy_kwh,
            "peak_power_w": self.peak_power_w,
            "peak_mem_bytes": self.peak_mem_bytes,
            "rank_count": self.rank_count,
            "sample_count": self.sample_count,
        }


def aggregate(samples: list[TelemetrySample]) -> EnergyReport:
    """Roll one job step's samples (all ranks) into a single report."""
    if not samples:
        raise ValidationError("cannot aggregate zero samples")
    step_ids = {s.step_id for s in samples}
    if len(step_ids) != 1:
        raise ValidationError(f"mixed step ids in aggregation: {sorted(step_ids)}")
    by_rank: dict[int, list[TelemetrySample]] = {}
    for s in samples:
        by_rank.setdefault(s.rank, []).append(s)

    energy_j = 0.0
    util_seconds = 0.0
    total_seconds = 0.0
    duration = 0.0
    for rows in by_rank.values():
        rows.sort(key=lambda s: s.timestamp)
        energy_j += integrate_energy_j(rows)
        span = rows[-1].timestamp - rows[0].timestamp
        duration = max(duration, span)
        total_seconds += span
        if len(rows) >= 2:
            t = np.array([s.timestamp for s in rows])
            u = np.array([s.utilization for s in rows])
            util_seconds += float(np.sum(0.5 * (u[1:] + u[:-1]) * np.diff(t)))
    if total_seconds > 0:
        mean_util = util_seconds / total_seconds
    else:
        mean_util = float(np.mean([s.utilization for s in samples]))
    return EnergyReport(
        step_id=samples[0].step_id,
        duration_s=duration,
        mean_utilization=mean_util,
        energy_kwh=energy_j / J_PER_KWH,
        peak_power_w=max(s.power_w for s in samples),
        peak_mem_bytes=max(s.mem_bytes for s in samples),
        rank_count=len(by_rank),
        sample_count=len(samples),
    )


# --------------------------------------------------------------------------
# Sample log CSV
# --------------------------------------------------------------------------

CSV_FIELDS = ("step_id", "rank", "timestamp", "utilization", "power_w", "mem_bytes")


def write_samples_csv(path: str, samples: list[TelemetrySample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for s in samples:
            writer.writerow(
                [s.step_id, s.rank, repr(s.timestamp), repr(s.utilization),
                 repr(s.power_w), s.mem_bytes]
            )


def append_samples_csv(path: str, samples: list[TelemetrySample]) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_FIELDS)
        for s in samples:
            writer.writerow(
                [s.step_id, s.rank, repr(s.timestamp), repr(s.utilization),
                 repr(s.power_w), s.mem_bytes]
            )


def read_samples_csv(path: str) -> list[TelemetrySample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValidationError(f"unexpected telemetry CSV header in {path!r}")
        for row in reader:
            out.append(
                TelemetrySample(
                    step_id=row["step_id"],
                    rank=int(row["rank"]),
                    timestamp=float(row["timestamp"]),
                    utilization=float(row["utilization"]),
                    power_w=float(row["power_w"]),
                    mem_bytes=int(row["mem_bytes"]),
                )
            )
    return out
