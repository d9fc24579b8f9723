"""Weak/strong scaling benchmark driver.

Runs one warmed-up, timed training epoch per rank count with the per-phase
clock (dataload, forward, backward, sync), then reports per-rank epoch
times, the load-imbalance factor (max over ranks divided by mean), and
per-phase wait fractions (mean over ranks of how much of the slowest rank's
phase time each rank spent waiting).

Ranks run as threads (in-process channels) or OS processes (sockets with a
rendezvous file) — chosen by ``transport``. Asking for more ranks than the
host has CPUs is refused unless ``oversubscribe=True``; an oversubscribed
run still measures honestly, it just cannot show real speedup.

Strong scaling keeps the total sample count fixed while raising the rank
count; weak scaling fixes the per-rank sample count (default 3,500) and
generates a fresh dataset per rank count.
"""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comm import Comm, create_thread_comms, socket_comm
from .container import write_container
from .ddstore import ChannelFabric, DDStore, SocketFabric, epoch_schedule
from .errors import ConfigError, TransportError, ValidationError
from .model import (
    ModelConfig,
    ModelParams,
    forward_batch,
    init_params,
    loss_and_grad,
    make_batch,
)
from .preprocess import generate_synthetic
from .telemetry import PHASES, PhaseClock
from .train import OptimizerState, TrainConfig, apply_update

log = logging.getLogger(__name__)

TRANSPORTS = ("thread", "process")
DEFAULT_SAMPLES_PER_RANK = 3500


def compute_lif(per_rank_times) -> float:
    """Load-imbalance factor: max over ranks / mean over ranks (>= 1)."""
    times = np.asarray(per_rank_times, dtype=np.float64)
    if times.size == 0:
        raise ValidationError("LIF needs at least one rank time")
    if np.any(times <= 0):
        raise ValidationError("LIF requires strictly positive rank times")
    return float(times.max() / times.mean())


def wait_fraction(per_rank_times) -> float:
    """Mean over ranks of (slowest - own) / slowest; 0 when balanced."""
    times = np.asarray(per_rank_times, dtype=np.float64)
    if times.size == 0:
        return 0.0
    peak = float(times.max())
    if peak <= 0:
        return 0.0
    return float(np.mean((peak - times) / peak))


@dataclass
class RankTiming:
    rank: int
    epoch_time_s: float
    phase_seconds: dict

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "epoch_time_s": self.epoch_time_s,
            "phase_seconds": dict(self.phase_seconds),
        }


@dataclass
class ScalingPoint:
    rank_count: int
    sample_count: int
    mean_epoch_time_s: float
    lif: dict  # "epoch" plus one entry per phase (None if a time was 0)
    wait_fractions: dict
    rank_timings: list

    def to_dict(self) -> dict:
        return {
            "rank_count": self.rank_count,
            "sample_count": self.sample_count,
            "mean_epoch_time_s": self.mean_epoch_time_s,
            "lif": dict(self.lif),
            "wait_fractions": dict(self.wait_fractions),
            "rank_timings": [t.to_dict() for t in self.rank_timings],
        }


@dataclass
class ScalingReport:
    mode: str  # strong | weak
    transport: str
    rank_counts: list
    model: dict
    points: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "transport": self.transport,
            "rank_counts": list(self.rank_counts),
            "model": dict(self.model),
            "points": [p.to_dict() for p in self.points],
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str) -> None:
        """Companion per-rank phase-time table for plotting."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank_count", "rank", "epoch_time_s", *PHASES])
            for point in self.points:
                for t in point.rank_timings:
                    writer.writerow(
                        [point.rank_count, t.rank, repr(t.epoch_time_s)]
                        + [repr(t.phase_seconds.get(p, 0.0)) for p in PHASES]
                    )


# --------------------------------------------------------------------------
# The measured epoch
# --------------------------------------------------------------------------


def timed_epochs(
    rank: int,
    size: int,
    store: DDStore,
    comm: Comm,
    model_config: ModelConfig,
    seed: int = 0,
    warmup_epochs: int = 1,
) -> RankTiming:
    """One rank's benchmark body: warm-up epochs, then one timed epoch."""
    params = init_params(model_config, seed=seed)
    flat = params.flatten()
    n = flat.shape[0]
    state = OptimizerState.zeros(n)
    opt = TrainConfig(optimizer="adam", learning_rate=1e-4)
    clock = PhaseClock()
    n_train = store.ownership["trainset"].n_samples

    epoch_time = 0.0
    phase_diff: dict = {}
    for epoch in range(1, warmup_epochs + 2):
        before = clock.totals()
        t0 = time.perf_counter()
        sched = epoch_schedule(n_train, size, model_config.batch_size, seed, epoch)
        mine = sched.for_rank(rank)
        for step in range(sched.max_batches()):
            if step < len(mine) and len(mine[step]):
                with clock.phase("dataload"):
                    records = store.fetch_batch("trainset", mine[step])
                    batch = make_batch(records)
                with clock.phase("forward"):
                    cache: dict = {}
                    e_pred, f_pred = forward_batch(params, batch, cache)
                with clock.phase("backward"):
                    _, grad = loss_and_grad(params, batch, (cache, e_pred, f_pred))
                contribution = grad
            else:
                contribution = np.zeros(n)
            with clock.phase("sync"):
                mean_grad = comm.allreduce_sum(contribution) / size
            with clock.phase("backward"):
                flat = apply_update(flat, mean_grad, opt, state)
                params = ModelParams.from_flat(model_config, flat)
        epoch_time = time.perf_counter() - t0
        after = clock.totals()
        phase_diff = {k: after[k] - before.get(k, 0.0) for k in after}
    return RankTiming(rank=rank, epoch_time_s=epoch_time, phase_seconds=phase_diff)


def _thread_ranks(
    size: int, container_path: str, model_config: ModelConfig, seed: int,
    warmup_epochs: int,
) -> list[RankTiming]:
    fabric = ChannelFabric(size)
    stores = [DDStore(r, size, fabric=fabric) for r in range(size)]
    for store in stores:
        store.load(container_path, "trainset")
    comms = create_thread_comms(size)
    try:
        with ThreadPoolExecutor(max_workers=size) as pool:
            return list(
                pool.map(
                    lambda r: timed_epochs(
                        r, size, stores[r], comms[r], model_config, seed,
                        warmup_epochs,
                    ),
                    range(size),
                )
            )
    finally:
        for store in stores:
            store.close()
        for comm in comms:
            comm.close()


def _process_rank_main(
    rank: int,
    size: int,
    container_path: str,
    model_doc: dict,
    seed: int,
    warmup_epochs: int,
    rendezvous_base: str,
    out_path: str,
) -> None:
    """Entry point of one benchmark rank when ranks are OS processes."""
    model_config = ModelConfig.from_dict(model_doc)
    fabric = SocketFabric(rank, size, rendezvous_base + ".store")
    store = DDStore(rank, size, fabric=fabric, fetch_timeout=60.0)
    store.load(container_path, "trainset")
    comm = socket_comm(rank, size, rendezvous_base + ".comm", timeout=120.0)
    try:
        timing = timed_epochs(
            rank, size, store, comm, model_config, seed, warmup_epochs
        )
        with open(out_path, "w") as fh:
            json.dump(timing.to_dict(), fh)
    finally:
        comm.close()
        store.close()


def _process_ranks(
    size: int, container_path: str, model_config: ModelConfig, seed: int,
    warmup_epochs: int, scratch_dir: str,
) -> list[RankTiming]:
    ctx = multiprocessing.get_context("spawn")
    rendezvous_base = os.path.join(scratch_dir, f"rendezvous_{size}")
    out_paths = [
        os.path.join(scratch_dir, f"timing_{size}_{r}.json") for r in range(size)
    ]
    procs = [
        ctx.Process(
            target=_process_rank_main,
            args=(
                r, size, container_path, model_config.to_dict(), seed,
                warmup_epochs, rendezvous_base, out_paths[r],
            ),
        )
        for r in range(size)
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join(timeout=600)
    if any(p.exitcode != 0 for p in procs):
        codes = [p.exitcode for p in procs]
        raise TransportError(f"benchmark ranks exited with {codes}")
    timings = []
    for path in out_paths:
        with open(path) as fh:
            doc = json.load(fh)
        timings.append(
            RankTiming(
                rank=doc["rank"],
                epoch_time_s=doc["epoch_time_s"],
                phase_seconds=doc["phase_seconds"],
            )
        )
    return timings


def run_ranks(
    size: int,
    container_path: str,
    model_config: ModelConfig,
    transport: str = "thread",
    seed: int = 0,
    warmup_epochs: int = 1,
    scratch_dir: str | None = None,
) -> list[RankTiming]:
    if transport not in TRANSPORTS:
        raise ConfigError(f"transport must be one of {TRANSPORTS}, got {transport!r}")
    if transport == "thread":
        return _thread_ranks(size, container_path, model_config, seed, warmup_epochs)
    if scratch_dir is None:
        raise ConfigError("process transport needs a scratch_dir")
    return _process_ranks(
        size, container_path, model_config, seed, warmup_epochs, scratch_dir
    )


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------


def _check_rank_counts(rank_counts, oversubscribe: bool) -> None:
    if not rank_counts:
        raise ConfigError("need at least one rank count")
    if any(int(p) < 1 for p in rank_counts):
        raise ConfigError(f"rank counts must be >= 1, got {rank_counts}")
    cpus = os.cpu_count() or 1
    peak = max(int(p) for p in rank_counts)
    if peak > cpus and not oversubscribe:
        raise ConfigError(
            f"{peak} ranks exceed the {cpus} available CPUs; "
            "pass oversubscribe=True to run anyway"
        )


def _point(size: int, sample_count: int, timings: list[RankTiming]) -> ScalingPoint:
    epoch_times = [t.epoch_time_s for t in timings]
    lif = {"epoch": compute_lif(epoch_times)}
    waits = {}
    for phase in PHASES:
        times = [t.phase_seconds.get(phase, 0.0) for t in timings]
        lif[phase] = compute_lif(times) if all(x > 0 for x in times) else None
        waits[phase] = wait_fraction(times)
    return ScalingPoint(
        rank_count=size,
        sample_count=sample_count,
        mean_epoch_time_s=float(np.mean(epoch_times)),
        lif=lif,
        wait_fractions=waits,
        rank_timings=timings,
    )


def run_strong_scaling(
    container_path: str,
    rank_counts,
    model_config: ModelConfig,
    transport: str = "thread",
    seed: int = 0,
    warmup_epochs: int = 1,
    oversubscribe: bool = False,
    scratch_dir: str | None = None,
) -> ScalingReport:
    """Same container (fixed total N) timed at each rank count."""
    _check_rank_counts(rank_counts, oversubscribe)
    from . import container as container_io

    n_total = container_io.read_manifest(container_path).group("trainset").record_count
    report = ScalingReport(
        mode="strong",
        transport=transport,
        rank_counts=[int(p) for p in rank_counts],
        model=model_config.to_dict(),
    )
    for size in report.rank_counts:
        timings = run_ranks(
            size, container_path, model_config, transport, seed, warmup_epochs,
            scratch_dir,
        )
        report.points.append(_point(size, n_total, timings))
        log.info(
            "strong scaling %d ranks: mean epoch %.4fs lif=%.3f",
            size,
            report.points[-1].mean_epoch_time_s,
            report.points[-1].lif["epoch"],
        )
    return report


def run_weak_scaling(
    rank_counts,
    model_config: ModelConfig,
    samples_per_rank: int = DEFAULT_SAMPLES_PER_RANK,
    transport: str = "thread",
    seed: int = 0,
    warmup_epochs: int = 1,
    oversubscribe: bool = False,
    scratch_dir: str | None = None,
    generator_kwargs: dict | None = None,
) -> ScalingReport:
    """Fixed per-rank sample count; a fresh dataset is generated per point."""
    _check_rank_counts(rank_counts, oversubscribe)
    if samples_per_rank < 1:
        raise ConfigError(f"samples_per_rank must be >= 1, got {samples_per_rank}")
    if scratch_dir is None:
        raise ConfigError("weak scaling needs a scratch_dir for generated data")
    generator_kwargs = dict(generator_kwargs or {})
    generator_kwargs.setdefault("seed", seed)
    report = ScalingReport(
        mode="weak",
        transport=transport,
        rank_counts=[int(p) for p in rank_counts],
        model=model_config.to_dict(),
    )
    placeholder = generate_synthetic(1, **generator_kwargs)
    for size in report.rank_counts:
        n_total = samples_per_rank * size
        records = generate_synthetic(n_total, **generator_kwargs)
        path = os.path.join(scratch_dir, f"weak_{size}.container")
        write_container(
            {"trainset": records, "valset": placeholder, "testset": placeholder},
            subfile_count=max(1, min(8, size)),
            path=path,
        )
        timings = run_ranks(
            size, path, model_config, transport, seed, warmup_epochs, scratch_dir
        )
        report.points.append(_point(size, n_total, timings))
        log.info(
            "weak scaling %d ranks (%d samples): mean epoch %.4fs",
            size,
            n_total,
            report.points[-1].mean_epoch_time_s,
        )
    return report
