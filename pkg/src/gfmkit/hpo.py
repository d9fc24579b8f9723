"""Asynchronous manager-worker hyperparameter search.

The manager is a single-threaded event loop: it hands a configuration to
every idle worker immediately, and each completion event appends to the
history (and the JSONL history file) and triggers the next suggestion for
that worker — there is no generation barrier, and no new trial starts after
the wall-clock budget expires. Workers are threads running an arbitrary
trial function, or OS processes that train for a constant fidelity and talk
to the manager over framed sockets (magic ``GFHP``, JSON bodies).

Suggestions come from expected improvement over a random candidate pool,
scored by a distance-weighted k-nearest-neighbor surrogate on encoded
configs (categoricals one-hot, integers min-max scaled). Until the history
reaches the warm-up size the manager samples uniformly at random. Failed
trials stay in the history with a penalty value (10x the worst finite
result) so the surrogate steers away from them.
"""

from __future__ import annotations

import json
import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .comm import LocalComm
from .ddstore import DDStore
from .errors import ConfigError, TransportError, ValidationError
from .model import MPNN_KINDS, ModelConfig
from .telemetry import PhaseClock, Sampler, aggregate
from .train import TrainConfig, evaluate, train
from .transport import (
    HPO_MAGIC,
    SocketEndpoint,
    announce,
    connect,
    listen,
    recv_blob,
    send_blob,
    wait_for_ranks,
)

log = logging.getLogger(__name__)

DEFAULT_WARMUP = 8
DEFAULT_CANDIDATES = 256
DEFAULT_FIDELITY = 10
KNN_K = 5
FAILURE_PENALTY_FACTOR = 10.0

TRIAL_STATUSES = ("completed", "failed-nan", "failed-crash", "timeout")


# --------------------------------------------------------------------------
# Search space
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntDimension:
    """One integer hyperparameter: a [lo, hi] range or explicit values."""

    name: str
    lo: int
    hi: int
    log_scale: bool = False
    values: tuple | None = None

    def __post_init__(self):
        if self.values is not None:
            values = tuple(sorted(int(v) for v in self.values))
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "lo", values[0])
            object.__setattr__(self, "hi", values[-1])
        if self.lo > self.hi:
            raise ConfigError(f"{self.name}: lo {self.lo} > hi {self.hi}")
        if self.log_scale and self.lo < 1:
            raise ConfigError(f"{self.name}: log scale needs lo >= 1")

    def admissible(self, value) -> bool:
        v = int(value)
        if self.values is not None:
            return v in self.values
        return self.lo <= v <= self.hi

    def sample(self, rng: np.random.Generator) -> int:
        if self.values is not None:
            return int(self.values[rng.integers(len(self.values))])
        if self.log_scale:
            v = int(round(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi)))))
            return min(max(v, self.lo), self.hi)
        return int(rng.integers(self.lo, self.hi + 1))

    def scale(self, value) -> float:
        if self.hi == self.lo:
            return 0.0
        return (float(value) - self.lo) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        if self.values is not None:
            return {"values": list(self.values), "log_scale": self.log_scale}
        return {"lo": self.lo, "hi": self.hi, "log_scale": self.log_scale}


@dataclass(frozen=True)
class SearchSpace:
    """The six architectural dimensions a trial configuration ranges over."""

    kinds: tuple = MPNN_KINDS
    layers: IntDimension = IntDimension("mpnn_layers", 1, 6)
    width: IntDimension = IntDimension("mpnn_width", 100, 2000, log_scale=True)
    fc_layers: IntDimension = IntDimension("fc_layers", 2, 3)
    fc_width: IntDimension = IntDimension("fc_width", 300, 1000, log_scale=True)
    batch: IntDimension = IntDimension("batch_size", 16, 128)

    def int_dims(self) -> tuple:
        return (self.layers, self.width, self.fc_layers, self.fc_width, self.batch)

    @property
    def encoded_size(self) -> int:
        return len(self.kinds) + len(self.int_dims())

    def sample(self, rng: np.random.Generator) -> ModelConfig:
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        values = {d.name: d.sample(rng) for d in self.int_dims()}
        return ModelConfig(mpnn_kind=kind, **values)

    def contains(self, config) -> bool:
        doc = config.to_dict() if isinstance(config, ModelConfig) else dict(config)
        if doc.get("mpnn_kind") not in self.kinds:
            return False
        return all(d.admissible(doc[d.name]) for d in self.int_dims())

    def encode(self, config) -> np.ndarray:
        """One-hot categorical + min-max scaled integers, fixed width."""
        doc = config.to_dict() if isinstance(config, ModelConfig) else dict(config)
        vec = np.zeros(self.encoded_size)
        vec[self.kinds.index(doc["mpnn_kind"])] = 1.0
        for i, dim in enumerate(self.int_dims()):
            vec[len(self.kinds) + i] = dim.scale(doc[dim.name])
        return vec

    def enumerate_configs(self):
        """Every admissible config; only sensible for discretized spaces."""
        import itertools

        pools = [list(self.kinds)] + [
            list(d.values) if d.values is not None else list(range(d.lo, d.hi + 1))
            for d in self.int_dims()
        ]
        names = [d.name for d in self.int_dims()]
        for combo in itertools.product(*pools):
            yield ModelConfig(
                mpnn_kind=combo[0], **dict(zip(names, combo[1:]))
            )

    def to_dict(self) -> dict:
        return {
            "mpnn_kind": list(self.kinds),
            **{d.name: d.to_dict() for d in self.int_dims()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        defaults = cls()
        known = {d.name: d for d in defaults.int_dims()}
        kinds = tuple(doc.get("mpnn_kind", defaults.kinds))
        if not kinds or any(k not in MPNN_KINDS for k in kinds):
            raise ConfigError(f"mpnn_kind values must be among {MPNN_KINDS}")
        dims = {}
        for name, default in known.items():
            spec = doc.get(name)
            if spec is None:
                dims[name] = default
                continue
            if isinstance(spec, (list, tuple)):
                spec = {"values": list(spec)}
            if "values" in spec:
                dims[name] = IntDimension(
                    name, 0, 0, spec.get("log_scale", False), tuple(spec["values"])
                )
            else:
                dims[name] = IntDimension(
                    name,
                    int(spec.get("lo", default.lo)),
                    int(spec.get("hi", default.hi)),
                    spec.get("log_scale", default.log_scale),
                )
        unknown = set(doc) - set(known) - {"mpnn_kind"}
        if unknown:
            raise ConfigError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(
            kinds=kinds,
            layers=dims["mpnn_layers"],
            width=dims["mpnn_width"],
            fc_layers=dims["fc_layers"],
            fc_width=dims["fc_width"],
            batch=dims["batch_size"],
        )


def sample_random(space: SearchSpace, seed: int) -> ModelConfig:
    return space.sample(np.random.default_rng(seed))


# --------------------------------------------------------------------------
# Surrogate and acquisition
# --------------------------------------------------------------------------


class SurrogateState:
    """Append-only history of (encoded config, observed MAE)."""

    def __init__(self, space: SearchSpace):
        self.space = space
        self._rows: list[np.ndarray] = []
        self._maes: list[float] = []

    def add(self, config, mae: float) -> None:
        self._rows.append(self.space.encode(config))
        self._maes.append(float(mae))

    def __len__(self) -> int:
        return len(self._rows)

    def data(self) -> tuple[np.ndarray, np.ndarray]:
        """Encoded rows and MAEs, failures replaced by the penalty value."""
        X = np.stack(self._rows) if self._rows else np.zeros((0, 0))
        y = np.array(self._maes, dtype=np.float64)
        finite = y[np.isfinite(y)]
        if finite.size:
            y = np.where(np.isfinite(y), y, FAILURE_PENALTY_FACTOR * finite.max())
        return X, y


def knn_predict(
    X: np.ndarray, y: np.ndarray, query: np.ndarray, k: int = KNN_K
) -> tuple[float, float]:
    """Inverse-distance weighted kNN mean and residual-spread uncertainty."""
    d = np.linalg.norm(X - query, axis=1)
    order = np.argsort(d, kind="stable")[: min(k, d.shape[0])]
    w = 1.0 / (d[order] + 1e-9)
    w = w / w.sum()
    mu = float(w @ y[order])
    s = float(np.sqrt(w @ (y[order] - mu) ** 2)) + 1e-6
    return mu, s


def expected_improvement(best: float, mu: float, s: float) -> float:
    """EI for minimization under a normal posterior (mu, s)."""
    z = (best - mu) / s
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return (best - mu) * cdf + s * pdf


def suggest(
    surrogate: SurrogateState,
    space: SearchSpace | None = None,
    n_candidates: int = DEFAULT_CANDIDATES,
    seed: int = 0,
    warmup: int = DEFAULT_WARMUP,
    k: int = KNN_K,
) -> ModelConfig:
    """Next config to try: random until warm-up, then candidate-pool EI."""
    space = space or surrogate.space
    rng = np.random.default_rng(seed)
    if len(surrogate) < warmup:
        return space.sample(rng)
    X, y = surrogate.data()
    if not np.all(np.isfinite(y)):  # nothing finite ever observed
        return space.sample(rng)
    best = float(y.min())
    best_config = None
    best_ei = -math.inf
    for _ in range(n_candidates):
        candidate = space.sample(rng)
        mu, s = knn_predict(X, y, space.encode(candidate), k)
        ei = expected_improvement(best, mu, s)
        if ei > best_ei:
            best_ei = ei
            best_config = candidate
    return best_config


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    mae: float  # +inf for failed trials
    fidelity_epochs: int
    wall_time_s: float
    energy_kwh: float
    status: str
    completed_at: float = 0.0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.status not in TRIAL_STATUSES:
            raise ValidationError(f"unknown trial status {self.status!r}")

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "config": dict(self.config),
            "mae": self.mae if math.isfinite(self.mae) else None,
            "fidelity_epochs": self.fidelity_epochs,
            "wall_time_s": self.wall_time_s,
            "energy_kwh": self.energy_kwh,
            "status": self.status,
            "completed_at": self.completed_at,
            "checkpoint_path": self.checkpoint_path,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrialRecord":
        mae = doc.get("mae")
        return cls(
            trial_id=int(doc["trial_id"]),
            config=dict(doc["config"]),
            mae=float(mae) if mae is not None else math.inf,
            fidelity_epochs=int(doc["fidelity_epochs"]),
            wall_time_s=float(doc["wall_time_s"]),
            energy_kwh=float(doc["energy_kwh"]),
            status=doc["status"],
            completed_at=float(doc.get("completed_at", 0.0)),
            checkpoint_path=doc.get("checkpoint_path"),
        )


def append_history(path: str, record: TrialRecord) -> None:
    """Append one JSON line (crash-safe: whole-line writes, flushed)."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_history(path: str) -> list[TrialRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TrialRecord.from_dict(json.loads(line)))
    return out


def run_trial(
    trial_id: int,
    config: ModelConfig,
    container_path: str,
    fidelity_epochs: int = DEFAULT_FIDELITY,
    base_seed: int = 0,
    sample_interval: float = 0.05,
    checkpoint_dir: str | None = None,
) -> TrialRecord:
    """Train one candidate for exactly ``fidelity_epochs`` epochs.

    Validation MAE is read after the last epoch; wall time and integrated
    energy come from a sampler bracketing exactly this trial. A non-finite
    loss marks the trial failed-nan with MAE +inf for ranking.
    """
    store = DDStore(0, 1)
    store.load(container_path, "trainset")
    store.load(container_path, "valset")
    clock = PhaseClock()
    step_id = f"trial-{trial_id}"
    sampler = Sampler(step_id, rank=0, clock=clock, interval=sample_interval).start()
    t0 = time.monotonic()
    checkpoint_path = (
        os.path.join(checkpoint_dir, f"trial_{trial_id}.ckpt")
        if checkpoint_dir
        else None
    )
    result = train(
        config,
        store,
        LocalComm(),
        TrainConfig(
            max_epochs=fidelity_epochs,
            patience=fidelity_epochs + 1,  # constant fidelity: no early stop
            base_seed=base_seed,
            learning_rate=config.learning_rate,
            checkpoint_path=checkpoint_path,
        ),
        clock=clock,
    )
    wall = time.monotonic() - t0
    samples = sampler.stop()
    energy_kwh = aggregate(samples).energy_kwh if len(samples) >= 2 else 0.0

    if result.nan_event:
        mae = math.inf
        status = "failed-nan"
    elif result.metrics:
        mae = result.metrics[-1].val_mae
        status = "completed"
    else:  # fidelity 0: score the untrained model
        e_mae, f_mae = evaluate(result.params, store, LocalComm())
        mae = e_mae + f_mae
        status = "completed"
    return TrialRecord(
        trial_id=trial_id,
        config=config.to_dict(),
        mae=mae,
        fidelity_epochs=result.epochs_run,
        wall_time_s=wall,
        energy_kwh=energy_kwh,
        status=status,
        checkpoint_path=checkpoint_path,
    )


# --------------------------------------------------------------------------
# Worker pools
# --------------------------------------------------------------------------


class ThreadWorkerPool:
    """Workers as threads running ``trial_runner(trial_id, config)``."""

    def __init__(self, trial_runner, n_workers: int):
        if n_workers < 1:
            raise ConfigError(f"need >= 1 worker, got {n_workers}")
        self.n_workers = n_workers
        self._runner = trial_runner
        self._inboxes: list[queue.Queue] = [queue.Queue() for _ in range(n_workers)]
        self._done: queue.Queue = queue.Queue()
        self._threads = [
            threading.Thread(target=self._loop, args=(w,), daemon=True)
            for w in range(n_workers)
        ]
        for t in self._threads:
            t.start()

    def _loop(self, worker_id: int) -> None:
        while True:
            msg = self._inboxes[worker_id].get()
            if msg is None:
                return
            trial_id, config = msg
            t0 = time.monotonic()
            try:
                record = self._runner(trial_id, config)
            except Exception:
                log.exception("worker %d: trial %d crashed", worker_id, trial_id)
                record = TrialRecord(
                    trial_id=trial_id,
                    config=config.to_dict(),
                    mae=math.inf,
                    fidelity_epochs=0,
                    wall_time_s=time.monotonic() - t0,
                    energy_kwh=0.0,
                    status="failed-crash",
                )
            self._done.put((worker_id, record))

    def send(self, worker_id: int, trial_id: int, config: ModelConfig) -> None:
        self._inboxes[worker_id].put((trial_id, config))

    def next_completion(self, timeout: float | None = None):
        try:
            return self._done.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for a trial completion")

    def close(self) -> None:
        for inbox in self._inboxes:
            inbox.put(None)
        for t in self._threads:
            t.join(timeout=10)


def _process_worker_main(worker_id: int, rendezvous_path: str, task: dict) -> None:
    """Entry point of one HPO worker process."""
    table = wait_for_ranks(rendezvous_path, [0], timeout=60.0)
    host, port = table[0]
    ep = connect(host, port, timeout=60.0)
    send_blob(ep, HPO_MAGIC, json.dumps({"type": "hello", "worker": worker_id}).encode())
    crash_trials = set(task.get("crash_trials", ()))
    run_kwargs = {k: v for k, v in task.items() if k != "crash_trials"}
    while True:
        _, body = recv_blob(ep, HPO_MAGIC)
        msg = json.loads(body)
        if msg["type"] == "stop":
            ep.close()
            return
        trial_id = int(msg["trial_id"])
        if trial_id in crash_trials:  # fault-injection hook for tests
            os._exit(17)
        try:
            record = run_trial(
                trial_id, ModelConfig.from_dict(msg["config"]), **run_kwargs
            )
        except Exception:
            log.exception("worker %d: trial %d failed", worker_id, trial_id)
            record = TrialRecord(
                trial_id=trial_id,
                config=msg["config"],
                mae=math.inf,
                fidelity_epochs=0,
                wall_time_s=0.0,
                energy_kwh=0.0,
                status="failed-crash",
            )
        send_blob(
            ep,
            HPO_MAGIC,
            json.dumps({"type": "result", **record.to_dict()}).encode(),
        )


class ProcessWorkerPool:
    """Workers as OS processes training real trials over framed sockets.

    ``task`` carries the ``run_trial`` keyword arguments (container path,
    fidelity, seeds). A worker that dies mid-trial yields a failed-crash
    record for its outstanding trial and is dropped from the pool.
    """

    def __init__(self, task: dict, n_workers: int, scratch_dir: str,
                 timeout: float = 600.0):
        import multiprocessing

        if n_workers < 1:
            raise ConfigError(f"need >= 1 worker, got {n_workers}")
        self.n_workers = n_workers
        self.timeout = timeout
        rendezvous = os.path.join(scratch_dir, "hpo_rendezvous")
        sock, port = listen()
        announce(rendezvous, 0, "127.0.0.1", port)
        ctx = multiprocessing.get_context("spawn")
        self._procs = [
            ctx.Process(
                target=_process_worker_main, args=(w, rendezvous, task), daemon=True
            )
            for w in range(n_workers)
        ]
        for p in self._procs:
            p.start()
        self._endpoints: dict[int, SocketEndpoint] = {}
        deadline = time.monotonic() + timeout
        sock.settimeout(timeout)
        while len(self._endpoints) < n_workers:
            conn, _ = sock.accept()
            ep = SocketEndpoint(conn)
            _, body = recv_blob(ep, HPO_MAGIC, deadline)
            hello = json.loads(body)
            self._endpoints[int(hello["worker"])] = ep
        sock.close()
        self._outstanding: dict[int, tuple[int, dict]] = {}

    def send(self, worker_id: int, trial_id: int, config: ModelConfig) -> None:
        self._outstanding[worker_id] = (trial_id, config.to_dict())
        send_blob(
            self._endpoints[worker_id],
            HPO_MAGIC,
            json.dumps(
                {"type": "run", "trial_id": trial_id, "config": config.to_dict()}
            ).encode(),
        )

    def next_completion(self, timeout: float | None = None):
        import selectors

        if not self._outstanding:
            raise TransportError("no outstanding trials to wait for")
        budget = timeout if timeout is not None else self.timeout
        deadline = time.monotonic() + budget
        selector = selectors.DefaultSelector()
        waiting = {
            w: ep for w, ep in self._endpoints.items() if w in self._outstanding
        }
        for w, ep in waiting.items():
            selector.register(ep._sock, selectors.EVENT_READ, w)
        try:
            events = selector.select(timeout=budget)
            if not events:
                raise TransportError("timed out waiting for a trial completion")
            key, _ = events[0]
            worker_id = key.data
            ep = self._endpoints[worker_id]
            try:
                _, body = recv_blob(ep, HPO_MAGIC, deadline)
            except TransportError:
                # worker died mid-trial: fail its outstanding work, drop it
                trial_id, config = self._outstanding.pop(worker_id)
                del self._endpoints[worker_id]
                log.warning("worker %d died; trial %d marked failed", worker_id,
                            trial_id)
                if not self._endpoints:
                    raise TransportError("all HPO workers have died")
                return worker_id, TrialRecord(
                    trial_id=trial_id,
                    config=config,
                    mae=math.inf,
                    fidelity_epochs=0,
                    wall_time_s=0.0,
                    energy_kwh=0.0,
                    status="failed-crash",
                )
            msg = json.loads(body)
            del self._outstanding[worker_id]
            return worker_id, TrialRecord.from_dict(msg)
        finally:
            selector.close()

    def idle_workers(self):
        return [w for w in self._endpoints if w not in self._outstanding]

    def close(self) -> None:
        for ep in self._endpoints.values():
            try:
                send_blob(ep, HPO_MAGIC, json.dumps({"type": "stop"}).encode())
            except TransportError:
                pass
        for p in self._procs:
            p.join(timeout=30)
            if p.is_alive():
                p.terminate()
        for ep in self._endpoints.values():
            ep.close()


# --------------------------------------------------------------------------
# The manager loop
# --------------------------------------------------------------------------


@dataclass
class HpoEvent:
    """One scheduling event, for asynchrony audits."""

    kind: str  # start | finish
    trial_id: int
    worker_id: int
    at: float


def hpo_loop(
    space: SearchSpace,
    trial_runner=None,
    n_workers: int = 2,
    max_trials: int = 20,
    budget_s: float | None = None,
    seed: int = 0,
    warmup: int = DEFAULT_WARMUP,
    n_candidates: int = DEFAULT_CANDIDATES,
    history_path: str | None = None,
    restart_history: list | None = None,
    pool=None,
    events: list | None = None,
) -> list[TrialRecord]:
    """Run the asynchronous search; returns this run's completed trials.

    ``restart_history`` (TrialRecords from a previous run) warm-starts the
    surrogate without counting against ``max_trials``. Exactly one of
    ``trial_runner`` (thread workers) or ``pool`` (a prebuilt worker pool,
    e.g. processes) must be provided.
    """
    if (trial_runner is None) == (pool is None):
        raise ConfigError("provide exactly one of trial_runner or pool")
    if max_trials < 0:
        raise ConfigError(f"max_trials must be >= 0, got {max_trials}")
    own_pool = pool is None
    if own_pool:
        pool = ThreadWorkerPool(trial_runner, n_workers)

    surrogate = SurrogateState(space)
    next_id = 0
    for record in restart_history or []:
        surrogate.add(record.config, record.mae)
        next_id = max(next_id, record.trial_id + 1)

    t0 = time.monotonic()
    started = 0
    outstanding = 0
    completed: list[TrialRecord] = []

    def may_start() -> bool:
        if started >= max_trials:
            return False
        return budget_s is None or time.monotonic() - t0 < budget_s

    def start_trial(worker_id: int) -> None:
        nonlocal next_id, started, outstanding
        config = suggest(
            surrogate,
            space,
            n_candidates=n_candidates,
            seed=(seed, next_id),
            warmup=warmup,
        )
        if events is not None:
            events.append(HpoEvent("start", next_id, worker_id, time.monotonic()))
        pool.send(worker_id, next_id, config)
        next_id += 1
        started += 1
        outstanding += 1

    try:
        for worker_id in range(pool.n_workers):
            if may_start():
                start_trial(worker_id)
        while outstanding:
            worker_id, record = pool.next_completion()
            outstanding -= 1
            record.completed_at = time.monotonic()
            surrogate.add(record.config, record.mae)
            completed.append(record)
            if events is not None:
                events.append(
                    HpoEvent("finish", record.trial_id, worker_id, record.completed_at)
                )
            if history_path:
                append_history(history_path, record)
            if may_start() and worker_id in _live_workers(pool):
                start_trial(worker_id)
        return completed
    finally:
        if own_pool:
            pool.close()


def _live_workers(pool) -> set:
    if isinstance(pool, ProcessWorkerPool):
        return set(pool._endpoints)
    return set(range(pool.n_workers))


def cumulative_min(trials: list[TrialRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Best-so-far MAE as a step curve over completion times."""
    ordered = sorted(trials, key=lambda t: t.completed_at)
    times = np.array([t.completed_at for t in ordered])
    best = np.minimum.accumulate(np.array([t.mae for t in ordered]))
    return times, best
