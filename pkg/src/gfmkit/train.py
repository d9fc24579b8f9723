"""Data-parallel multitask training loop.

Every rank runs the same loop: fetch its scheduled batch from the
distributed store, forward, backward, then join a fixed-order allreduce.
Per step, one vector of ``grad | loss | has-batch`` is summed across ranks
(ascending rank order on the hub), so every rank sees byte-identical
reduction results, applies the identical optimizer update, and parameters
stay bitwise equal across ranks forever. Ranks without a batch at a step
contribute zeros and still join the reduce — stragglers never desynchronize
the collective.

Stopping: ``max_epochs`` cap; early stop when the validation MAE (per-atom
energy MAE + force-component MAE, unweighted) has not decreased for
``patience`` consecutive epochs; non-finite loss aborts training with the
update discarded; an optional wall-clock budget is checked by rank 0 and
broadcast so all ranks stop together. Checkpoints (magic ``GFMP``) hold the
model config, flat parameters, optimizer moments, epoch counter, and base
seed, and are written at the end of training and on abnormal stops.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .comm import Comm, LocalComm
from .ddstore import DDStore, epoch_schedule
from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    UnsupportedVersionError,
    ValidationError,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward_batch,
    init_params,
    loss_and_grad,
    make_batch,
)
from .telemetry import PhaseClock

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")

CHECKPOINT_MAGIC = b"GFMP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    max_epochs: int = 30
    patience: int = 10
    base_seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    wall_clock_budget_s: float | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def apply_update(
    flat: np.ndarray, grad: np.ndarray, cfg: TrainConfig, state: OptimizerState
) -> np.ndarray:
    """One optimizer step on the flat parameter vector (pure numpy, so the
    result is bitwise identical wherever inputs are bitwise identical)."""
    state.t += 1
    if cfg.optimizer == "sgd":
        return flat - cfg.learning_rate * grad
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1**state.t)
    v_hat = state.v / (1.0 - cfg.beta2**state.t)
    return flat - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


class EarlyStopper:
    """Stop when the metric has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.since_improvement = 0

    def update(self, value: float) -> bool:
        """Record an epoch's metric; True means training should stop now."""
        if value < self.best:
            self.best = value
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.patience


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_mae: float
    val_energy_mae: float
    val_force_mae: float
    epoch_time_s: float
    phase_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_mae": self.val_mae,
            "val_energy_mae": self.val_energy_mae,
            "val_force_mae": self.val_force_mae,
            "epoch_time_s": self.epoch_time_s,
            "phase_seconds": dict(self.phase_seconds),
        }


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list
    stop_reason: str  # max_epochs | early_stop | nan | budget
    nan_event: bool
    epochs_run: int


def evaluate(
    params: ModelParams,
    store: DDStore,
    comm: Comm,
    group: str = "valset",
    batch_size: int = 64,
) -> tuple[float, float]:
    """Per-atom energy MAE and force-component MAE over a whole group.

    Rank r scores indices ``r::P``; sums and counts are allreduced, so every
    rank returns the identical values.
    """
    ownership = store.ownership.get(group)
    if ownership is None:
        raise ValidationError(f"group {group!r} not loaded on rank {comm.rank}")
    n = ownership.n_samples
    sum_e = sum_f = n_graphs = n_comp = 0.0
    mine = np.arange(comm.rank, n, comm.size)
    for lo in range(0, mine.shape[0], batch_size):
        records = store.fetch_batch(group, mine[lo : lo + batch_size])
        batch = make_batch(records)
        e_pred, f_pred = forward_batch(params, batch)
        sum_e += float(np.abs((e_pred - batch.energy_true) / batch.n_per_graph).sum())
        sum_f += float(np.abs(f_pred - batch.forces_true).sum())
        n_graphs += batch.n_graphs
        n_comp += 3.0 * batch.n_nodes
    totals = comm.allreduce_sum(np.array([sum_e, n_graphs, sum_f, n_comp]))
    energy_mae = totals[0] / totals[1] if totals[1] else 0.0
    force_mae = totals[2] / totals[3] if totals[3] else 0.0
    return float(energy_mae), float(force_mae)


def train(
    model_config: ModelConfig,
    store: DDStore,
    comm: Comm | None = None,
    config: TrainConfig | None = None,
    clock: PhaseClock | None = None,
    initial: ModelParams | None = None,
    schedule_fn=None,
) -> TrainResult:
    """Run the data-parallel training loop on this rank.

    ``schedule_fn(epoch) -> per-rank batch lists`` may replace the default
    global-shuffle schedule (used to pin exact batch compositions in
    equivalence checks). All ranks must be given the same function.
    """
    comm = comm or LocalComm()
    config = config or TrainConfig()
    clock = clock or PhaseClock()
    params = initial if initial is not None else init_params(
        model_config, seed=config.base_seed
    )
    flat = params.flatten()
    n = flat.shape[0]
    state = OptimizerState.zeros(n)

    ownership = store.ownership.get("trainset")
    if ownership is None:
        raise ValidationError(f"trainset not loaded on rank {comm.rank}")
    n_train = ownership.n_samples

    start = time.monotonic()
    stopper = EarlyStopper(config.patience)
    metrics: list[EpochMetrics] = []
    stop_reason = "max_epochs"
    nan_event = False
    epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        epoch_t0 = time.perf_counter()
        phase_before = clock.totals()
        if schedule_fn is not None:
            per_rank = schedule_fn(epoch)
            mine = per_rank[comm.rank]
            steps = max(len(b) for b in per_rank)
        else:
            sched = epoch_schedule(
                n_train, comm.size, model_config.batch_size, config.base_seed, epoch
            )
            mine = sched.for_rank(comm.rank)
            steps = sched.max_batches()

        loss_sum = 0.0
        loss_count = 0.0
        for step in range(steps):
            if step < len(mine) and len(mine[step]):
                with clock.phase("dataload"):
                    records = store.fetch_batch("trainset", mine[step])
                    batch = make_batch(records)
                with clock.phase("forward"):
                    cache: dict = {}
                    e_pred, f_pred = forward_batch(params, batch, cache)
                with clock.phase("backward"):
                    loss, grad = loss_and_grad(
                        params, batch, (cache, e_pred, f_pred)
                    )
                contribution = np.concatenate([grad, [loss.total, 1.0]])
            else:
                contribution = np.zeros(n + 2)
            with clock.phase("sync"):
                total = comm.allreduce_sum(contribution)
            mean_grad = total[:n] / comm.size
            step_loss, step_count = total[n], total[n + 1]
            if not (np.isfinite(step_loss) and np.all(np.isfinite(mean_grad))):
                log.warning(
                    "rank %d: non-finite loss at epoch %d step %d; "
                    "update discarded, training aborted",
                    comm.rank,
                    epoch,
                    step,
                )
                nan_event = True
                stop_reason = "nan"
                break
            with clock.phase("backward"):  # optimizer cost counted as backward
                flat = apply_update(flat, mean_grad, config, state)
                params = ModelParams.from_flat(model_config, flat)
            loss_sum += step_loss
            loss_count += step_count

        if nan_event:
            break

        val_energy_mae, val_force_mae = evaluate(params, store, comm)
        val_mae = val_energy_mae + val_force_mae
        phase_after = clock.totals()
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / loss_count if loss_count else float("nan"),
                val_mae=val_mae,
                val_energy_mae=val_energy_mae,
                val_force_mae=val_force_mae,
                epoch_time_s=time.perf_counter() - epoch_t0,
                phase_seconds={
                    k: phase_after[k] - phase_before.get(k, 0.0)
                    for k in phase_after
                },
            )
        )
        log.info(
            "rank %d epoch %d: train_loss=%.6g val_mae=%.6g",
            comm.rank,
            epoch,
            metrics[-1].train_loss,
            val_mae,
        )

        if stopper.update(val_mae):
            stop_reason = "early_stop"
            break
        over_budget = (
            config.wall_clock_budget_s is not None
            and time.monotonic() - start >= config.wall_clock_budget_s
        )
        if comm.broadcast_obj("budget" if over_budget else None) is not None:
            stop_reason = "budget"
            break

    if config.max_epochs == 0:
        stop_reason = "max_epochs"

    if config.checkpoint_path and comm.rank == 0:
        save_checkpoint(
            config.checkpoint_path,
            model_config,
            flat,
            state,
            epoch=epoch,
            base_seed=config.base_seed,
        )
    return TrainResult(
        params=ModelParams.from_flat(model_config, flat),
        metrics=metrics,
        stop_reason=stop_reason,
        nan_event=nan_event,
        epochs_run=len(metrics) + (1 if nan_event else 0),
    )


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<IQ")  # version, config json length
_CKPT_COUNTS = struct.Struct("<QQq")  # n_params, opt step t, epoch


@dataclass
class Checkpoint:
    model_config: ModelConfig
    flat: np.ndarray
    opt_state: OptimizerState
    epoch: int
    base_seed: int


def save_checkpoint(
    path: str,
    model_config: ModelConfig,
    flat: np.ndarray,
    opt_state: OptimizerState,
    epoch: int,
    base_seed: int,
) -> None:
    flat = np.ascontiguousarray(flat, dtype="<f8")
    cfg_blob = json.dumps(model_config.to_dict(), sort_keys=True).encode()
    parts = [
        CHECKPOINT_MAGIC,
        _CKPT_HEAD.pack(CHECKPOINT_VERSION, len(cfg_blob)),
        cfg_blob,
        _CKPT_COUNTS.pack(flat.shape[0], opt_state.t, epoch),
        struct.pack("<q", base_seed),
        flat.tobytes(),
        opt_state.m.astype("<f8").tobytes(),
        opt_state.v.astype("<f8").tobytes(),
    ]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path!r} is not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise CorruptionError(f"checkpoint {path!r} truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"checkpoint {path!r} failed its checksum")
    off = len(CHECKPOINT_MAGIC)
    version, cfg_len = _CKPT_HEAD.unpack_from(body, off)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} not supported (want {CHECKPOINT_VERSION})"
        )
    off += _CKPT_HEAD.size
    model_config = ModelConfig.from_dict(json.loads(body[off : off + cfg_len]))
    off += cfg_len
    n, t, epoch = _CKPT_COUNTS.unpack_from(body, off)
    off += _CKPT_COUNTS.size
    (base_seed,) = struct.unpack_from("<q", body, off)
    off += 8
    expected = off + 3 * n * 8
    if len(body) != expected:
        raise CorruptionError(
            f"checkpoint {path!r} truncated: {len(body)} bytes, expected {expected}"
        )
    flat = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy()
    off += n * 8
    m = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy()
    off += n * 8
    v = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy()
    return Checkpoint(
        model_config=model_config,
        flat=flat,
        opt_state=OptimizerState(m=m, v=v, t=t),
        epoch=epoch,
        base_seed=base_seed,
    )
