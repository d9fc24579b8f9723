"""Optimizers, early stopping, checkpoints, and the distributed train loop."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import gfmkit.train as train_mod
from gfmkit.comm import LocalComm, create_thread_comms
from gfmkit.container import write_container
from gfmkit.ddstore import ChannelFabric, DDStore
from gfmkit.errors import ConfigError, CorruptionError, FormatError
from gfmkit.model import ModelConfig, ModelParams, init_params
from gfmkit.preprocess import generate_synthetic
from gfmkit.train import (
    Checkpoint,
    EarlyStopper,
    OptimizerState,
    TrainConfig,
    apply_update,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

TINY = ModelConfig(
    mpnn_kind="mean-agg", mpnn_layers=1, mpnn_width=4, fc_layers=2, fc_width=3,
    batch_size=8,
)


def dataset_container(tmp_path, n_train=32, n_val=8, n_test=8, n_atoms=None, seed=7):
    kw = {"n_atoms_range": (n_atoms, n_atoms)} if n_atoms else {}
    records = generate_synthetic(n_train + n_val + n_test, seed=seed, **kw)
    groups = {
        "trainset": records[:n_train],
        "valset": records[n_train : n_train + n_val],
        "testset": records[n_train + n_val :],
    }
    path = str(tmp_path / "train.container")
    write_container(groups, subfile_count=2, path=path)
    return path


def local_store(path, groups=("trainset", "valset")):
    store = DDStore(0, 1)
    for group in groups:
        store.load(path, group)
    return store


class TestOptimizer:
    def test_sgd_step_exact(self):
        flat = np.array([1.0, 2.0, -3.0])
        grad = np.array([0.5, -1.0, 2.0])
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.1)
        state = OptimizerState.zeros(3)
        out = apply_update(flat, grad, cfg, state)
        assert np.array_equal(out, flat - 0.1 * grad)
        assert state.t == 1

    def test_adam_first_step_oracle(self):
        grad = np.array([0.2, -0.7, 1.5, 0.0])
        flat = np.zeros(4)
        cfg = TrainConfig(optimizer="adam", learning_rate=1e-3)
        state = OptimizerState.zeros(4)
        out = apply_update(flat, grad, cfg, state)
        # independent recomputation of the bias-corrected moment update
        m = (1 - 0.9) * grad
        v = (1 - 0.999) * grad * grad
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = flat - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(out, expected, rtol=0, atol=0)

    def test_adam_moments_accumulate(self):
        cfg = TrainConfig(optimizer="adam", learning_rate=1e-2)
        state = OptimizerState.zeros(2)
        flat = np.array([1.0, 1.0])
        g = np.array([1.0, -1.0])
        for _ in range(5):
            flat = apply_update(flat, g, cfg, state)
        assert state.t == 5
        # constant gradient: bias-corrected step approaches lr * sign(g)
        assert flat[0] < 1.0 - 4 * 0.01 * 0.9
        assert flat[1] > 1.0 + 4 * 0.01 * 0.9

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="optimizer"):
            TrainConfig(optimizer="lbfgs")
        with pytest.raises(ConfigError, match="max_epochs"):
            TrainConfig(max_epochs=-1)
        with pytest.raises(ConfigError, match="patience"):
            TrainConfig(patience=0)
        with pytest.raises(ConfigError, match="learning_rate"):
            TrainConfig(learning_rate=0.0)


class TestEarlyStopper:
    def test_strictly_increasing_stops_at_eleven(self):
        stopper = EarlyStopper(patience=10)
        epochs = 0
        for value in [0.1 * (k + 1) for k in range(100)]:
            epochs += 1
            if stopper.update(value):
                break
        assert epochs == 11

    def test_decreasing_never_stops(self):
        stopper = EarlyStopper(patience=3)
        assert not any(stopper.update(1.0 / (k + 1)) for k in range(50))

    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=3)
        for v in [1.0, 1.1, 1.2, 0.9]:
            assert not stopper.update(v)
        assert stopper.since_improvement == 0
        assert stopper.best == 0.9

    def test_plateau_counts_as_no_improvement(self):
        stopper = EarlyStopper(patience=2)
        assert not stopper.update(1.0)
        assert not stopper.update(1.0)
        assert stopper.update(1.0)


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self, tmp_path):
        path = dataset_container(tmp_path, n_train=8, n_val=2)
        store = local_store(path)
        result = train(TINY, store, config=TrainConfig(max_epochs=0, base_seed=3))
        initial = init_params(TINY, seed=3)
        assert result.epochs_run == 0
        assert result.metrics == []
        assert result.stop_reason == "max_epochs"
        assert result.params.flatten().tobytes() == initial.flatten().tobytes()

    def test_loss_decreases_and_metrics_populated(self, tmp_path):
        path = dataset_container(tmp_path, n_train=24, n_val=8)
        store = local_store(path)
        cfg = TrainConfig(max_epochs=4, base_seed=0, learning_rate=3e-3)
        result = train(TINY, store, config=cfg)
        assert result.epochs_run == 4
        losses = [m.train_loss for m in result.metrics]
        assert losses[-1] < losses[0]
        for m in result.metrics:
            assert m.val_mae == pytest.approx(m.val_energy_mae + m.val_force_mae)
            assert set(m.phase_seconds) == {"dataload", "forward", "backward", "sync"}
            assert all(v >= 0 for v in m.phase_seconds.values())
            assert m.epoch_time_s + 0.05 * m.epoch_time_s >= sum(
                v for k, v in m.phase_seconds.items() if k != "sync"
            )

    def test_increasing_validation_stops_at_eleven_epochs(self, tmp_path, monkeypatch):
        path = dataset_container(tmp_path, n_train=8, n_val=2)
        store = local_store(path)
        seen = {"count": 0}

        def rigged_evaluate(params, store, comm, group="valset", batch_size=64):
            seen["count"] += 1
            return 0.1 * seen["count"], 0.0

        monkeypatch.setattr(train_mod, "evaluate", rigged_evaluate)
        result = train(
            TINY, store, config=TrainConfig(max_epochs=30, patience=10, base_seed=1)
        )
        assert result.epochs_run == 11
        assert result.stop_reason == "early_stop"

    def test_nan_aborts_without_update(self, tmp_path):
        path = dataset_container(tmp_path, n_train=8, n_val=2)
        store = local_store(path)
        poisoned = init_params(TINY, seed=0)
        poisoned.embedding[:, 0] = np.nan
        ckpt = str(tmp_path / "nan.ckpt")
        result = train(
            TINY,
            store,
            config=TrainConfig(max_epochs=5, checkpoint_path=ckpt, base_seed=0),
            initial=poisoned,
        )
        assert result.nan_event
        assert result.stop_reason == "nan"
        assert result.epochs_run == 1
        # the poisoned parameters were never stepped
        assert result.params.flatten().tobytes() == poisoned.flatten().tobytes()
        assert load_checkpoint(ckpt).epoch == 1

    def test_budget_stops_after_first_epoch(self, tmp_path):
        path = dataset_container(tmp_path, n_train=8, n_val=2)
        store = local_store(path)
        result = train(
            TINY, store, config=TrainConfig(max_epochs=20, wall_clock_budget_s=0.0)
        )
        assert result.stop_reason == "budget"
        assert result.epochs_run == 1

    def test_evaluate_matches_direct_mae(self, tmp_path):
        path = dataset_container(tmp_path, n_train=8, n_val=6)
        store = local_store(path)
        params = init_params(TINY, seed=2)
        e_mae, f_mae = evaluate(params, store, LocalComm())
        from gfmkit.model import forward_batch, make_batch

        records = [store.fetch("valset", i) for i in range(6)]
        batch = make_batch(records)
        e_pred, f_pred = forward_batch(params, batch)
        want_e = np.abs((e_pred - batch.energy_true) / batch.n_per_graph).mean()
        want_f = np.abs(f_pred - batch.forces_true).mean()
        assert e_mae == pytest.approx(want_e, rel=1e-12)
        assert f_mae == pytest.approx(want_f, rel=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        flat = np.random.default_rng(0).normal(size=137)
        state = OptimizerState(
            m=np.random.default_rng(1).normal(size=137),
            v=np.abs(np.random.default_rng(2).normal(size=137)),
            t=42,
        )
        save_checkpoint(path, TINY, flat, state, epoch=7, base_seed=99)
        ckpt = load_checkpoint(path)
        assert isinstance(ckpt, Checkpoint)
        assert ckpt.model_config == TINY
        assert ckpt.flat.tobytes() == flat.tobytes()
        assert ckpt.opt_state.m.tobytes() == state.m.tobytes()
        assert ckpt.opt_state.v.tobytes() == state.v.tobytes()
        assert ckpt.opt_state.t == 42
        assert ckpt.epoch == 7
        assert ckpt.base_seed == 99

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_corruption_detected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(
            path, TINY, np.zeros(10), OptimizerState.zeros(10), epoch=1, base_seed=0
        )
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(
            path, TINY, np.zeros(10), OptimizerState.zeros(10), epoch=1, base_seed=0
        )
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) - 30])
        with pytest.raises(CorruptionError):
            load_checkpoint(path)


# ---------------------------------------------------------------------------
# Data-parallel equivalence
# ---------------------------------------------------------------------------


def make_rank_stores(path, n_ranks, groups=("trainset", "valset")):
    fabric = ChannelFabric(n_ranks)
    stores = [DDStore(r, n_ranks, fabric=fabric) for r in range(n_ranks)]
    for store in stores:
        for group in groups:
            store.load(path, group)
    return stores


class TestDataParallelEquivalence:
    def test_four_ranks_match_single_rank_losses(self, tmp_path):
        """Same global batches, fixed-order reduction: losses agree to 1e-8."""
        n_train, global_batch, ranks, epochs = 32, 8, 4, 2
        path = dataset_container(tmp_path, n_train=n_train, n_val=8, n_atoms=6)
        cfg = ModelConfig(
            mpnn_kind="mean-agg", mpnn_layers=1, mpnn_width=4, fc_layers=2,
            fc_width=3, batch_size=global_batch,
        )
        from gfmkit.ddstore import epoch_schedule

        def global_batches(epoch):
            return epoch_schedule(n_train, 1, global_batch, 123, epoch).for_rank(0)

        tcfg = dict(max_epochs=epochs, base_seed=5, optimizer="sgd",
                    learning_rate=1e-2)

        solo = train(
            cfg,
            local_store(path),
            LocalComm(),
            TrainConfig(**tcfg),
            schedule_fn=lambda epoch: [global_batches(epoch)],
        )

        part = global_batch // ranks

        def split_schedule(epoch):
            batches = global_batches(epoch)
            return [
                [b[r * part : (r + 1) * part] for b in batches] for r in range(ranks)
            ]

        stores = make_rank_stores(path, ranks)
        comms = create_thread_comms(ranks)

        def run_rank(rank):
            return train(
                cfg,
                stores[rank],
                comms[rank],
                TrainConfig(**tcfg),
                schedule_fn=split_schedule,
            )

        with ThreadPoolExecutor(max_workers=ranks) as pool:
            results = list(pool.map(run_rank, range(ranks)))

        solo_losses = [m.train_loss for m in solo.metrics]
        for result in results:
            losses = [m.train_loss for m in result.metrics]
            assert len(losses) == len(solo_losses) == epochs
            for got, want in zip(losses, solo_losses):
                assert math.isfinite(got)
                assert abs(got - want) < 1e-8

        # ranks end bitwise identical to each other
        blobs = {r.params.flatten().tobytes() for r in results}
        assert len(blobs) == 1
        for store in stores:
            store.close()

    def test_params_bitwise_identical_after_every_step(self, tmp_path):
        """Manual step loop across 4 ranks: parameters never diverge."""
        ranks = 4
        path = dataset_container(tmp_path, n_train=16, n_val=4, n_atoms=5)
        stores = make_rank_stores(path, ranks, groups=("trainset",))
        comms = create_thread_comms(ranks)
        cfg = TINY
        tcfg = TrainConfig(optimizer="adam", learning_rate=1e-3)

        from gfmkit.model import forward_batch, loss_and_grad, make_batch

        def run_rank(rank):
            params = init_params(cfg, seed=11)
            flat = params.flatten()
            state = OptimizerState.zeros(flat.shape[0])
            snapshots = []
            for step in range(3):
                indices = [(step * ranks + rank + k) % 16 for k in range(4)]
                records = stores[rank].fetch_batch("trainset", indices)
                batch = make_batch(records)
                _, grad = loss_and_grad(params, batch)
                mean_grad = comms[rank].allreduce_sum(grad) / ranks
                flat = apply_update(flat, mean_grad, tcfg, state)
                params = ModelParams.from_flat(cfg, flat)
                snapshots.append(flat.tobytes())
            return snapshots

        with ThreadPoolExecutor(max_workers=ranks) as pool:
            per_rank = list(pool.map(run_rank, range(ranks)))
        for step in range(3):
            blobs = {per_rank[r][step] for r in range(ranks)}
            assert len(blobs) == 1
        for store in stores:
            store.close()

    def test_multi_rank_train_loop_end_to_end(self, tmp_path):
        """The full train() loop over 2 thread ranks with default schedule."""
        path = dataset_container(tmp_path, n_train=20, n_val=6)
        stores = make_rank_stores(path, 2)
        comms = create_thread_comms(2)
        cfg = TrainConfig(max_epochs=2, base_seed=4)

        with ThreadPoolExecutor(max_workers=2) as pool:
            results = list(
                pool.map(
                    lambda r: train(TINY, stores[r], comms[r], cfg), range(2)
                )
            )
        assert (
            results[0].params.flatten().tobytes()
            == results[1].params.flatten().tobytes()
        )
        for a, b in zip(results[0].metrics, results[1].metrics):
            assert a.train_loss == b.train_loss
            assert a.val_mae == b.val_mae
        for store in stores:
            store.close()
