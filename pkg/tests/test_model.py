import itertools
import time

import numpy as np
import pytest

from gfmkit.errors import ValidationError
from gfmkit.model import (
    MPNN_KINDS,
    Batch,
    ModelConfig,
    ModelParams,
    batch_loss,
    count_params,
    forward,
    forward_batch,
    init_params,
    make_batch,
    mtl_loss,
    predict,
)
from gfmkit.preprocess import generate_synthetic
from gfmkit.records import GraphRecord

from conftest import make_random_records


def tiny_config(kind="mean-agg", **kw):
    defaults = dict(
        mpnn_kind=kind,
        mpnn_layers=1,
        mpnn_width=3,
        fc_layers=2,
        fc_width=2,
        batch_size=4,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


# --- parameter counting ------------------------------------------------------


def test_count_params_examples():
    assert count_params(ModelConfig(mpnn_layers=3, mpnn_width=50, fc_layers=2, fc_width=50)) == 26_251
    assert count_params(ModelConfig(mpnn_layers=1, mpnn_width=1, fc_layers=2, fc_width=1)) == 128


def test_count_params_matches_actual_arrays():
    for kind in MPNN_KINDS:
        for l, h, f, g in [(1, 3, 2, 2), (2, 5, 3, 4), (6, 8, 3, 7)]:
            cfg = ModelConfig(
                mpnn_kind=kind, mpnn_layers=l, mpnn_width=h, fc_layers=f, fc_width=g
            )
            params = init_params(cfg, seed=0)
            assert params.n_params == count_params(cfg)
            assert params.flatten().shape == (count_params(cfg),)


def test_count_params_monotone_grid():
    grid = [1, 2, 4]
    for l, h, f, g in itertools.product(grid, grid, [2, 3], grid):
        base = count_params(
            ModelConfig(mpnn_layers=l, mpnn_width=h, fc_layers=f, fc_width=g)
        )
        for dl, dh, df, dg in [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)]:
            bigger = count_params(
                ModelConfig(
                    mpnn_layers=l + dl,
                    mpnn_width=h + dh,
                    fc_layers=f + df,
                    fc_width=g + dg,
                )
            )
            assert bigger >= base


def test_flat_roundtrip():
    cfg = tiny_config("max-agg", mpnn_layers=2, fc_layers=3)
    params = init_params(cfg, seed=3)
    flat = params.flatten()
    back = ModelParams.from_flat(cfg, flat)
    np.testing.assert_array_equal(back.flatten(), flat)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(mpnn_kind="gru")
    with pytest.raises(ValidationError):
        ModelConfig(fc_layers=1)
    with pytest.raises(ValidationError):
        ModelConfig(alpha_energy=0.0)


# --- loss ---------------------------------------------------------------------


def test_loss_zero_when_exact():
    lb = mtl_loss(
        np.array([1.0, 2.0]),
        np.zeros((5, 3)),
        np.array([1.0, 2.0]),
        np.zeros((5, 3)),
        np.array([2, 3]),
    )
    assert lb.total == 0.0


def test_loss_energy_example_half():
    # one graph, n=2, energy off by 1.0 eV, forces exact -> total 0.5
    lb = mtl_loss(
        np.array([3.0]),
        np.zeros((2, 3)),
        np.array([2.0]),
        np.zeros((2, 3)),
        np.array([2]),
        alpha_energy=1.0,
        alpha_forces=100.0,
    )
    assert lb.energy_term == pytest.approx(0.5, abs=1e-15)
    assert lb.total == pytest.approx(0.5, abs=1e-15)


def test_loss_force_example_one_third():
    # one graph, n=1, one force component off by 0.01, energy exact
    f_pred = np.zeros((1, 3))
    f_pred[0, 0] = 0.01
    lb = mtl_loss(
        np.array([5.0]),
        f_pred,
        np.array([5.0]),
        np.zeros((1, 3)),
        np.array([1]),
        alpha_energy=1.0,
        alpha_forces=100.0,
    )
    assert lb.force_term == pytest.approx(0.01 / 3, abs=1e-15)
    assert lb.total == pytest.approx(1.0 / 3, abs=1e-12)


def test_loss_alpha_linearity():
    rng = np.random.default_rng(0)
    e_pred, e_true = rng.normal(size=4), rng.normal(size=4)
    f_pred, f_true = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    n = np.array([2, 3, 1, 3])
    one = mtl_loss(e_pred, f_pred, e_true, f_true, n, 1.0, 1.0)
    double_f = mtl_loss(e_pred, f_pred, e_true, f_true, n, 1.0, 2.0)
    assert double_f.total - one.total == pytest.approx(one.force_term, rel=1e-14)
    assert one.total == pytest.approx(one.energy_term + one.force_term, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValidationError):
        mtl_loss(np.zeros(2), np.zeros((3, 3)), np.zeros(3), np.zeros((3, 3)), np.ones(2))


# --- forward invariants ---------------------------------------------------------


def structures(count, seed, **kw):
    defaults = dict(n_atoms_range=(2, 8), cutoff_radius=2.5, seed=seed)
    defaults.update(kw)
    return generate_synthetic(count, **defaults)


def test_forward_no_edges_zero_forces():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    rec = GraphRecord(
        atomic_numbers=[1, 6],
        positions=[[0, 0, 0], [40, 0, 0]],
        edge_index=np.zeros((0, 2)),
        energy=0.0,
        forces=np.zeros((2, 3)),
    )
    e, f = forward(params, rec)
    assert f.shape == (2, 3)
    np.testing.assert_array_equal(f, 0.0)
    assert np.isfinite(e)


def test_momentum_conservation():
    for kind in MPNN_KINDS:
        cfg = tiny_config(kind, mpnn_width=5)
        params = init_params(cfg, seed=2)
        for rec in structures(40, seed=hash(kind) % 2**32):
            _, f = forward(params, rec)
            np.testing.assert_allclose(f.sum(axis=0), 0.0, atol=1e-9)


def test_translation_invariance():
    for kind in MPNN_KINDS:
        cfg = tiny_config(kind, mpnn_width=4, mpnn_layers=2)
        params = init_params(cfg, seed=3)
        for i, rec in enumerate(structures(10, seed=77)):
            e1, f1 = forward(params, rec)
            shifted = GraphRecord(
                rec.atomic_numbers,
                rec.positions + np.array([13.7, -2.9, 0.4]),
                rec.edge_index,
                rec.energy,
                rec.forces,
            )
            e2, f2 = forward(params, shifted)
            assert abs(e1 - e2) < 1e-10
            np.testing.assert_allclose(f1, f2, atol=1e-10)


def test_forward_deterministic_and_batch_consistent():
    cfg = tiny_config("sum-agg", mpnn_width=6)
    params = init_params(cfg, seed=5)
    records = structures(6, seed=11)
    e_all, f_all = predict(params, records)
    for i, rec in enumerate(records):
        e_one, f_one = forward(params, rec)
        assert e_one == pytest.approx(e_all[i], abs=1e-12)
        np.testing.assert_allclose(f_one, f_all[i], atol=1e-12)


def test_mean_and_sum_agg_differ_max_selects():
    records = structures(4, seed=19)
    batch = make_batch(records)
    outs = {}
    for kind in MPNN_KINDS:
        cfg = tiny_config(kind, mpnn_width=4)
        params = init_params(cfg, seed=6)
        outs[kind] = forward_batch(params, batch)[0]
    assert not np.allclose(outs["mean-agg"], outs["sum-agg"])
    assert not np.allclose(outs["max-agg"], outs["sum-agg"])


def test_forward_time_linear_in_edge_count():
    # Chain graphs: edge count scales with node count; spans ~1,000x.
    cfg = tiny_config(mpnn_width=8)
    params = init_params(cfg, seed=7)
    sizes = [30, 100, 300, 1000, 3000, 10000, 30000]
    times, edges = [], []
    for n in sizes:
        pos = np.zeros((n, 3))
        pos[:, 0] = np.arange(n) * 0.9
        src = np.concatenate([np.arange(n - 1), np.arange(1, n)])
        dst = np.concatenate([np.arange(1, n), np.arange(n - 1)])
        rec = GraphRecord(
            atomic_numbers=np.ones(n, dtype=np.uint8),
            positions=pos,
            edge_index=np.stack([src, dst], axis=1),
            energy=0.0,
            forces=np.zeros((n, 3)),
        )
        batch = make_batch([rec])
        forward_batch(params, batch)  # warm-up
        reps = 3
        t0 = time.perf_counter()
        for _ in range(reps):
            forward_batch(params, batch)
        times.append((time.perf_counter() - t0) / reps)
        edges.append(batch.n_edges)
    x = np.asarray(edges, dtype=np.float64)
    y = np.asarray(times)
    slope, intercept = np.polyfit(x, y, 1)
    r2 = 1 - np.sum((y - (slope * x + intercept)) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 > 0.9
    assert slope > 0
