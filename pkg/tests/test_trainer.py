"""Training loop, sharding, distributed evaluation, and metrics tests."""

import math

import numpy as np
import pytest

from minipod.data import Dataset, gen_synthetic
from minipod.model import build_model, init_bn_moving, init_params
from minipod.optim import lr_at
from minipod.trainer import (
    METRICS_HEADER,
    MetricsRecord,
    NonFiniteLossError,
    TrainConfig,
    audit_replicas,
    build_datasets,
    distributed_eval,
    format_metrics_csv,
    init_train_state,
    load_weights,
    run,
    run_with_state,
    save_weights,
    shard_train_data,
    time_to_peak,
    train_step,
    write_metrics_csv,
)


def tiny_config(**kw):
    base = dict(model="toy_cnn", dataset="synthetic", num_replicas=2,
                global_batch=128, bn_group_size=2, optimizer="rmsprop",
                lr_per_256=0.03, warmup_epochs=0.5, total_epochs=1.0,
                eval_every_epochs=1.0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def toy_dataset(n=32, num_classes=4, seed=0):
    return gen_synthetic(num_classes, n, 8, 8, 1, seed=seed)


# ---------------------------------------------------------------------------
# sharding


def test_shard_single_replica_stream():
    ds = toy_dataset(n=12)
    steps = shard_train_data(ds, 1, 4, seed=0)
    assert len(steps) == 3
    assert all(len(s) == 1 for s in steps)
    assert steps[0][0][0].shape == (4, 8, 8, 1)


def test_shard_too_small_dataset():
    ds = toy_dataset(n=3)
    with pytest.raises(ValueError, match="smaller than one global batch"):
        shard_train_data(ds, 2, 2, seed=0)


def test_shard_drop_remainder():
    ds = toy_dataset(n=10)
    assert len(shard_train_data(ds, 2, 2, seed=0)) == 2  # 8 of 10 used


def test_shard_global_batch_invariant_across_factorizations():
    # the step-t global batch is the same example set for any N*b split of B
    ds = toy_dataset(n=24)
    variants = {}
    for n_rep, b in [(1, 8), (2, 4), (4, 2), (8, 1)]:
        steps = shard_train_data(ds, n_rep, b, seed=5, epoch=2)
        variants[n_rep] = [
            np.concatenate([img for img, _ in step]) for step in steps]
    for n_rep in (2, 4, 8):
        for t, ref in enumerate(variants[1]):
            assert variants[n_rep][t].tobytes() == ref.tobytes()


def test_shard_epochs_reshuffle():
    ds = toy_dataset(n=16)
    a = shard_train_data(ds, 1, 8, seed=1, epoch=0)
    b = shard_train_data(ds, 1, 8, seed=1, epoch=1)
    assert a[0][0][0].tobytes() != b[0][0][0].tobytes()
    c = shard_train_data(ds, 1, 8, seed=1, epoch=0)
    assert a[0][0][0].tobytes() == c[0][0][0].tobytes()


# ---------------------------------------------------------------------------
# train_step


def test_train_step_single_vs_two_replicas():
    cfg1 = tiny_config(num_replicas=1, global_batch=4, bn_group_size=1,
                       momentum=0.0)
    cfg2 = tiny_config(num_replicas=2, global_batch=4, bn_group_size=2,
                       momentum=0.0)
    ds = toy_dataset(n=8)
    s1 = init_train_state(cfg1, ds.images.shape[1:], ds.num_classes)
    s2 = init_train_state(cfg2, ds.images.shape[1:], ds.num_classes)
    b1 = shard_train_data(ds, 1, 4, seed=9)[0]
    b2 = shard_train_data(ds, 2, 2, seed=9)[0]
    l1 = train_step(s1, b1, lr=0.05)
    l2 = train_step(s2, b2, lr=0.05)
    assert abs(l1 - l2) < 1e-6
    for p1, p2 in zip(s1.params_per_replica[0], s2.params_per_replica[0]):
        assert float(np.abs(p1.value - p2.value).max()) < 1e-6, p1.name


def test_train_step_replicas_stay_bitwise_identical():
    cfg = tiny_config(num_replicas=4, global_batch=16, bn_group_size=2)
    ds = toy_dataset(n=32)
    state = init_train_state(cfg, ds.images.shape[1:], ds.num_classes)
    for batches in shard_train_data(ds, 4, 4, seed=1):
        train_step(state, batches, lr=0.05)
    audit_replicas(state)  # raises on divergence
    for r in (1, 2, 3):
        for p0, pr in zip(state.params_per_replica[0],
                          state.params_per_replica[r]):
            assert p0.value.tobytes() == pr.value.tobytes()


def test_audit_detects_divergence():
    cfg = tiny_config(num_replicas=2, global_batch=8, bn_group_size=2)
    ds = toy_dataset(n=16)
    state = init_train_state(cfg, ds.images.shape[1:], ds.num_classes)
    state.params_per_replica[1][0].value[0, 0, 0, 0] += 1.0
    from minipod.trainer import ReplicaDivergenceError
    with pytest.raises(ReplicaDivergenceError, match="diverged"):
        audit_replicas(state)


def test_mixed_precision_training_runs_and_is_deterministic():
    cfg = tiny_config(precision="mixed_bf16", total_epochs=0.5)
    recs_a = run(cfg)
    recs_b = run(tiny_config(precision="mixed_bf16", total_epochs=0.5))
    assert format_metrics_csv(recs_a) == format_metrics_csv(recs_b)
    assert all(math.isfinite(r.train_loss) for r in recs_a)
    assert recs_a[-1].train_loss < recs_a[0].train_loss
    # rounding the conv path must actually change the numbers
    recs_fp32 = run(tiny_config(total_epochs=0.5))
    assert recs_fp32[-1].train_loss != recs_a[-1].train_loss


def test_train_step_zero_gradient_fixed_point():
    # saturated logits make every gradient exactly zero in fp32
    cfg = tiny_config(num_replicas=1, global_batch=4, bn_group_size=1,
                      momentum=0.0)
    ds = toy_dataset(n=8, num_classes=4)
    labels = np.full(len(ds), 2, dtype=np.int64)
    ds = Dataset(ds.images, labels, ds.num_classes)
    state = init_train_state(cfg, ds.images.shape[1:], ds.num_classes)
    pmap = {p.name: p for p in state.params_per_replica[0]}
    pmap["fc/kernel"].value[:] = 0.0
    pmap["fc/bias"].value[:] = -200.0
    pmap["fc/bias"].value[2] = 200.0
    before = {p.name: p.value.copy() for p in state.params_per_replica[0]}
    batches = shard_train_data(ds, 1, 4, seed=0)[0]
    loss = train_step(state, batches, lr=0.05)
    assert loss == 0.0
    for p in state.params_per_replica[0]:
        assert p.value.tobytes() == before[p.name].tobytes(), p.name


# ---------------------------------------------------------------------------
# distributed evaluation


def constant_predictor_state(num_classes=2, favored=0):
    """Model whose prediction is always `favored`, for counting tests."""
    cfg = tiny_config(num_replicas=1, global_batch=4, bn_group_size=1)
    layers = build_model("toy_cnn", num_classes)
    params = init_params(layers, (8, 8, 1), seed=0)
    pmap = {p.name: p for p in params}
    pmap["fc/kernel"].value[:] = 0.0
    pmap["fc/bias"].value[:] = 0.0
    pmap["fc/bias"].value[favored] = 10.0
    return layers, params, init_bn_moving(layers, (8, 8, 1))


def test_distributed_eval_weighted_counts_hand_case():
    # per-replica counts (3 of 4) and (2 of 4) -> 5/8
    layers, params, moving = constant_predictor_state(num_classes=2, favored=0)
    labels = np.array([0, 0, 0, 1, 0, 0, 1, 1], dtype=np.int64)
    images = toy_dataset(n=8, num_classes=2).images
    ds = Dataset(images, labels, 2)
    top1 = distributed_eval(layers, params, moving, ds, 2, 4)
    assert top1 == 5 / 8


def test_distributed_eval_padding_denominator():
    # 10 examples on 4 replicas at batch 2 pads to 16; dummies never count
    layers, params, moving = constant_predictor_state(num_classes=2, favored=1)
    images = toy_dataset(n=10, num_classes=2).images
    ds = Dataset(images, np.ones(10, dtype=np.int64), 2)
    top1 = distributed_eval(layers, params, moving, ds, 4, 2)
    assert top1 == 1.0  # 10/10, not 10/16 (dummy zero-images also predict 1)


def test_distributed_eval_replica_count_invariance():
    cfg = tiny_config()
    train, evalset = build_datasets(cfg)
    state = init_train_state(cfg, train.images.shape[1:], train.num_classes)
    small = Dataset(evalset.images[:400], evalset.labels[:400],
                    evalset.num_classes)
    results = [distributed_eval(state.layers, state.params_per_replica[0],
                                state.bn_moving_per_replica[0], small, n, 25)
               for n in (1, 2, 4, 8)]
    assert all(r == results[0] for r in results)  # identical to 0 ulps


def test_distributed_eval_single_replica_plain():
    layers, params, moving = constant_predictor_state(num_classes=2, favored=0)
    images = toy_dataset(n=6, num_classes=2).images
    ds = Dataset(images, np.zeros(6, dtype=np.int64), 2)
    assert distributed_eval(layers, params, moving, ds, 1, 3) == 1.0


# ---------------------------------------------------------------------------
# run loop and metrics


def test_run_zero_epochs_single_eval_record():
    cfg = tiny_config(total_epochs=0.0)
    records = run(cfg)
    assert len(records) == 1
    assert records[0].eval_top1 is not None
    assert math.isnan(records[0].train_loss)


def test_run_metrics_deterministic_and_worker_invariant():
    cfg = tiny_config()
    csv_a = format_metrics_csv(run(cfg))
    csv_b = format_metrics_csv(run(tiny_config()))
    csv_c = format_metrics_csv(run(tiny_config(workers=3)))
    assert csv_a == csv_b == csv_c


def test_run_records_structure(tmp_path):
    cfg = tiny_config(total_epochs=2.0, eval_every_epochs=1.0)
    records = run(cfg)
    spe = 8192 // cfg.global_batch
    assert len(records) == 2 * spe
    assert records[0].lr == lr_at(cfg.schedule(spe), 0)
    evals = [r for r in records if r.eval_top1 is not None]
    assert [r.epoch for r in evals] == [1.0, 2.0]
    assert all(r.modeled_step_ms > 0 for r in records)
    assert records[3].elapsed_s == pytest.approx(
        4 * records[0].modeled_step_ms / 1000.0)

    path = tmp_path / "m.csv"
    write_metrics_csv(records, path)
    text = path.read_text().splitlines()
    assert text[0] == METRICS_HEADER
    first = text[1].split(",")
    assert first[0] == "0" and first[4] == ""  # no eval on the first step
    assert len(text) == 1 + len(records)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_run_nonfinite_loss_aborts_with_records():
    # BN makes the net scale-invariant, so RMSProp blowups stay finite; the
    # LARS trust ratio multiplies weight norms per step and overflows fast.
    cfg = tiny_config(optimizer="lars", lr_per_256=1e9, lars_eta=1.0,
                      warmup_epochs=0.0)
    with pytest.raises(NonFiniteLossError) as exc_info:
        run(cfg)
    assert len(exc_info.value.records) >= 1
    assert not math.isfinite(exc_info.value.records[-1].train_loss)


def test_time_to_peak():
    def rec(step, top1, elapsed):
        return MetricsRecord(step, float(step), 0.1, 1.0, top1, 1.0, 1.0, elapsed)

    assert time_to_peak([rec(0, 0.8, 600.0)]) == (0.8, 10.0)
    records = [rec(0, 0.5, 60.0), rec(1, 0.9, 120.0), rec(2, 0.9, 180.0)]
    assert time_to_peak(records) == (0.9, 2.0)
    with pytest.raises(ValueError, match="no evaluation"):
        time_to_peak([MetricsRecord(0, 0.0, 0.1, 1.0, None, 1.0, 1.0, 0.0)])


def test_save_load_weights_roundtrip(tmp_path):
    cfg = tiny_config(total_epochs=1.0)
    records, state = run_with_state(cfg)
    path = tmp_path / "w.npz"
    save_weights(state, path)
    params, moving = load_weights(path)
    want = {p.name: p for p in state.params_per_replica[0]}
    assert {p.name for p in params} == set(want)
    for p in params:
        assert p.value.tobytes() == want[p.name].value.tobytes()
        assert p.tag == want[p.name].tag
    for lname, (mm, mv) in state.bn_moving_per_replica[0].items():
        assert moving[lname][0].tobytes() == mm.tobytes()
        assert moving[lname][1].tobytes() == mv.tobytes()


def test_config_validation_errors():
    with pytest.raises(ValueError, match="multiple"):
        tiny_config(num_replicas=3, global_batch=16)
    with pytest.raises(ValueError, match="divide"):
        tiny_config(num_replicas=8, global_batch=64, bn_group_size=3)
    with pytest.raises(ValueError, match="optimizer"):
        tiny_config(optimizer="adam")
    with pytest.raises(ValueError, match="tile"):
        tiny_config(bn_grouping="2d")
    with pytest.raises(ValueError, match="contradicts"):
        tiny_config(num_replicas=8, global_batch=64, bn_grouping="2d",
                    bn_group_size=8, grid_rows=2, grid_cols=4,
                    tile_rows=2, tile_cols=2)


def test_config_2d_grouping_assignment():
    cfg = tiny_config(num_replicas=8, global_batch=64, bn_grouping="2d",
                      bn_group_size=4, grid_rows=2, grid_cols=4,
                      tile_rows=2, tile_cols=2)
    asg = cfg.group_assignment()
    assert list(asg.members) == [(0, 1, 4, 5), (2, 3, 6, 7)]


def test_run_with_2d_groups_and_mixed_precision():
    cfg = tiny_config(num_replicas=8, global_batch=256, bn_grouping="2d",
                      bn_group_size=4, grid_rows=2, grid_cols=4,
                      tile_rows=2, tile_cols=2,
                      precision="mixed_bf16", total_epochs=0.5)
    records = run(cfg)
    assert all(math.isfinite(r.train_loss) for r in records)
    assert records[-1].train_loss < records[0].train_loss
    assert records[-1].eval_top1 is not None
    # tiled groups genuinely change BN statistics vs full-pod grouping
    full = run(tiny_config(num_replicas=8, global_batch=256, bn_group_size=8,
                           precision="mixed_bf16", total_epochs=0.5))
    assert records[0].train_loss != full[0].train_loss
