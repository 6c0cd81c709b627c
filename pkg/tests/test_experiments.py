from dataclasses import replace

import numpy as np
import pytest

from bhra.adapters import AdapterConfig, BlockGrid, param_count
from bhra.experiments import (
    RunRecord,
    ToyTaskSpec,
    aggregate,
    block_size_sweep,
    block_sweep_configs,
    build_teacher,
    figure1_probe,
    figure1_task,
    gini_experiment,
    gini_ordering_by_seed,
    gini_probe,
    heterogeneous_task,
    parse_config,
    run_training,
    spec_from_config,
    sweep,
    unimodal_with_interior_peak,
    warmup_lr,
)
from bhra.matrix_core import numeric_rank
from bhra.spectral import block_gini

SMALL = ToyTaskSpec(m=16, n=16, r0_target=4, train_steps=60, warmup_steps=10, seeds=(1, 2))


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyTaskSpec(r0_target=65)
    with pytest.raises(ValueError):
        ToyTaskSpec(teacher_block_profile=((0.0, 0.0), (0.0, 0.0)))
    with pytest.raises(ValueError):
        ToyTaskSpec(teacher_block_profile=((1.0, -1.0), (1.0, 1.0)))
    with pytest.raises(ValueError):
        ToyTaskSpec(m=10, teacher_block_profile=((1.0, 1.0, 1.0),) * 3)


def test_teacher_single_block_support():
    prof = tuple(tuple(1.0 if (i, j) == (1, 2) else 0.0 for j in range(4)) for i in range(4))
    spec = ToyTaskSpec(m=16, n=16, r0_target=4, teacher_block_profile=prof)
    frozen, target = build_teacher(spec, 3)
    planted = target - frozen.w0
    mask = np.zeros((16, 16), bool)
    mask[4:8, 8:12] = True
    assert not planted[~mask].any()
    assert np.abs(planted[mask]).sum() > 0


def test_teacher_rank_and_determinism():
    spec = ToyTaskSpec(m=12, n=12, r0_target=12)
    f1, t1 = build_teacher(spec, 5)
    f2, t2 = build_teacher(spec, 5)
    assert numeric_rank(f1.w0) == 12
    assert np.array_equal(t1, t2) and np.array_equal(f1.w0, f2.w0)
    assert numeric_rank(build_teacher(ToyTaskSpec(), 42)[0].w0) == 8
    assert not np.array_equal(build_teacher(spec, 6)[1], t1)


def test_warmup_schedule():
    assert warmup_lr(0, 1.0, 100) == pytest.approx(0.01)
    assert warmup_lr(99, 1.0, 100) == 1.0
    assert warmup_lr(500, 1.0, 100) == 1.0
    assert warmup_lr(0, 0.5, 0) == 0.5


def test_run_training_deterministic():
    cfg = AdapterConfig("bhra", 4, 2)
    a, b = run_training(SMALL, cfg, 7), run_training(SMALL, cfg, 7)
    assert a.losses == b.losses and a.final_loss == b.final_loss
    assert np.array_equal(a.delta, b.delta)
    assert a.report.stable_rank == b.report.stable_rank


@pytest.mark.parametrize("kind,b", [("lora", 1), ("hira", 1), ("abba", 1), ("bhra", 4)])
def test_training_reduces_loss_on_default_task(kind, b):
    spec = replace(ToyTaskSpec(), train_steps=300)
    rec = run_training(spec, AdapterConfig(kind, 8, b), 42)
    assert np.all(np.isfinite(rec.losses))
    assert rec.losses[-1] < rec.losses[0]
    assert rec.final_loss < rec.initial_loss


def test_tiny_teacher_leaves_adapter_near_base():
    prof = ((1e-12, 0.0), (0.0, 0.0))
    spec = replace(SMALL, teacher_block_profile=prof)
    rec = run_training(spec, AdapterConfig("lora", 4), 1)
    assert rec.losses[0] < 1e-20
    assert np.abs(rec.delta).max() < 1e-3


def test_default_task_fits_within_a_tenth():
    recs, rows = block_size_sweep(ToyTaskSpec(), 8, (1, 2, 4))
    for row in rows:
        assert row["median_final_loss"] <= 0.1 * np.median([r.initial_loss for r in recs])


def test_lora_worse_than_bhra_on_heterogeneous_teacher():
    spec = heterogeneous_task()
    recs = sweep(spec, [AdapterConfig("lora", 8), AdapterConfig("bhra", 8, 4)])
    med = {k: np.median([r.final_loss for r in recs if r.config["kind"] == k]) for k in ("lora", "bhra")}
    assert med["lora"] > med["bhra"]


def test_sweep_shapes_and_parity():
    recs = sweep(SMALL, [AdapterConfig("bhra", 4, 2)], seeds=(3,))
    assert len(recs) == 1 and recs[0].seed == 3
    cfgs = block_sweep_configs(4, (1, 2, 4))
    assert len({param_count(c, 16, 16) for c in cfgs}) == 1
    recs = sweep(SMALL, cfgs, max_workers=2)
    assert [(r.config["b"], r.seed) for r in recs] == [(b, s) for b in (1, 2, 4) for s in (1, 2)]
    with pytest.raises(ValueError):
        sweep(SMALL, [AdapterConfig("lora", 4), AdapterConfig("lora", 2)])


def test_sweep_threads_do_not_change_results():
    cfgs = block_sweep_configs(4, (1, 2))
    one = sweep(SMALL, cfgs, max_workers=1)
    many = sweep(SMALL, cfgs, max_workers=3)
    assert [r.final_loss for r in one] == [r.final_loss for r in many]


def test_sweep_records_failures_without_aborting():
    spec = replace(SMALL, learning_rate=1e200, warmup_steps=0)
    recs = sweep(spec, [AdapterConfig("lora", 4)])
    assert len(recs) == 2
    assert all(not r.ok and "diverged" in r.error for r in recs)
    row = aggregate(recs)[0]
    assert row["failed"] == 2 and np.isnan(row["median_final_loss"])


def test_aggregate_medians():
    recs = sweep(SMALL, [AdapterConfig("lora", 4)], seeds=(1, 2, 3))
    row = aggregate(recs)[0]
    assert row["runs"] == 3 and row["failed"] == 0
    assert row["median_final_loss"] == np.median([r.final_loss for r in recs])


def test_unimodal_helper():
    assert unimodal_with_interior_peak([0.5, 0.9, 0.8, 0.1]) == (True, 1)
    assert unimodal_with_interior_peak([0.5, 0.6, 0.9, 0.1]) == (True, 2)
    assert unimodal_with_interior_peak([0.9, 0.6, 0.5]) == (False, 0)
    assert unimodal_with_interior_peak([0.1, 0.6, 0.9]) == (False, 2)
    assert not unimodal_with_interior_peak([0.1, 0.9, 0.2, 0.5, 0.3])[0]


def test_figure1_untrained_control_is_zero():
    rows = figure1_probe(SMALL, (4,), train=False)
    assert len(rows) == 3
    assert all(r["mean_stable_rank"] == 0.0 for r in rows)


def test_gini_untrained_is_zero():
    spec = replace(SMALL, train_steps=0)
    recs, rows = gini_experiment(spec, 4, 2)
    assert all(r["block_gini"] == 0.0 for r in rows)


def test_single_block_teacher_concentrates_bhra():
    prof = tuple(tuple(4.0 if (i, j) == (0, 0) else 0.0 for j in range(4)) for i in range(4))
    spec = ToyTaskSpec(teacher_block_profile=prof, teacher_mask_rank=2, train_steps=1000)
    rec = run_training(spec, AdapterConfig("bhra", 8, 4), 42)
    assert block_gini(rec.delta, BlockGrid.square(4)) > 0.85  # (k - 1) / k = 0.9375


def test_gini_ordering_helper():
    rows = [
        {"kind": "lora", "seed": 1, "block_gini": 0.1, "final_loss": 3.0},
        {"kind": "hira", "seed": 1, "block_gini": 0.2, "final_loss": 2.0},
        {"kind": "bhra", "seed": 1, "block_gini": 0.3, "final_loss": 1.0},
    ]
    assert gini_ordering_by_seed(rows) == {1: {"gini_order": True, "bhra_beats_lora": True}}


def test_gini_probe_skips_failed_runs():
    bad = RunRecord({"kind": "lora"}, 1, [], float("nan"), float("nan"), 0, error="boom")
    assert gini_probe([bad], BlockGrid.square(2)) == []


def test_record_json_round_trip():
    import json

    rec = run_training(SMALL, AdapterConfig("hira", 4), 1)
    doc = json.loads(rec.to_json())
    assert doc["final_loss"] == rec.final_loss
    assert doc["report"]["stable_rank"] == rec.report.stable_rank
    assert len(doc["losses"]) == SMALL.train_steps


def test_config_parsing():
    text = """
    # comment
    preset = heterogeneous
    m = 32
    n = 32
    seeds = 1, 2
    learning_rate = 0.005
    r_tot = 8
    """
    cfg = parse_config(text)
    spec = spec_from_config(cfg)
    assert spec.m == 32 and spec.seeds == (1, 2) and spec.learning_rate == 0.005
    assert spec.teacher_global_offset == heterogeneous_task().teacher_global_offset
    prof = spec_from_config(parse_config("teacher_block_profile = 1, 2; 3, 4")).teacher_block_profile
    assert prof == ((1.0, 2.0), (3.0, 4.0))
    assert spec_from_config(parse_config("preset = figure1")) == figure1_task()
    with pytest.raises(ValueError):
        parse_config("no equals sign")
    with pytest.raises(ValueError):
        spec_from_config({"bogus": "1"})
    with pytest.raises(ValueError):
        spec_from_config({"preset": "nope"})
