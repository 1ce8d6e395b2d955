import csv
import io
import json
import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from molan.data import ConfigError, GeneratorConfig, collate, generate
from molan.experiments import (
    AdamWState,
    TrainConfig,
    TrainingError,
    adamw_step,
    aggregate,
    alignment_report,
    alignment_scores,
    block_candidates,
    block_sweep,
    evaluate,
    mask_sweep,
    run_ablations,
    sigma_map_csv,
    sigma_map_export,
    train,
)
from molan.model import compute_loss, forward, init, make_variant
from molan.numerics import DomainError, Parameter

from conftest import TINY_SHAPES, tiny_model_config

VARIANTS = ("full", "no_DE", "no_MB", "no_NC", "no_DC")


@pytest.fixture(scope="module")
def tiny_splits():
    return generate(GeneratorConfig(data_seed=5, n_train=24, n_val=8, n_test=12, **TINY_SHAPES))


# -- AdamW ---------------------------------------------------------------


def _scalar_step(w, g, lr, wd=0.0):
    p = Parameter("w", np.array([w]))
    adamw_step([p], [np.array([g])], AdamWState(), TrainConfig(lr=lr, weight_decay=wd))
    return p.data[0]


def test_adamw_single_step_oracle():
    # m_hat = v_hat = 1 after one step, so the update is lr / (1 + eps)
    assert _scalar_step(1.0, 1.0, 0.1) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert abs(_scalar_step(1.0, 1.0, 0.1) - 0.9) < 1e-8


def test_adamw_three_step_trace_matches_hand_stepped_adam():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [1.0, -2.0, 0.5]
    w, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = Parameter("w", np.array([0.3]))
    state, cfg = AdamWState(), TrainConfig(lr=lr, weight_decay=0.0)
    for g in grads:
        adamw_step([p], [np.array([g])], state, cfg)
    assert abs(p.data[0] - w) < 1e-15
    assert state.step == 3


def test_adamw_decoupled_decay_factor():
    p = Parameter("w", np.array([2.0, -1.0]))
    state, cfg = AdamWState(), TrainConfig(lr=0.1, weight_decay=0.01)
    for k in range(1, 4):
        adamw_step([p], [np.zeros(2)], state, cfg)
        assert np.allclose(p.data, np.array([2.0, -1.0]) * (1 - 0.1 * 0.01) ** k, rtol=0, atol=1e-15)


def test_adamw_zero_grads_no_decay_is_identity():
    p = Parameter("w", np.array([[0.5, -3.0]]))
    adamw_step([p], [None], AdamWState(), TrainConfig(weight_decay=0.0))
    assert np.array_equal(p.data, np.array([[0.5, -3.0]]))


def test_adamw_rejects_non_finite_gradient():
    p = Parameter("encoder.text.weight", np.ones(2))
    with pytest.raises(TrainingError, match="encoder.text.weight"):
        adamw_step([p], [np.array([1.0, np.nan])], AdamWState(), TrainConfig())


# -- training ------------------------------------------------------------


def test_zero_epochs_leaves_model_unchanged(tiny_splits):
    model = init(tiny_model_config(), 3)
    before = model.checksum()
    record = train(model, tiny_splits, TrainConfig(epochs=0))
    assert record.checksum == before == model.checksum()
    assert record.epochs == []


def test_tiny_dataset_is_optimizable():
    splits = generate(GeneratorConfig(data_seed=8, n_train=8, n_val=0, n_test=0, **TINY_SHAPES))
    model = init(tiny_model_config(), 1)
    batch = collate(splits["train"])
    initial = compute_loss(model, batch).task.item()
    train(model, splits, TrainConfig(epochs=200, batch_size=4, patience=200, lr=3e-3))
    assert compute_loss(model, batch).task.item() < 0.5 * initial


def test_training_is_deterministic(tiny_splits):
    cfg = TrainConfig(epochs=3, batch_size=8, seed=2)
    a = train(init(tiny_model_config(), 2), tiny_splits, cfg)
    b = train(init(tiny_model_config(), 2), tiny_splits, cfg)
    assert a.checksum == b.checksum
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert d["version"] and d["config"]["seed"] == 2
    assert "wall_time" not in d and "wall_time" in a.to_dict()


def test_training_rejects_empty_split():
    with pytest.raises(TrainingError):
        train(init(tiny_model_config(), 1), {"train": []}, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    assert TrainConfig(seed=3, seeds=2).seed_list() == [3, 4]


# -- aggregation and ablations -------------------------------------------


def test_aggregate_is_order_independent():
    rng = np.random.default_rng(0)
    vals = list(rng.normal(size=7) * 1e3)
    ref = aggregate(vals)
    for _ in range(10):
        assert aggregate(list(rng.permutation(vals))) == ref
    assert ref["std"] == pytest.approx(statistics.stdev(vals), rel=1e-12)
    assert aggregate([]) == {"mean": None, "std": None, "n": 0}


def test_ablation_table_shape(tiny_splits):
    table = run_ablations(tiny_splits, tiny_model_config(), TrainConfig(epochs=1, batch_size=8, seeds=2))
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["variant", "seed_1", "seed_2", "mean", "std"]
    assert [r[0] for r in rows[1:]] == list(VARIANTS)
    assert all(len(table.values[v]) == 2 for v in VARIANTS)
    for rec in table.records["no_DC"]:
        assert all(e["contrast_v"] == 0.0 and e["contrast_a"] == 0.0 for e in rec.epochs)
    assert set(table.summary()) == set(VARIANTS)


def test_ablation_variants_share_initial_parameters(tiny_splits):
    table = run_ablations(tiny_splits, tiny_model_config(), TrainConfig(epochs=0, seeds=1))
    # no_MB changes the visual block width and hence its projection shape
    checks = {v: table.records[v][0].checksum for v in VARIANTS if v != "no_MB"}
    assert len(set(checks.values())) == 1


# -- pilot masking -------------------------------------------------------


def test_mask_ratio_zero_reproduces_unmasked_evaluation(tiny_splits):
    model = init(tiny_model_config(), 4)
    rows = mask_sweep(model, tiny_splits["test"], [0.0, 0.5], ("audio", "visual"), repeats=2)
    assert rows[0]["acc2"] == evaluate(model, tiny_splits["test"]).acc2_has0
    assert [r["ratio"] for r in rows] == [0.0, 0.5]
    again = mask_sweep(model, tiny_splits["test"], [0.0, 0.5], ("audio", "visual"), repeats=2)
    assert again == rows


def test_mask_sweep_validation(tiny_splits):
    model = init(tiny_model_config(), 4)
    with pytest.raises(ConfigError):
        mask_sweep(model, tiny_splits["test"], [1.5])
    with pytest.raises(ConfigError):
        mask_sweep(model, tiny_splits["test"], [0.1], ("smell",))


# -- block sweep ---------------------------------------------------------


def test_block_candidates_include_optimum():
    cfg = tiny_model_config()
    sizes, optimum = block_candidates(cfg, {"visual": [[4, 3]], "audio": [9]})
    assert optimum["visual"] in sizes["visual"] and optimum["audio"] in sizes["audio"]
    assert sizes["visual"][0] == (4, 3)
    again, _ = block_candidates(cfg, {"visual": [list(optimum["visual"])]})
    assert again["visual"] == [optimum["visual"]]


def test_block_sweep_rows(tiny_splits):
    rows = block_sweep(tiny_splits, tiny_model_config(), TrainConfig(epochs=1, batch_size=8, seeds=1),
                       {"visual": [[4, 3]], "audio": [9]})
    assert len(rows) == 4
    assert sum(r["optimal"] for r in rows) == 2
    with pytest.raises(DomainError):
        block_sweep(tiny_splits, tiny_model_config(), TrainConfig(epochs=1, seeds=1), {"visual": [[5, 3]]})


def test_single_block_equals_uniform_denoising(tiny_splits):
    rows, cols = TINY_SHAPES["visual_steps"], TINY_SHAPES["visual_dim"]
    single = init(tiny_model_config(visual_block=[rows, cols], audio_block=TINY_SHAPES["audio_steps"]), 6)
    uniform = make_variant(single, "no_DE")
    batch = collate(tiny_splits["test"])
    a, b = forward(single, batch), forward(uniform, batch)
    for f in ("visual", "audio"):
        assert np.allclose(a.edited[f].sigma, b.edited[f].sigma, rtol=0, atol=1e-12)
    assert np.allclose(a.prediction.data, b.prediction.data, rtol=0, atol=1e-12)


# -- sigma maps ----------------------------------------------------------


def test_sigma_map_rows_and_range(tiny_splits, tmp_path):
    model = init(tiny_model_config(), 2)
    samples = tiny_splits["test"]
    path = sigma_map_export(model, samples, tmp_path / "sub" / "sigma.csv", config={"k": 1})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# molan ") and '"k":1' in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    pv, qv = model.plans["visual"].grid_rows, model.plans["visual"].grid_cols
    pa = model.plans["audio"].grid_rows * model.plans["audio"].grid_cols
    assert len(rows) == len(samples) * (pv * qv + pa)
    assert list(rows[0]) == ["sample_id", "modality", "p", "q", "sigma", "ground_truth_noise"]
    assert all(0.0 <= float(r["sigma"]) <= 1.0 for r in rows)
    assert sigma_map_csv(model, samples) == sigma_map_csv(model, samples)


# -- alignment -----------------------------------------------------------


def test_identity_rigged_editing_has_zero_alignment(tiny_splits):
    model = init(tiny_model_config(), 1)
    for f in ("visual", "audio"):
        for name in ("proj_block", "proj_text"):
            p = model.params[f"denoise.{f}.{name}"]
            p.assign(np.ones(p.shape))
    batch = collate(tiny_splits["test"])
    positive = batch.replace(**{k: np.abs(getattr(batch, k)) + 0.1 for k in ("text", "audio", "visual")})
    out = forward(model, positive)
    assert np.allclose(out.edited["visual"].sigma, 1.0, atol=1e-12)
    assert alignment_scores(model, positive)["alignment"] < 1e-20


def test_alignment_report_layout(tiny_splits):
    model = init(tiny_model_config(), 1)
    report = alignment_report(model, make_variant(model, "no_DC"), tiny_splits["test"])
    assert set(report) == {"full", "no_DC"}
    for scores in report.values():
        assert {"alignment", "uniformity"} <= set(scores)
        assert scores["alignment"] >= 0 and scores["uniformity"] <= 0
