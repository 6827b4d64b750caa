"""Training-loop behavior: stopping, accumulation, determinism, failure modes."""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

import causalmil.trainer as tr
from causalmil.bagio import (
    Cohort,
    DemographicVector,
    FeatureBag,
    ScmConfig,
    SurvivalRecord,
    drop_demographics,
    generate_cohort,
)
from causalmil.errors import ConfigError, NumericError
from causalmil.model import default_neutral_demographics


SMALL = dict(d_h=16, d_q=8, n_heads=2, k_frac=0.5)


def tiny_cohort(seed=0, n_bags=40, survival=False, gamma=0.0):
    return generate_cohort(
        ScmConfig(
            seed=seed,
            n_bags=n_bags,
            k=4,
            dim=8,
            rho=1.0,
            gamma=gamma,
            sigma=0.2,
            survival=survival,
        )
    )


# ---------------------------------------------------------------------------
# Config


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(accumulation_steps=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(lambda_fair=-0.1)


def test_train_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="momentum"):
        tr.TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    cfg = tr.TrainConfig.from_dict({"epochs": 3, "lambda_fair": 0.2})
    assert cfg.epochs == 3 and cfg.lambda_fair == 0.2


def test_train_config_weight_and_model_mapping():
    cfg = tr.TrainConfig(lambda_causal=0.3, lambda_fair=0.2, lambda_ins=0.4, lambda_demo=0.6)
    w = cfg.weights()
    assert (w.causal, w.fairness, w.instance, w.demographic) == (0.3, 0.2, 0.4, 0.6)
    mc = tr.TrainConfig(variant="direct", d_h=32, d_q=16, n_heads=4).model_config(12, 3)
    assert (mc.d, mc.class_count, mc.variant, mc.d_h) == (12, 3, "direct", 32)


# ---------------------------------------------------------------------------
# Early stopping


def test_constant_metric_stops_after_patience():
    # A learning rate this small cannot move any weight by even one ulp,
    # so the validation metric is frozen and patience=1 fires at epoch 2.
    cohort = tiny_cohort(seed=3)
    cfg = tr.TrainConfig(
        epochs=10, patience=1, base_lr=1e-30, eta_min=0.0, dropout=0.0, seed=1, **SMALL
    )
    result = tr.train(cohort, cfg)
    assert len(result.log) == 2
    assert result.best_epoch == 1
    metrics = [r.val_auc if r.val_auc is not None else r.val_acc for r in result.log]
    assert metrics[0] == metrics[1]


def test_best_metric_is_running_max_of_epoch_metrics():
    cohort = tiny_cohort(seed=5)
    cfg = tr.TrainConfig(epochs=6, patience=10, base_lr=3e-3, dropout=0.1, seed=2, **SMALL)
    result = tr.train(cohort, cfg)
    metrics = [r.val_auc if r.val_auc is not None else r.val_acc for r in result.log]
    assert result.best_metric == max(metrics)
    assert metrics[result.best_epoch - 1] == result.best_metric


# ---------------------------------------------------------------------------
# Accumulation semantics


def test_window_average_matches_single_bag_steps():
    # One distinct training bag stepped alone vs the same bag duplicated to
    # fill a 4-wide window: averaged window gradients equal the single-bag
    # gradient up to float addition order, so the trajectories agree to
    # near machine precision (not bitwise).
    base = tiny_cohort(seed=7, n_bags=10)
    train_bag = base.split_bags("train")[0]
    val_bag = base.split_bags("val")[0]
    solo = Cohort(bags=[train_bag, val_bag], splits=["train", "val"], class_count=2)
    copies = [replace(train_bag, bag_id=f"copy{i}") for i in range(4)]
    quad = Cohort(bags=copies + [val_bag], splits=["train"] * 4 + ["val"], class_count=2)

    cfg = dict(epochs=3, patience=10, base_lr=1e-3, dropout=0.0, seed=4, **SMALL)
    r_solo = tr.train(solo, tr.TrainConfig(accumulation_steps=1, **cfg))
    r_quad = tr.train(quad, tr.TrainConfig(accumulation_steps=4, **cfg))
    for name, p in r_solo.state.params.items():
        np.testing.assert_allclose(
            p.data, r_quad.state.params[name].data, rtol=1e-9, atol=1e-12, err_msg=name
        )


def test_fixed_seed_reproduces_bitwise():
    cohort = tiny_cohort(seed=11)
    cfg = tr.TrainConfig(epochs=3, patience=10, base_lr=1e-3, dropout=0.3, seed=9, **SMALL)
    a = tr.train(cohort, cfg)
    b = tr.train(cohort, cfg)
    for name, p in a.state.params.items():
        np.testing.assert_array_equal(p.data, b.state.params[name].data, err_msg=name)
    np.testing.assert_array_equal(a.state.neutral_u, b.state.neutral_u)
    assert a.best_epoch == b.best_epoch
    assert a.best_metric == b.best_metric
    dicts_a = [{**r.to_dict(), "seconds": 0.0} for r in a.log]
    dicts_b = [{**r.to_dict(), "seconds": 0.0} for r in b.log]
    assert dicts_a == dicts_b


def test_loss_decreases_on_separable_cohort():
    cohort = tiny_cohort(seed=13, n_bags=30)
    cfg = tr.TrainConfig(epochs=8, patience=10, base_lr=3e-3, dropout=0.0, seed=0, **SMALL)
    result = tr.train(cohort, cfg)
    assert result.log[-1].loss_total < result.log[0].loss_total
    assert all(r.loss_fair is not None and r.loss_fair >= 0.0 for r in result.log)
    assert all(r.loss_cls is not None for r in result.log)


def test_fairness_can_be_disabled():
    cohort = tiny_cohort(seed=13, n_bags=20)
    cfg = tr.TrainConfig(
        epochs=2, patience=10, base_lr=1e-3, dropout=0.0, seed=0, fairness_enabled=False, **SMALL
    )
    result = tr.train(cohort, cfg)
    assert all(r.loss_fair is None for r in result.log)


# ---------------------------------------------------------------------------
# Failure modes


def test_non_finite_features_abort_with_bag_id():
    cohort = tiny_cohort(seed=17, n_bags=12)
    victim = cohort.split_bags("train")[2]
    victim.features[0, 0] = np.nan
    cfg = tr.TrainConfig(epochs=1, base_lr=1e-3, dropout=0.0, seed=0, **SMALL)
    with pytest.raises(NumericError) as excinfo:
        tr.train(cohort, cfg)
    assert victim.bag_id in str(excinfo.value)
    assert excinfo.value.bag_id == victim.bag_id


def test_empty_split_rejected():
    base = tiny_cohort(seed=3, n_bags=10)
    bags = base.split_bags("train")
    no_val = Cohort(bags=bags, splits=["train"] * len(bags), class_count=2)
    with pytest.raises(ConfigError):
        tr.train(no_val, tr.TrainConfig(epochs=1, **SMALL))


# ---------------------------------------------------------------------------
# Survival mode


def test_survival_training_smoke():
    cohort = tiny_cohort(seed=19, n_bags=40, survival=True)
    cfg = tr.TrainConfig(
        epochs=2, patience=10, base_lr=1e-3, dropout=0.0, seed=1, survival=True, **SMALL
    )
    result = tr.train(cohort, cfg)
    assert all(r.loss_cls is None and r.loss_fair is None for r in result.log)
    assert all(np.isfinite(r.loss_total) for r in result.log)
    assert result.log[0].val_c_index is not None
    report, records = tr.evaluate(result.state, cohort, "test")
    assert report.c_index is not None
    assert all(r.predicted_label is None and r.probabilities == () for r in records)
    assert all(r.risk is not None for r in records)


def test_survival_all_censored_windows_skip_hazard_term():
    base = tiny_cohort(seed=19, n_bags=12, survival=True)
    bags = [
        replace(b, survival=SurvivalRecord(time=b.survival.time, event=0)) for b in base.bags
    ]
    cohort = Cohort(bags=bags, splits=list(base.splits), class_count=2)
    cfg = tr.TrainConfig(epochs=1, base_lr=1e-3, dropout=0.0, seed=1, survival=True, **SMALL)
    result = tr.train(cohort, cfg)  # must not raise despite zero events
    assert np.isfinite(result.log[0].loss_total)
    assert result.log[0].val_c_index is None
    assert result.best_metric == 0.0


def test_survival_mode_requires_survival_records():
    cohort = tiny_cohort(seed=19, n_bags=12, survival=False)
    cfg = tr.TrainConfig(epochs=1, survival=True, **SMALL)
    with pytest.raises(ConfigError, match="survival"):
        tr.train(cohort, cfg)


# ---------------------------------------------------------------------------
# Evaluate


def test_evaluate_deterministic_and_empty_split_rejected():
    cohort = tiny_cohort(seed=23, n_bags=16)
    cfg = tr.TrainConfig(epochs=1, base_lr=1e-3, seed=0, **SMALL)
    result = tr.train(cohort, cfg)
    rep1, rec1 = tr.evaluate(result.state, cohort, "test")
    rep2, rec2 = tr.evaluate(result.state, cohort, "test")
    assert rec1 == rec2
    assert rep1.to_dict() == rep2.to_dict()
    only_train = Cohort(
        bags=cohort.split_bags("train"),
        splits=["train"] * len(cohort.split_bags("train")),
        class_count=2,
    )
    with pytest.raises(ConfigError, match="empty"):
        tr.evaluate(result.state, only_train, "val")


def test_evaluate_with_no_demographics_keeps_accuracy():
    cohort = tiny_cohort(seed=23, n_bags=16)
    cfg = tr.TrainConfig(epochs=1, base_lr=1e-3, seed=0, **SMALL)
    result = tr.train(cohort, cfg)
    blinded = drop_demographics(cohort, 1.0, np.random.default_rng(0))
    report, records = tr.evaluate(result.state, blinded, "test")
    assert report.acc is not None
    assert all(v is None for v in report.gdv.values())
    assert all(r.gender == "" and r.race == "" and r.age_bin == "" for r in records)


def test_evaluate_with_attribution_fills_attribution_fields():
    cohort = tiny_cohort(seed=23, n_bags=16)
    cfg = tr.TrainConfig(epochs=1, base_lr=1e-3, seed=0, **SMALL)
    result = tr.train(cohort, cfg)
    report, _ = tr.evaluate(result.state, cohort, "val", with_attribution=True)
    assert report.attribution_mean is not None and report.attribution_mean >= 0.0
    assert set(report.attribution_factors) == {"gender", "race", "age"}


# ---------------------------------------------------------------------------
# Neutral demographics


def _bag_with(demo, bag_id):
    return FeatureBag(
        bag_id=bag_id,
        features=np.zeros((2, 3), dtype=np.float32),
        label=0,
        class_count=2,
        demographics=demo,
    )


def test_neutral_from_bags_blockwise_means_and_defaults():
    a = DemographicVector.make(0, 1, 30.0)
    b = DemographicVector.make(1, 1, 65.0)
    for demo in (a, b):
        demo.mask[2:7] = False  # race unobserved everywhere
    u = tr.neutral_from_bags([_bag_with(a, "a"), _bag_with(b, "b")])
    np.testing.assert_allclose(u[0:2], [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(u[2:7], default_neutral_demographics()[2:7], rtol=1e-15)
    np.testing.assert_allclose(u[7], ((30 - 20) / 70 + (65 - 20) / 70) / 2.0, rtol=1e-12)


def test_neutral_from_bags_empty_uses_defaults():
    np.testing.assert_array_equal(tr.neutral_from_bags([]), default_neutral_demographics())


# ---------------------------------------------------------------------------
# Log serialization


def test_write_log_jsonl_round_trip(tmp_path):
    cohort = tiny_cohort(seed=29, n_bags=12)
    cfg = tr.TrainConfig(epochs=2, base_lr=1e-3, seed=0, **SMALL)
    result = tr.train(cohort, cfg)
    path = tmp_path / "log.jsonl"
    tr.write_log_jsonl(result.log, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(result.log)
    for line, rec in zip(lines, result.log):
        want = {k: v for k, v in rec.to_dict().items() if k != "seconds"}
        assert json.loads(line) == want  # timing is kept out of the file
