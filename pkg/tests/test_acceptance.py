"""Release gates: each test pins one end-to-end quantitative promise.

The suite is intentionally heavier than the per-module tests. Gates 6
and 7 share one five-seed ablation sweep through a module fixture; the
rest run standalone. Every tolerance and time limit is asserted inline
so a `pytest -v` run reads as one pass/fail line per gate.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

import causalmil.diffmath as dm
import causalmil.evalmetrics as ev
import causalmil.milnet as mn
import causalmil.objectives as ob
import causalmil.scmgraph as sg
import causalmil.trainer as tr
from causalmil.bagio import (
    DemographicVector,
    FeatureBag,
    ScmConfig,
    SurvivalRecord,
    generate_cohort,
    read_bag,
    write_bag,
)
from causalmil.errors import FormatError
from causalmil.model import ModelConfig, forward_bag, init_model, save_model


# ---------------------------------------------------------------------------
# Gate 1: tape gradients of the full composite training loss


def _window_bags(rng: np.random.Generator, d: int, k: int) -> list[FeatureBag]:
    # Two bags per gender so the fairness term owns a nonzero gap.
    bags = []
    for i in range(4):
        values = np.zeros(8)
        values[i % 2] = 1.0
        values[2 + (i % 2) * 2] = 1.0
        values[7] = 0.1 + 0.25 * i
        bags.append(
            FeatureBag(
                bag_id=f"g1-{i}",
                features=rng.normal(size=(k, d)).astype(np.float32),
                label=i % 2,
                class_count=2,
                demographics=DemographicVector(values=values, mask=np.ones(8, dtype=bool)),
            )
        )
    return bags


def _window_loss(state, bags, pseudo_fixed, anchors, weights) -> dm.Tensor:
    """The trainer's per-window objective, rebuilt from live parameters.

    The consistency anchor is a stop-gradient target, so finite
    differences must see it as a constant: it is frozen at the value the
    unperturbed forward produced, which is exactly the function the tape
    differentiates.
    """
    per_bag = []
    buffer = ob.BatchFairnessBuffer(2)
    for bag, pseudo, anchor in zip(bags, pseudo_fixed, anchors):
        fw = forward_bag(state, bag, "train", rng=None)
        cls = ob.classification_loss(fw, bag.label, pseudo, weights)
        cons = dm.sum_sq(dm.sub(fw.z, dm.tensor(anchor)))
        causal = dm.add(
            cons,
            dm.smul(ob.demographic_reconstruction_loss(state.sem, fw), weights.demographic),
        )
        buffer.add(ob.bag_probabilities(fw), bag.demographics)
        per_bag.append(dm.add(cls, dm.smul(causal, weights.causal)))
    acc = per_bag[0]
    for t in per_bag[1:]:
        acc = dm.add(acc, t)
    loss = dm.smul(acc, 1.0 / len(per_bag))
    return dm.add(loss, dm.smul(ob.fairness_loss(buffer), weights.fairness))


def test_gate1_composite_loss_gradients_match_central_differences():
    rng = np.random.default_rng(41)
    bags = _window_bags(rng, d=8, k=4)
    weights = ob.LossWeights()
    start = time.perf_counter()
    for variant in ("collider", "fork", "direct", "concat"):
        cfg = ModelConfig(
            d=8, class_count=2, variant=variant, d_h=8, d_q=8,
            n_heads=2, layers=1, k_frac=0.5, dropout=0.0,
        )
        state = init_model(cfg, seed=17)
        pseudo_fixed, anchors = [], []
        for bag in bags:
            fw = forward_bag(state, bag, "train", rng=None)
            pseudo_fixed.append(mn.assign_pseudo_labels(fw.instance_logits.data, bag.label, cfg.k_frac).labels)
            anchors.append(fw.h_x.data.copy())
            base_cons = ob.consistency_loss(fw).item()
            frozen_cons = dm.sum_sq(dm.sub(fw.z, dm.tensor(fw.h_x.data.copy()))).item()
            assert abs(base_cons - frozen_cons) < 1e-12
        report = dm.gradcheck(
            lambda: _window_loss(state, bags, pseudo_fixed, anchors, weights),
            state.params, h=1e-4, rtol=1e-4,
        )
        assert report.max_rel_error < 1e-4, (
            f"{variant}: worst relative gradient error {report.max_rel_error:.3e}"
        )
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s (limit 60s)"


# ---------------------------------------------------------------------------
# Gate 2: metrics against brute-force oracles


def _auc_oracle(labels, scores) -> float | None:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = math.fsum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _gdv_oracle(per_group: dict[str, float]) -> float:
    vals = list(per_group.values())
    mean = math.fsum(vals) / len(vals)
    return math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))


def _c_index_oracle(risks, times, events) -> float | None:
    num, den = 0.0, 0
    n = len(risks)
    for i in range(n):
        for j in range(i + 1, n):
            if times[i] == times[j]:
                continue
            a, b = (i, j) if times[i] < times[j] else (j, i)
            if events[a] != 1:
                continue
            den += 1
            if risks[a] > risks[b]:
                num += 1.0
            elif risks[a] == risks[b]:
                num += 0.5
    return num / den if den else None


def _cox_oracle(risks, times, events) -> float:
    terms = []
    for i, e in enumerate(events):
        if e != 1:
            continue
        rs = [risks[j] for j in range(len(risks)) if times[j] >= times[i]]
        m = max(rs)
        terms.append(risks[i] - (m + math.log(math.fsum(math.exp(r - m) for r in rs))))
    return -math.fsum(terms)


def _fairness_oracle(probs_by_group: dict[str, dict[int, list[list[float]]]], class_count: int) -> float:
    classes = [1] if class_count == 2 else list(range(class_count))
    scale = 1.0 if class_count == 2 else 1.0 / class_count
    total = 0.0
    for groups in probs_by_group.values():
        if len(groups) < 2:
            continue
        for c in classes:
            means = [math.fsum(p[c] for p in members) / len(members) for _, members in sorted(groups.items())]
            for i in range(len(means)):
                for j in range(i + 1, len(means)):
                    total += scale * (means[i] - means[j]) ** 2
    return total


def test_gate2_metrics_match_bruteforce_oracles():
    rng = np.random.default_rng(7)

    for _ in range(120):  # AUC with forced ties
        n = int(rng.integers(5, 40))
        labels = rng.integers(0, 2, size=n)
        scores = np.round(rng.normal(size=n), 1)
        mine, ref = ev.auc_binary(labels.tolist(), scores.tolist()), _auc_oracle(labels, scores)
        assert (mine is None) == (ref is None)
        if mine is not None:
            assert abs(mine - ref) < 1e-10

    for _ in range(120):  # disparity
        groups = {f"g{i}": float(rng.uniform(0, 1)) for i in range(int(rng.integers(1, 7)))}
        assert abs(ev.gdv(groups) - _gdv_oracle(groups)) < 1e-10

    for _ in range(120):  # concordance, with tied times and tied risks
        n = int(rng.integers(4, 20))
        risks = np.round(rng.normal(size=n), 1).tolist()
        times = rng.integers(1, 8, size=n).astype(float).tolist()
        events = rng.integers(0, 2, size=n).tolist()
        mine = ev.c_index(risks, times, events)
        ref = _c_index_oracle(risks, times, events)
        assert (mine is None) == (ref is None)
        if mine is not None:
            assert abs(mine - ref) < 1e-10

    for _ in range(120):  # proportional-hazards likelihood
        n = int(rng.integers(2, 12))
        risks = rng.normal(size=n).tolist()
        times = rng.integers(1, 6, size=n).astype(float).tolist()
        events = rng.integers(0, 2, size=n).tolist()
        if not any(events):
            events[int(rng.integers(0, n))] = 1
        mine = ob.cox_partial_likelihood([dm.tensor([[r]]) for r in risks], times, events)
        assert abs(mine.item() - _cox_oracle(risks, times, events)) < 1e-10

    ages = (0.05, 0.95)  # first and last age bin
    for _ in range(120):  # fairness window penalty
        class_count = int(rng.integers(2, 4))
        buffer = ob.BatchFairnessBuffer(class_count)
        book: dict[str, dict[int, list[list[float]]]] = {"gender": {}, "race": {}, "age": {}}
        for _ in range(int(rng.integers(2, 10))):
            p = rng.dirichlet(np.ones(class_count)).tolist()
            g, r, a = int(rng.integers(0, 2)), int(rng.integers(0, 2)), int(rng.integers(0, 2))
            values = np.zeros(8)
            values[g] = 1.0
            values[2 + r] = 1.0
            values[7] = ages[a]
            buffer.add(dm.tensor([p]), DemographicVector(values=values, mask=np.ones(8, dtype=bool)))
            for attr, key in (("gender", g), ("race", r), ("age", a)):
                book[attr].setdefault(key, []).append(p)
        mine = ob.fairness_loss(buffer).item()
        assert abs(mine - _fairness_oracle(book, class_count)) < 1e-10


# ---------------------------------------------------------------------------
# Gate 3: masked attention soundness and the train/eval adjacency split


def test_gate3_masks_exact_and_adjacency_split_holds():
    collider = sg.build_adjacency("collider")
    assert np.array_equal(
        collider.mask("train"), np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=bool)
    )
    assert np.array_equal(
        collider.mask("eval"), np.array([[1, 0, 0], [0, 1, 0], [1, 1, 1]], dtype=bool)
    )

    states = {
        v: init_model(
            ModelConfig(d=6, class_count=2, variant=v, d_h=8, d_q=4,
                        n_heads=2, layers=1, k_frac=1.0, dropout=0.0),
            seed=23,
        )
        for v in ("collider", "fork", "direct")
    }
    rng = np.random.default_rng(29)
    variants = ("collider", "fork", "direct")
    for i in range(1000):
        variant = variants[int(rng.integers(0, 3))]
        mode = "train" if rng.integers(0, 2) else "eval"
        spec = sg.build_adjacency(variant)
        mask = spec.mask(mode)
        scale = float(10.0 ** rng.integers(-1, 4))
        scores = dm.tensor(rng.normal(size=(3, 3)) * scale)
        alpha = dm.masked_softmax_rows(scores, mask)
        assert (alpha.data[~mask] == 0.0).all(), f"pass {i}: leak through masked edge"
        assert np.allclose(alpha.data.sum(axis=1), 1.0, atol=1e-12)

        state = states[variant]
        nodes = (
            dm.tensor(rng.normal(size=(1, 8)) * scale),
            dm.tensor(rng.normal(size=(1, 8)) * scale),
            state.sem.z_init,
        )
        sg.graph_pass(state.sem, spec, nodes, mode)  # internal tripwire must stay quiet


# ---------------------------------------------------------------------------
# Gate 4: the demographics-blind variant attributes exactly nothing


def test_gate4_fork_attribution_identically_zero():
    cohort = generate_cohort(ScmConfig(seed=11, n_bags=150, k=6, dim=12, gamma=0.5, sigma=0.5))
    state = init_model(
        ModelConfig(d=12, class_count=2, variant="fork", d_h=16, d_q=8,
                    n_heads=2, layers=1, k_frac=0.5, dropout=0.3),
        seed=4,
    )
    for bag in cohort.bags:
        assert ev.attribution_total(state, bag) == 0.0
        for attribute in ("gender", "race", "age"):
            assert ev.attribution_factor(state, bag, attribute) == 0.0


# ---------------------------------------------------------------------------
# Gate 5: clean separable cohort trains to high accuracy, fast


def test_gate5_clean_cohort_reaches_95_accuracy():
    start = time.perf_counter()
    cohort = generate_cohort(
        ScmConfig(seed=0, n_bags=500, k=32, dim=64, rho=0.7, gamma=0.0, sigma=0.25)
    )
    cfg = tr.TrainConfig(
        variant="collider", epochs=8, patience=8, d_h=32, d_q=16, n_heads=2,
        k_frac=0.2, base_lr=1e-3, dropout=0.1, seed=0,
    )
    result = tr.train(cohort, cfg)
    report, _ = tr.evaluate(result.state, cohort, "test")
    elapsed = time.perf_counter() - start
    assert len(result.log) <= 20
    assert report.acc >= 0.95, f"test accuracy {report.acc:.3f} below 0.95"
    assert elapsed < 180.0, f"took {elapsed:.0f}s (limit 180s)"


# ---------------------------------------------------------------------------
# Gates 6 and 7: five-seed structure ablation on one confounded cohort


ABLATION_COHORT = ScmConfig(seed=100, n_bags=800, k=8, dim=16, rho=0.5, gamma=0.5, sigma=0.45)
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def _ablation_config(variant: str, lambda_fair: float, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(
        variant=variant, epochs=14, patience=14, d_h=32, d_q=16, n_heads=2,
        k_frac=0.3, base_lr=1e-3, dropout=0.1, seed=seed, accumulation_steps=4,
        fairness_enabled=lambda_fair > 0, lambda_fair=lambda_fair,
    )


@pytest.fixture(scope="module")
def ablation_table():
    cohort = generate_cohort(ABLATION_COHORT)
    table = {}
    for variant, lam in (
        ("collider", 0.05), ("collider", 0.0),
        ("concat", 0.05), ("direct", 0.05), ("fork", 0.05),
    ):
        accs, gdvs = [], []
        for seed in ABLATION_SEEDS:
            result = tr.train(cohort, _ablation_config(variant, lam, seed))
            report, _ = tr.evaluate(result.state, cohort, "test")
            accs.append(report.acc)
            gdvs.append(report.gdv["gender"])
        table[(variant, lam)] = (float(np.mean(accs)), float(np.mean(gdvs)))
    return table


def test_gate6_collider_fairness_ordering_on_confounded_cohort(ablation_table):
    coll_acc, coll_gdv = ablation_table[("collider", 0.05)]
    conc_acc, conc_gdv = ablation_table[("concat", 0.05)]
    _, direct_gdv = ablation_table[("direct", 0.05)]
    _, fork_gdv = ablation_table[("fork", 0.05)]
    gates = {
        f"gdv ratio: collider {coll_gdv:.4f} <= 0.6 x concat {conc_gdv:.4f}":
            coll_gdv <= 0.6 * conc_gdv,
        f"accuracy: collider {coll_acc:.3f} >= concat {conc_acc:.3f} - 0.02":
            coll_acc >= conc_acc - 0.02,
        f"ordering: collider {coll_gdv:.4f} < direct {direct_gdv:.4f}":
            coll_gdv < direct_gdv,
        f"ordering: fork {fork_gdv:.4f} >= collider {coll_gdv:.4f}":
            fork_gdv >= coll_gdv,
    }
    failed = [msg for msg, ok in gates.items() if not ok]
    assert not failed, "; ".join(failed)


def test_gate7_fairness_term_does_not_worsen_disparity(ablation_table):
    _, with_fair = ablation_table[("collider", 0.05)]
    _, without = ablation_table[("collider", 0.0)]
    assert with_fair <= without, (
        f"gender disparity {with_fair:.4f} with the fairness term vs {without:.4f} without"
    )


# ---------------------------------------------------------------------------
# Gate 8: survival training reaches usable concordance


def test_gate8_survival_concordance_at_least_060():
    start = time.perf_counter()
    cohort = generate_cohort(
        ScmConfig(seed=200, n_bags=400, k=8, dim=16, rho=0.5, gamma=0.5, sigma=0.45, survival=True)
    )
    cs = []
    for seed in ABLATION_SEEDS:
        cfg = tr.TrainConfig(
            variant="collider", survival=True, epochs=14, patience=14, d_h=32, d_q=16,
            n_heads=2, k_frac=0.3, base_lr=1e-3, dropout=0.1, seed=seed,
        )
        result = tr.train(cohort, cfg)
        report, _ = tr.evaluate(result.state, cohort, "test")
        assert report.c_index is not None
        cs.append(report.c_index)
    elapsed = time.perf_counter() - start
    assert float(np.mean(cs)) >= 0.60, f"mean c-index {np.mean(cs):.4f} below 0.60"
    assert elapsed < 300.0, f"took {elapsed:.0f}s (limit 300s)"


# ---------------------------------------------------------------------------
# Gate 9: training is bitwise deterministic


def test_gate9_same_seed_training_is_bitwise_identical(tmp_path):
    cohort = generate_cohort(ScmConfig(seed=3, n_bags=40, k=4, dim=8, rho=1.0, gamma=0.0, sigma=0.2))
    cfg = tr.TrainConfig(
        variant="collider", epochs=3, patience=3, d_h=16, d_q=8, n_heads=2,
        k_frac=0.5, base_lr=1e-3, dropout=0.3, seed=9,
    )
    blobs, logs = [], []
    for run in range(2):
        result = tr.train(cohort, cfg)
        ckpt = tmp_path / f"run{run}.mckp"
        save_model(result.state, ckpt)
        blobs.append(ckpt.read_bytes())
        log_path = tmp_path / f"run{run}.jsonl"
        tr.write_log_jsonl(result.log, log_path)
        logs.append(log_path.read_bytes())
    assert blobs[0] == blobs[1], "checkpoints differ between identical runs"
    assert logs[0] == logs[1], "training logs differ between identical runs"


# ---------------------------------------------------------------------------
# Gate 10: the bag format survives 1,000 round trips and rejects corruption


def _random_bag(rng: np.random.Generator, i: int) -> FeatureBag:
    k = int(rng.integers(1, 12))
    d = int(rng.integers(1, 16))
    features = (rng.normal(size=(k, d)) * 10.0 ** rng.integers(-6, 7)).astype(np.float32)
    values, mask = np.zeros(8), np.zeros(8, dtype=bool)
    if rng.integers(0, 2):
        values[int(rng.integers(0, 2))] = 1.0
        mask[0:2] = True
    if rng.integers(0, 2):
        values[2 + int(rng.integers(0, 5))] = 1.0
        mask[2:7] = True
    if rng.integers(0, 2):
        values[7] = float(rng.uniform(0, 1))
        mask[7] = True
    survival = None
    if rng.integers(0, 2):
        survival = SurvivalRecord(time=float(rng.uniform(0.1, 50.0)), event=int(rng.integers(0, 2)))
    class_count = int(rng.integers(2, 5))
    return FeatureBag(
        bag_id=f"bag-{i}-β",
        features=features,
        label=int(rng.integers(0, class_count)),
        class_count=class_count,
        demographics=DemographicVector(values=values, mask=mask),
        survival=survival,
    )


def test_gate10_thousand_bag_roundtrip_and_crc_detection(tmp_path):
    rng = np.random.default_rng(31)
    for i in range(1000):
        bag = _random_bag(rng, i)
        path = tmp_path / f"{bag.bag_id}.bag"
        write_bag(bag, path)
        back = read_bag(path)
        assert back.bag_id == bag.bag_id
        assert back.features.tobytes() == bag.features.tobytes()
        assert back.features.shape == bag.features.shape
        assert back.label == bag.label and back.class_count == bag.class_count
        assert back.demographics.values.tobytes() == bag.demographics.values.tobytes()
        assert np.array_equal(back.demographics.mask, bag.demographics.mask)
        if bag.survival is None:
            assert back.survival is None
        else:
            assert back.survival.time == bag.survival.time
            assert back.survival.event == bag.survival.event

    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    corrupt = tmp_path / "corrupt.bag"
    corrupt.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_bag(corrupt)
