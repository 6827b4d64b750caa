"""Training loop: windowed gradient accumulation, Adam with a cosine
schedule, early stopping on the validation metric, best-checkpoint keeping.

Each optimizer step covers one window of ``accumulation_steps`` bags.
Per-bag losses are averaged over the window (so the effective learning
rate matches single-bag training) and the fairness penalty, a group
statistic that needs several bags to exist, is computed once per
window and added on top. Survival mode swaps the classification terms
for a proportional-hazards likelihood over the window, normalized by
its event count; windows without events contribute no such term.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields

import numpy as np

from . import diffmath as dm
from . import evalmetrics as em
from . import milnet as mn
from . import objectives as ob
from .bagio import AGE_INDEX, ATTRIBUTES, Cohort, FeatureBag, GENDER_SLICE, RACE_SLICE
from .errors import ConfigError, NumericError
from .model import (
    ModelConfig,
    ModelState,
    default_neutral_demographics,
    forward_bag,
    init_model,
)
from .optim import OptimizerState, adam_step, cosine_lr

__all__ = [
    "TrainConfig",
    "TrainLogRecord",
    "TrainResult",
    "train",
    "evaluate",
    "neutral_from_bags",
    "write_log_jsonl",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs besides the cohort itself."""

    variant: str = "collider"
    epochs: int = 50
    accumulation_steps: int = 4
    patience: int = 10
    dropout: float = 0.3
    seed: int = 0
    lambda_causal: float = 0.1
    lambda_fair: float = 0.05
    lambda_ins: float = 0.5
    lambda_demo: float = 0.1
    d_h: int = 256
    d_q: int = 128
    n_heads: int = 4
    layers: int = 1
    k_frac: float = 0.1
    base_lr: float = 1e-4
    weight_decay: float = 1e-3
    eta_min: float = 1e-6
    sigma_unc: float = 0.5
    survival: bool = False
    fairness_enabled: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.accumulation_steps < 1:
            raise ConfigError(
                f"accumulation_steps must be >= 1, got {self.accumulation_steps}"
            )
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        for name in ("lambda_causal", "lambda_fair", "lambda_ins", "lambda_demo"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def weights(self) -> ob.LossWeights:
        return ob.LossWeights(
            causal=self.lambda_causal,
            fairness=self.lambda_fair,
            instance=self.lambda_ins,
            demographic=self.lambda_demo,
        )

    def model_config(self, d: int, class_count: int) -> ModelConfig:
        return ModelConfig(
            d=d,
            class_count=class_count,
            variant=self.variant,
            d_h=self.d_h,
            d_q=self.d_q,
            n_heads=self.n_heads,
            layers=self.layers,
            k_frac=self.k_frac,
            dropout=self.dropout,
            sigma_unc=self.sigma_unc,
            survival=self.survival,
        )


@dataclass(frozen=True)
class TrainLogRecord:
    """One epoch: mean loss components, validation metrics, lr, wall time."""

    epoch: int
    loss_cls: float | None
    loss_causal: float
    loss_demo: float
    loss_fair: float | None
    loss_total: float
    val_acc: float | None
    val_auc: float | None
    val_f1: float | None
    val_c_index: float | None
    lr: float
    seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_cls": self.loss_cls,
            "loss_causal": self.loss_causal,
            "loss_demo": self.loss_demo,
            "loss_fair": self.loss_fair,
            "loss_total": self.loss_total,
            "val_acc": self.val_acc,
            "val_auc": self.val_auc,
            "val_f1": self.val_f1,
            "val_c_index": self.val_c_index,
            "lr": self.lr,
            "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    state: ModelState
    log: list[TrainLogRecord]
    best_epoch: int
    best_metric: float


def neutral_from_bags(bags: list[FeatureBag]) -> np.ndarray:
    """Per-block demographic means over the bags that observe each block;
    blocks nobody observes keep the uninformative default."""
    u = default_neutral_demographics()
    blocks = {
        "gender": GENDER_SLICE,
        "race": RACE_SLICE,
        "age": slice(AGE_INDEX, AGE_INDEX + 1),
    }
    for attribute, block in blocks.items():
        observed = [
            b.demographics.values[block]
            for b in bags
            if b.demographics.block_observed(attribute)
        ]
        if observed:
            u[block] = np.mean(observed, axis=0)
    return u


def _require_finite(value: np.ndarray, what: str, bag_id: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite {what}", bag_id=bag_id)


def _snapshot(state: ModelState) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in state.params.items()}


def _restore(state: ModelState, snap: dict[str, np.ndarray]) -> None:
    for name, data in snap.items():
        state.params[name].data[...] = data


def train(cohort: Cohort, cfg: TrainConfig) -> TrainResult:
    """Run the full protocol and return the best-validation checkpoint.

    Deterministic for a fixed (cohort, cfg): one seeded generator drives
    initialization, another (derived from the same seed) drives epoch
    shuffling and dropout.
    """
    train_bags = cohort.split_bags("train")
    val_bags = cohort.split_bags("val")
    if not train_bags or not val_bags:
        raise ConfigError("train and val splits must both be nonempty")
    model_cfg = cfg.model_config(d=cohort.dim, class_count=cohort.class_count)
    state = init_model(model_cfg, cfg.seed)
    state.neutral_u = neutral_from_bags(train_bags)
    run_rng = np.random.default_rng([cfg.seed, 1])
    weights = cfg.weights()
    opt = OptimizerState(
        base_lr=cfg.base_lr,
        weight_decay=cfg.weight_decay,
        eta_min=cfg.eta_min,
        horizon=cfg.epochs,
    )
    log: list[TrainLogRecord] = []
    best_metric = -math.inf
    best_epoch = 0
    best_snap = _snapshot(state)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        lr = cosine_lr(opt, epoch - 1)
        order = run_rng.permutation(len(train_bags))
        sums = {"cls": 0.0, "causal": 0.0, "demo": 0.0, "total": 0.0}
        n_bags = 0
        fair_sum = 0.0
        n_windows = 0
        for start in range(0, len(order), cfg.accumulation_steps):
            window = [train_bags[i] for i in order[start : start + cfg.accumulation_steps]]
            with dm.GradTape() as tape:
                per_bag: list[dm.Tensor] = []
                buffer = ob.BatchFairnessBuffer(cohort.class_count)
                risks: list[dm.Tensor] = []
                times: list[float] = []
                events: list[int] = []
                for bag in window:
                    fw = forward_bag(state, bag, "train", rng=run_rng)
                    cons = ob.consistency_loss(fw)
                    recon = ob.demographic_reconstruction_loss(state.sem, fw)
                    causal = dm.add(cons, dm.smul(recon, weights.demographic))
                    if cfg.survival:
                        if bag.survival is None:
                            raise ConfigError(
                                f"bag {bag.bag_id!r} lacks survival data in survival mode"
                            )
                        risks.append(fw.logits)
                        times.append(bag.survival.time)
                        events.append(bag.survival.event)
                        total_i = dm.smul(causal, weights.causal)
                        cls_value = None
                    else:
                        pseudo = mn.assign_pseudo_labels(
                            fw.instance_logits.data, bag.label, cfg.k_frac
                        )
                        cls = ob.classification_loss(fw, bag.label, pseudo.labels, weights)
                        buffer.add(ob.bag_probabilities(fw), bag.demographics)
                        total_i = dm.add(cls, dm.smul(causal, weights.causal))
                        cls_value = cls.item()
                    _require_finite(total_i.data, "bag loss", bag.bag_id)
                    per_bag.append(total_i)
                    if cls_value is not None:
                        sums["cls"] += cls_value
                    sums["causal"] += cons.item()
                    sums["demo"] += recon.item()
                    n_bags += 1
                acc = per_bag[0]
                for t in per_bag[1:]:
                    acc = dm.add(acc, t)
                window_loss = dm.smul(acc, 1.0 / len(per_bag))
                if not cfg.survival and cfg.fairness_enabled:
                    fair = ob.fairness_loss(buffer)
                    fair_sum += fair.item()
                    n_windows += 1
                    window_loss = dm.add(window_loss, dm.smul(fair, weights.fairness))
                if cfg.survival and any(events):
                    cox = ob.cox_partial_likelihood(risks, times, events)
                    window_loss = dm.add(window_loss, dm.smul(cox, 1.0 / sum(events)))
                window_ids = ",".join(b.bag_id for b in window)
                _require_finite(window_loss.data, "window loss", window_ids)
                sums["total"] += window_loss.item() * len(per_bag)
                dm.backward(tape, window_loss)
            tape.clear()
            adam_step(opt, state.params, lr=lr)
            for t in state.params.values():
                t.grad = None
        report, _ = evaluate(state, cohort, "val")
        if cfg.survival:
            metric = report.c_index if report.c_index is not None else 0.0
        else:
            metric = report.auc if report.auc is not None else report.acc
        if metric > best_metric:
            if metric > best_metric + 1e-12:
                stale = 0
            best_metric = metric
            best_epoch = epoch
            best_snap = _snapshot(state)
        else:
            stale += 1
        log.append(
            TrainLogRecord(
                epoch=epoch,
                loss_cls=None if cfg.survival else sums["cls"] / n_bags,
                loss_causal=sums["causal"] / n_bags,
                loss_demo=sums["demo"] / n_bags,
                loss_fair=fair_sum / n_windows if n_windows else None,
                loss_total=sums["total"] / n_bags,
                val_acc=report.acc,
                val_auc=report.auc,
                val_f1=report.f1,
                val_c_index=report.c_index,
                lr=lr,
                seconds=time.perf_counter() - started,
            )
        )
        if stale >= cfg.patience:
            break
    _restore(state, best_snap)
    return TrainResult(state=state, log=log, best_epoch=best_epoch, best_metric=best_metric)


def evaluate(
    state: ModelState,
    cohort: Cohort,
    split: str,
    with_attribution: bool = False,
) -> tuple[em.EvalReport, list[em.PredictionRecord]]:
    """Deterministic eval-mode pass over one split: per-bag prediction
    records plus the assembled report. Attribution (two extra structural
    passes per bag) only when asked."""
    bags = cohort.split_bags(split)
    if not bags:
        raise ConfigError(f"split {split!r} is empty")
    records: list[em.PredictionRecord] = []
    for bag in bags:
        fw = forward_bag(state, bag, "eval")
        _require_finite(fw.logits.data, "logits", bag.bag_id)
        demo = bag.demographics
        common = {
            "bag_id": bag.bag_id,
            "true_label": bag.label,
            "gender": demo.group_label("gender"),
            "race": demo.group_label("race"),
            "age_bin": demo.group_label("age"),
        }
        if state.config.survival:
            records.append(
                em.PredictionRecord(
                    predicted_label=None,
                    probabilities=(),
                    risk=float(fw.logits.data[0, 0]),
                    time=bag.survival.time if bag.survival else None,
                    event=bag.survival.event if bag.survival else None,
                    **common,
                )
            )
        else:
            shifted = fw.logits.data[0] - fw.logits.data[0].max()
            probs = np.exp(shifted)
            probs /= probs.sum()
            records.append(
                em.PredictionRecord(
                    predicted_label=int(fw.logits.data[0].argmax()),
                    probabilities=tuple(float(p) for p in probs),
                    time=bag.survival.time if bag.survival else None,
                    event=bag.survival.event if bag.survival else None,
                    **common,
                )
            )
    report = em.assemble_report(
        records,
        cohort.class_count,
        state=state if with_attribution else None,
        bags=bags if with_attribution else None,
    )
    return report, records


def write_log_jsonl(log: list[TrainLogRecord], path) -> None:
    """Line-delimited JSON, one epoch per line.

    Wall-clock seconds stay in memory only: the persisted log must be
    byte-identical across reruns with the same seed and config, and
    run-level timing already lives in the provenance record.
    """
    with open(path, "w") as fh:
        for record in log:
            row = {k: v for k, v in record.to_dict().items() if k != "seconds"}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
