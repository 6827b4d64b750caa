"""Reported metrics: accuracy, AUC, F1, group disparity, attribution, C-index.

Fields that cannot be computed from the data at hand (single-class AUC,
zero comparable survival pairs, no demographics) come back as None and
serialize to JSON null rather than being silently filled with a default.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import scmgraph as sg
from .bagio import AGE_INDEX, ATTRIBUTES, FeatureBag, GENDER_SLICE, RACE_SLICE
from .errors import DimensionError, DomainError
from .model import ModelState, forward_bag

__all__ = [
    "PredictionRecord",
    "EvalReport",
    "accuracy",
    "auc_binary",
    "auc_macro_ovr",
    "f1_binary",
    "f1_macro",
    "gdv",
    "group_accuracies",
    "c_index",
    "attribution_total",
    "attribution_factor",
    "assemble_report",
    "write_predictions_csv",
    "read_predictions_csv",
]


@dataclass(frozen=True)
class PredictionRecord:
    """One bag's evaluation row; demographics as labels, '' when missing."""

    bag_id: str
    true_label: int
    predicted_label: int | None
    probabilities: tuple[float, ...]
    gender: str
    race: str
    age_bin: str
    risk: float | None = None
    time: float | None = None
    event: int | None = None

    def __post_init__(self) -> None:
        if self.probabilities and abs(sum(self.probabilities) - 1.0) > 1e-6:
            raise DomainError(
                f"probabilities of bag {self.bag_id!r} sum to {sum(self.probabilities)}"
            )


# ---------------------------------------------------------------------------
# Classification metrics


def accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise DomainError("no records")
    return float(np.mean([r.true_label == r.predicted_label for r in records]))


def auc_binary(labels: Sequence[int], scores: Sequence[float]) -> float | None:
    """Mann-Whitney AUC via midranks; score ties contribute half.

    Returns None when only one class is present.
    """
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise DimensionError(f"labels {labels.shape} vs scores {scores.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_macro_ovr(
    labels: Sequence[int], probabilities: Sequence[Sequence[float]], class_count: int
) -> float | None:
    """Mean one-vs-rest AUC over classes where both sides are present."""
    labels = np.asarray(labels, dtype=int)
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.shape != (len(labels), class_count):
        raise DimensionError(f"probability matrix shape {probs.shape}")
    per_class = []
    for c in range(class_count):
        a = auc_binary((labels == c).astype(int), probs[:, c])
        if a is not None:
            per_class.append(a)
    return float(np.mean(per_class)) if per_class else None


def _f1_one_class(true: np.ndarray, pred: np.ndarray, c: int) -> float:
    tp = int(((true == c) & (pred == c)).sum())
    fp = int(((true != c) & (pred == c)).sum())
    fn = int(((true == c) & (pred != c)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_binary(records: Sequence[PredictionRecord]) -> float:
    true = np.array([r.true_label for r in records])
    pred = np.array([r.predicted_label for r in records])
    return _f1_one_class(true, pred, 1)


def f1_macro(records: Sequence[PredictionRecord], class_count: int) -> float:
    true = np.array([r.true_label for r in records])
    pred = np.array([r.predicted_label for r in records])
    return float(np.mean([_f1_one_class(true, pred, c) for c in range(class_count)]))


# ---------------------------------------------------------------------------
# Group disparity


def gdv(per_group_accuracy: dict[str, float]) -> float:
    """Population standard deviation of the group accuracies."""
    if not per_group_accuracy:
        raise DomainError("disparity needs at least one group")
    values = np.array(list(per_group_accuracy.values()), dtype=np.float64)
    if np.all(values == values[0]):
        return 0.0  # keep identical accuracies at exactly zero disparity
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def group_accuracies(
    records: Sequence[PredictionRecord], attribute: str, positive_only: bool
) -> dict[str, float]:
    """Accuracy per observed group; groups left without samples are absent.

    ``positive_only`` restricts to true-label-1 bags (the binary
    disparity convention); the unrestricted variant serves C > 2 and
    the per-group accuracy tables.
    """
    if attribute not in ATTRIBUTES:
        raise DomainError(f"unknown attribute {attribute!r}")
    hits: dict[str, list[bool]] = {}
    for r in records:
        label = getattr(r, "age_bin" if attribute == "age" else attribute)
        if not label:
            continue
        if positive_only and r.true_label != 1:
            continue
        hits.setdefault(label, []).append(r.true_label == r.predicted_label)
    return {g: float(np.mean(h)) for g, h in sorted(hits.items())}


# ---------------------------------------------------------------------------
# Survival


def c_index(
    risks: Sequence[float], times: Sequence[float], events: Sequence[int]
) -> float | None:
    """Harrell's concordance: over pairs (i, j) with t_i < t_j and an event
    at i, the fraction where risk_i > risk_j; risk ties count half.

    Returns None when no pair is comparable.
    """
    n = len(risks)
    if not (n == len(times) == len(events)):
        raise DimensionError("risks/times/events lengths differ")
    concordant = 0.0
    comparable = 0
    for i in range(n):
        if events[i] != 1:
            continue
        for j in range(n):
            if times[i] < times[j]:
                comparable += 1
                if risks[i] > risks[j]:
                    concordant += 1.0
                elif risks[i] == risks[j]:
                    concordant += 0.5
    return concordant / comparable if comparable else None


# ---------------------------------------------------------------------------
# Intervention attribution

_BLOCKS = {"gender": GENDER_SLICE, "race": RACE_SLICE, "age": slice(AGE_INDEX, AGE_INDEX + 1)}


def _factual(state: ModelState, bag: FeatureBag):
    fw = forward_bag(state, bag, "eval")
    u_fact = fw.u_final.data[0].copy()
    z_fact = sg.intervene(state.sem, state.spec, fw.bag_vec, u_fact)
    return fw, u_fact, z_fact


def attribution_total(state: ModelState, bag: FeatureBag) -> float:
    """L2 shift of the disease representation when all demographics are
    forced to zero."""
    fw, _, z_fact = _factual(state, bag)
    z_null = sg.intervene(state.sem, state.spec, fw.bag_vec, np.zeros(8))
    return float(np.linalg.norm(z_fact.data - z_null.data))


def attribution_factor(state: ModelState, bag: FeatureBag, attribute: str) -> float:
    """L2 shift of the disease representation when one attribute block is
    forced to its training-cohort mean (the model's neutral reference)."""
    if attribute not in _BLOCKS:
        raise DomainError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")
    fw, u_fact, z_fact = _factual(state, bag)
    u_cf = u_fact.copy()
    block = _BLOCKS[attribute]
    u_cf[block] = state.neutral_u[block]
    z_cf = sg.intervene(state.sem, state.spec, fw.bag_vec, u_cf)
    return float(np.linalg.norm(z_fact.data - z_cf.data))


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class EvalReport:
    """Cohort-level summary; None marks a field the data could not support."""

    n_bags: int
    class_count: int
    acc: float | None
    auc: float | None
    f1: float | None
    gdv: dict[str, float | None]
    gdv_overall: dict[str, float | None]
    group_accuracy: dict[str, dict[str, float]]
    attribution_mean: float | None
    attribution_factors: dict[str, float] | None
    c_index: float | None

    def to_dict(self) -> dict:
        return {
            "n_bags": self.n_bags,
            "class_count": self.class_count,
            "acc": self.acc,
            "auc": self.auc,
            "f1": self.f1,
            "gdv": self.gdv,
            "gdv_overall": self.gdv_overall,
            "group_accuracy": self.group_accuracy,
            "attribution_mean": self.attribution_mean,
            "attribution_factors": self.attribution_factors,
            "c_index": self.c_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def assemble_report(
    records: Sequence[PredictionRecord],
    class_count: int,
    state: ModelState | None = None,
    bags: Sequence[FeatureBag] | None = None,
) -> EvalReport:
    """Fill every field the records (and optionally model + bags, for
    attribution) can support; the rest stay None."""
    if not records:
        raise DomainError("cannot summarize zero records")
    has_classifier = all(r.predicted_label is not None and r.probabilities for r in records)
    acc = auc = f1 = None
    if has_classifier:
        acc = accuracy(records)
        labels = [r.true_label for r in records]
        if class_count == 2:
            auc = auc_binary(labels, [r.probabilities[1] for r in records])
            f1 = f1_binary(records)
        else:
            auc = auc_macro_ovr(labels, [r.probabilities for r in records], class_count)
            f1 = f1_macro(records, class_count)
    positive_only = has_classifier and class_count == 2
    gdv_map: dict[str, float | None] = {}
    gdv_overall_map: dict[str, float | None] = {}
    table: dict[str, dict[str, float]] = {}
    for attribute in ATTRIBUTES:
        if has_classifier:
            restricted = group_accuracies(records, attribute, positive_only)
            overall = group_accuracies(records, attribute, False)
            gdv_map[attribute] = gdv(restricted) if restricted else None
            gdv_overall_map[attribute] = gdv(overall) if overall else None
            table[attribute] = restricted if positive_only else overall
        else:
            gdv_map[attribute] = None
            gdv_overall_map[attribute] = None
            table[attribute] = {}
    surv = [(r.risk, r.time, r.event) for r in records if r.risk is not None and r.time is not None]
    ci = None
    if surv:
        risks, times, events = zip(*surv)
        ci = c_index(risks, times, events)
    attribution_mean = None
    attribution_factors = None
    if state is not None and bags is not None and bags:
        totals = [attribution_total(state, bag) for bag in bags]
        attribution_mean = float(np.mean(totals))
        attribution_factors = {
            a: float(np.mean([attribution_factor(state, bag, a) for bag in bags]))
            for a in ATTRIBUTES
        }
    return EvalReport(
        n_bags=len(records),
        class_count=class_count,
        acc=acc,
        auc=auc,
        f1=f1,
        gdv=gdv_map,
        gdv_overall=gdv_overall_map,
        group_accuracy=table,
        attribution_mean=attribution_mean,
        attribution_factors=attribution_factors,
        c_index=ci,
    )


# ---------------------------------------------------------------------------
# Prediction CSV


def write_predictions_csv(records: Sequence[PredictionRecord], path) -> None:
    """Columns: bag_id,true,pred,prob_0..prob_{C-1},gender,race,age_bin,risk,time,event."""
    if not records:
        raise DomainError("no records to write")
    n_probs = len(records[0].probabilities)
    header = (
        ["bag_id", "true", "pred"]
        + [f"prob_{c}" for c in range(n_probs)]
        + ["gender", "race", "age_bin", "risk", "time", "event"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            if len(r.probabilities) != n_probs:
                raise DimensionError(f"bag {r.bag_id!r} has a different class count")
            writer.writerow(
                [
                    r.bag_id,
                    r.true_label,
                    "" if r.predicted_label is None else r.predicted_label,
                ]
                + [f"{p!r}" for p in r.probabilities]
                + [
                    r.gender,
                    r.race,
                    r.age_bin,
                    "" if r.risk is None else f"{r.risk!r}",
                    "" if r.time is None else f"{r.time!r}",
                    "" if r.event is None else r.event,
                ]
            )


def read_predictions_csv(path) -> list[PredictionRecord]:
    """Inverse of write_predictions_csv (round-trips via repr floats)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        prob_cols = [i for i, h in enumerate(header) if h.startswith("prob_")]
        col = {h: i for i, h in enumerate(header)}
        out = []
        for rw in reader:
            out.append(
                PredictionRecord(
                    bag_id=rw[col["bag_id"]],
                    true_label=int(rw[col["true"]]),
                    predicted_label=int(rw[col["pred"]]) if rw[col["pred"]] else None,
                    probabilities=tuple(float(rw[i]) for i in prob_cols),
                    gender=rw[col["gender"]],
                    race=rw[col["race"]],
                    age_bin=rw[col["age_bin"]],
                    risk=float(rw[col["risk"]]) if rw[col["risk"]] else None,
                    time=float(rw[col["time"]]) if rw[col["time"]] else None,
                    event=int(rw[col["event"]]) if rw[col["event"]] else None,
                )
            )
    return out
