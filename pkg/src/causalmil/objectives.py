"""Training objectives: classification, structural consistency, fairness, survival.

The total objective is

    total = classification + w_causal * causal + w_fair * fairness

where classification itself folds in a weighted instance-level term,
and the causal term folds in a weighted demographic-reconstruction
term. Fairness is computed over a window of bags (the gradient
accumulation window), not per bag, because group gaps need more than
one bag to exist.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from . import scmgraph as sg
from .bagio import ATTRIBUTES, DemographicVector
from .diffmath import Tensor
from .errors import DimensionError, DomainError
from .model import BagForward

__all__ = [
    "LossWeights",
    "BatchFairnessBuffer",
    "classification_loss",
    "consistency_loss",
    "demographic_reconstruction_loss",
    "causal_loss",
    "bag_probabilities",
    "fairness_loss",
    "compose_total",
    "cox_partial_likelihood",
]


@dataclass(frozen=True)
class LossWeights:
    """Scales for the auxiliary objectives."""

    causal: float = 0.1
    fairness: float = 0.05
    instance: float = 0.5
    demographic: float = 0.1


def classification_loss(fw: BagForward, label: int, pseudo: Sequence[int], weights: LossWeights) -> Tensor:
    """Bag cross-entropy plus weighted mean instance cross-entropy
    against the pseudo-labels."""
    bag_term = dm.cross_entropy(fw.logits, label)
    ins_term = dm.cross_entropy_mean(fw.instance_logits, list(pseudo))
    return dm.add(bag_term, dm.smul(ins_term, weights.instance))


def consistency_loss(fw: BagForward) -> Tensor:
    """Squared distance from the disease representation to a detached
    copy of the bag embedding. The anchor is a gradient stop: the
    representation is pulled toward it, never the reverse."""
    anchor = dm.tensor(fw.h_x.data.copy())
    return dm.sum_sq(dm.sub(fw.z, anchor))


def demographic_reconstruction_loss(sem: sg.SemParams, fw: BagForward) -> Tensor:
    """Squared error of the demographics decoded from the disease
    representation against the (detached) vector that entered the graph."""
    target = dm.tensor(fw.u_final.data.copy())
    return dm.sum_sq(dm.sub(sg.decode_demographics(sem, fw.z), target))


def causal_loss(sem: sg.SemParams, fw: BagForward, weights: LossWeights) -> Tensor:
    """consistency + w_demographic * reconstruction."""
    return dm.add(
        consistency_loss(fw),
        dm.smul(demographic_reconstruction_loss(sem, fw), weights.demographic),
    )


def bag_probabilities(fw: BagForward) -> Tensor:
    """Softmax of the bag logits, kept on the tape for fairness gradients."""
    return dm.softmax_rows(fw.logits)


class BatchFairnessBuffer:
    """Predicted probability rows grouped by (attribute, group) over one
    gradient window. Only bags with the attribute observed contribute."""

    def __init__(self, class_count: int) -> None:
        if class_count < 2:
            raise DomainError(f"fairness needs >= 2 classes, got {class_count}")
        self.class_count = class_count
        self._groups: dict[str, dict[int, list[Tensor]]] = {a: {} for a in ATTRIBUTES}

    def add(self, probs: Tensor, demo: DemographicVector) -> None:
        if probs.shape != (1, self.class_count):
            raise DimensionError(
                f"probability row shape {probs.shape} != (1, {self.class_count})"
            )
        for attribute in ATTRIBUTES:
            g = demo.group(attribute)
            if g is not None:
                self._groups[attribute].setdefault(g, []).append(probs)

    def reset(self) -> None:
        for attribute in ATTRIBUTES:
            self._groups[attribute].clear()

    @property
    def empty(self) -> bool:
        return all(not groups for groups in self._groups.values())


def fairness_loss(buffer: BatchFairnessBuffer) -> Tensor:
    """Sum over attribute families of all unordered-pair squared gaps
    between group-mean predicted probabilities.

    Binary problems compare the positive-class probability; larger label
    spaces average the same statistic over every class. Attributes with
    fewer than two observed groups contribute nothing; a buffer with no
    observed member at all is worth a warning and yields zero.
    """
    if buffer.empty:
        warnings.warn("fairness window saw no observed demographics; contributing zero")
        return dm.tensor(0.0)
    c_count = buffer.class_count
    classes = [1] if c_count == 2 else list(range(c_count))
    per_class_scale = 1.0 if c_count == 2 else 1.0 / c_count
    total: Tensor | None = None
    for attribute in ATTRIBUTES:
        groups = buffer._groups[attribute]
        if len(groups) < 2:
            continue
        for c in classes:
            means = []
            for g in sorted(groups):
                members = groups[g]
                acc = dm.pick(members[0], 0, c)
                for m in members[1:]:
                    acc = dm.add(acc, dm.pick(m, 0, c))
                means.append(dm.smul(acc, 1.0 / len(members)))
            for i in range(len(means)):
                for j in range(i + 1, len(means)):
                    gap = dm.sum_sq(dm.sub(means[i], means[j]))
                    term = dm.smul(gap, per_class_scale)
                    total = term if total is None else dm.add(total, term)
    return total if total is not None else dm.tensor(0.0)


def compose_total(cls_term: Tensor, causal_term: Tensor, fair_term: Tensor, weights: LossWeights) -> Tensor:
    """total = cls + w_causal * causal + w_fair * fairness."""
    return dm.add(
        cls_term,
        dm.add(dm.smul(causal_term, weights.causal), dm.smul(fair_term, weights.fairness)),
    )


def cox_partial_likelihood(
    risks: Sequence[Tensor], times: Sequence[float], events: Sequence[int]
) -> Tensor:
    """Negative partial log-likelihood of proportional hazards.

    Ties in event times share the full risk set of their common time
    (Breslow's approximation). Each risk is a 1 x 1 score tensor. The
    value is the unnormalized sum over events; callers decide whether
    to average. A window with no events has no likelihood to speak of
    and raises DomainError; zero-event windows are the caller's job to
    skip.
    """
    n = len(risks)
    if not (n == len(times) == len(events)):
        raise DimensionError(
            f"risks/times/events lengths differ: {n}/{len(times)}/{len(events)}"
        )
    if n == 0:
        raise DomainError("empty risk set")
    for t in times:
        if not (np.isfinite(t) and t > 0.0):
            raise DomainError(f"survival time must be positive and finite, got {t}")
    for e in events:
        if e not in (0, 1):
            raise DomainError(f"event indicator must be 0 or 1, got {e}")
    if not any(events):
        raise DomainError("no events in window; partial likelihood undefined")
    for r in risks:
        if r.shape != (1, 1):
            raise DimensionError(f"each risk must be 1 x 1, got {r.shape}")
    risk_row = risks[0]
    for r in risks[1:]:
        risk_row = dm.concat_cols(risk_row, r)  # 1 x n
    times_arr = np.asarray(times, dtype=np.float64)
    loss: Tensor | None = None
    for i in range(n):
        if events[i] != 1:
            continue
        at_risk = [j for j in range(n) if times_arr[j] >= times_arr[i]]
        lse = dm.logsumexp_row(dm.take_cols(risk_row, at_risk))
        term = dm.sub(lse, dm.pick(risk_row, 0, i))
        loss = term if loss is None else dm.add(loss, term)
    return loss
