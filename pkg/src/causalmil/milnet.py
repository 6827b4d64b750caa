"""Instance branch and attention pooling for feature bags.

The instance branch aligns raw instance features (linear + GELU) and
scores them with a per-instance classifier. Bag supervision is pushed
down via pseudo-labels: a negative bag labels every instance 0, a
positive bag labels its top-k scoring instances with the bag class.
Pooling is attention against the critical (highest scoring) instance:
queries are tanh projections, weights a softmax of scaled dot products
against the critical query, and the bag vector the weighted sum of the
raw instance features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError, DimensionError, DomainError

__all__ = [
    "InstanceBranchParams",
    "PoolingParams",
    "PseudoLabels",
    "init_instance_branch",
    "init_pooling",
    "instance_logits",
    "assign_pseudo_labels",
    "select_critical",
    "attention_pool",
]


@dataclass
class InstanceBranchParams:
    """Alignment layer (linear+GELU, d -> d) and instance classifier (d -> C)."""

    align_w: Tensor
    align_b: Tensor
    cls_w: Tensor
    cls_b: Tensor


@dataclass
class PoolingParams:
    """Shared query projection for attention pooling (d -> d_q, no bias)."""

    query_w: Tensor


@dataclass(frozen=True)
class PseudoLabels:
    """Per-instance integer targets plus the indices that carry the bag class."""

    labels: np.ndarray  # shape (K,), int
    positive_indices: tuple[int, ...]


def init_instance_branch(
    rng: np.random.Generator, d: int, n_classes: int
) -> InstanceBranchParams:
    return InstanceBranchParams(
        align_w=dm.uniform_init(rng, d, d, fan_in=d),
        align_b=dm.uniform_init(rng, 1, d, fan_in=d),
        cls_w=dm.uniform_init(rng, d, n_classes, fan_in=d),
        cls_b=dm.uniform_init(rng, 1, n_classes, fan_in=d),
    )


def init_pooling(rng: np.random.Generator, d: int, d_q: int) -> PoolingParams:
    return PoolingParams(query_w=dm.uniform_init(rng, d, d_q, fan_in=d))


def instance_logits(params: InstanceBranchParams, features: Tensor) -> Tensor:
    """K x C logits: classifier(gelu(align(features)))."""
    if features.cols != params.align_w.rows:
        raise DimensionError(
            f"features have dim {features.cols}, alignment expects {params.align_w.rows}"
        )
    aligned = dm.gelu(dm.add(dm.matmul(features, params.align_w), params.align_b))
    return dm.add(dm.matmul(aligned, params.cls_w), params.cls_b)


def _scores(logits: np.ndarray) -> np.ndarray:
    """Per-instance score used for ranking and selection.

    Binary bags rank by the positive-class softmax probability; a
    single-logit head (survival risk) ranks by the raw score; multiclass
    ranking happens per explicit class via class_scores.
    """
    if logits.shape[1] == 1:
        return logits[:, 0].copy()
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[:, 1] if logits.shape[1] == 2 else probs


def class_scores(logits: np.ndarray, class_index: int) -> np.ndarray:
    """Softmax probability of one class per instance row."""
    if not 0 <= class_index < logits.shape[1]:
        raise DomainError(f"class {class_index} outside [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[:, class_index]


def assign_pseudo_labels(logits: np.ndarray, bag_label: int, k_frac: float) -> PseudoLabels:
    """Instance targets from the bag label.

    A label-0 bag marks every instance 0. A positive bag marks the
    ``max(1, ceil(k_frac * K))`` instances with the highest bag-class
    probability with the bag label (ties break toward the lower index)
    and the rest 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be K x C, got shape {logits.shape}")
    k, c = logits.shape
    if not 0 <= bag_label < c:
        raise DomainError(f"bag label {bag_label} outside [0, {c})")
    if not 0.0 < k_frac <= 1.0:
        raise ConfigError(f"k_frac must lie in (0, 1], got {k_frac}")
    labels = np.zeros(k, dtype=int)
    if bag_label == 0:
        return PseudoLabels(labels=labels, positive_indices=())
    top_k = max(1, math.ceil(k_frac * k))
    scores = class_scores(logits, bag_label)
    # Stable sort on descending score; equal scores keep ascending index order.
    order = np.argsort(-scores, kind="stable")
    chosen = tuple(int(i) for i in order[:top_k])
    labels[list(chosen)] = bag_label
    return PseudoLabels(labels=labels, positive_indices=chosen)


def select_critical(logits: np.ndarray, features: np.ndarray) -> tuple[int, np.ndarray]:
    """Pick the critical instance and return (index, its raw feature row).

    Binary bags select the highest positive-class probability; bags with
    more than two classes select the instance holding the largest single
    logit; a one-logit head selects the largest score. Ties break toward
    the lower index (argmax convention).
    """
    logits = np.asarray(logits, dtype=np.float64)
    features = np.asarray(features)
    if logits.shape[0] != features.shape[0]:
        raise DimensionError(
            f"logits rows {logits.shape[0]} != feature rows {features.shape[0]}"
        )
    if logits.shape[1] <= 2:
        idx = int(_scores(logits).argmax())
    else:
        idx = int(logits.max(axis=1).argmax())
    return idx, features[idx].astype(np.float64)


def attention_pool(
    params: PoolingParams, features: Tensor, critical: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Attention-pooled bag vector against the critical instance.

    Queries are tanh(features @ W_q); weights softmax of the scaled dot
    products between each query and the critical instance's query;
    the bag vector is the alpha-weighted sum of the raw feature rows.
    Returns (bag_vector 1 x d, alpha 1 x K).
    """
    d_q = params.query_w.cols
    if features.cols != params.query_w.rows:
        raise DimensionError(
            f"features have dim {features.cols}, query projection expects {params.query_w.rows}"
        )
    crit = dm.tensor(critical.reshape(1, -1))
    if crit.cols != features.cols:
        raise DimensionError(f"critical instance dim {crit.cols} != feature dim {features.cols}")
    queries = dm.tanh(dm.matmul(features, params.query_w))  # K x d_q
    crit_query = dm.tanh(dm.matmul(crit, params.query_w))  # 1 x d_q
    scores = dm.smul(
        dm.transpose(dm.matmul(queries, dm.transpose(crit_query))), 1.0 / math.sqrt(d_q)
    )  # 1 x K
    alpha = dm.softmax_rows(scores)
    bag_vec = dm.matmul(alpha, features)  # 1 x d
    return bag_vec, alpha
