"""Causality-aware multiple-instance learning on feature bags.

A small, self-contained stack: a reverse-mode autodiff core over dense
2-D float64 tensors, attention-based bag pooling with an instance
branch, a masked graph-attention structural model that routes bag and
demographic embeddings through an explicit collider graph, composite
fairness-aware training, do-operator attribution, and group-fairness /
survival metrics, validated end to end on synthetic confounded cohorts.
"""

from __future__ import annotations

from . import bagio, diffmath, evalmetrics, milnet, model, objectives, optim, scmgraph, trainer
from .errors import (
    CausalMilError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    TapeError,
)

__version__ = "0.1.0"

__all__ = [
    "bagio",
    "diffmath",
    "evalmetrics",
    "milnet",
    "model",
    "objectives",
    "optim",
    "scmgraph",
    "trainer",
    "CausalMilError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "NumericError",
    "TapeError",
    "__version__",
]
