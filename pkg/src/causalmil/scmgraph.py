"""Masked graph attention over the bag/demographics/disease node triple.

Three nodes, X (bag embedding), U (demographics embedding), and Z
(disease representation), exchange messages under an explicit adjacency
mask.
Row i of the adjacency lists the senders node i attends to. The default
"collider" wiring routes X and U into Z; at train time the reverse
edges (Z into X's and U's rows) are present as well, while inference
drops them so only causal-direction edges carry information:

    collider  train [[1,0,1],[0,1,1],[1,1,1]]   eval [[1,0,0],[0,1,0],[1,1,1]]
    fork      train [[1,0,1],[0,1,1],[1,1,1]]   eval [[1,0,1],[0,1,1],[0,0,1]]
    direct    train [[1,0,1],[0,1,0],[1,0,1]]   eval [[1,0,0],[0,1,0],[1,0,1]]
    concat    no message passing; Z is a linear projection of [h_X; h_U]

Variant wiring of the prediction path:
  - collider: head reads the updated Z node.
  - fork (Z causes X and U): at inference Z receives nothing, so the
    only input-dependent node output is the updated X node; the head and
    attribution read that. Demographics provably cannot reach it.
  - direct (U bypasses Z): the head reads [Z; h_U].
  - concat: no graph; head reads the projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError, ContractError, DimensionError, DomainError

__all__ = [
    "VARIANTS",
    "CausalGraphSpec",
    "SemParams",
    "build_adjacency",
    "init_sem",
    "embed_node",
    "embed_nodes",
    "graph_pass",
    "impute_demographics",
    "decode_demographics",
    "disease_representation",
    "bag_logits",
    "intervene",
]

VARIANTS = ("collider", "fork", "direct", "concat")

NODE_X, NODE_U, NODE_Z = 0, 1, 2


@dataclass(frozen=True)
class CausalGraphSpec:
    """Adjacency masks for one graph variant; rows list senders per receiver."""

    variant: str
    adjacency: np.ndarray  # 3x3 bool, inference edges
    train_adjacency: np.ndarray  # 3x3 bool, superset with reverse edges

    def __post_init__(self) -> None:
        for name in ("adjacency", "train_adjacency"):
            a = getattr(self, name)
            if a.shape != (3, 3) or a.dtype != bool:
                raise ConfigError(f"{name} must be a 3x3 bool matrix")
            if not a.diagonal().all():
                raise ConfigError(f"{name} must keep every self-loop")
        if (self.adjacency & ~self.train_adjacency).any():
            raise ConfigError("train_adjacency must contain every inference edge")

    def mask(self, mode: str) -> np.ndarray:
        if mode == "train":
            return self.train_adjacency
        if mode == "eval":
            return self.adjacency
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def build_adjacency(variant: str) -> CausalGraphSpec:
    """Adjacency masks for a named variant (see module docstring)."""
    b = lambda rows: np.array(rows, dtype=bool)
    if variant == "collider":
        eval_adj = b([[1, 0, 0], [0, 1, 0], [1, 1, 1]])
        train_adj = b([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    elif variant == "fork":
        eval_adj = b([[1, 0, 1], [0, 1, 1], [0, 0, 1]])
        train_adj = b([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    elif variant == "direct":
        eval_adj = b([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        train_adj = b([[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    elif variant == "concat":
        eye = np.eye(3, dtype=bool)
        eval_adj = eye
        train_adj = eye.copy()
    else:
        raise ConfigError(f"unknown graph variant {variant!r}; expected one of {VARIANTS}")
    return CausalGraphSpec(variant=variant, adjacency=eval_adj, train_adjacency=train_adj)


@dataclass
class _EmbedParams:
    w: Tensor
    b: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class _MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SemParams:
    """All learnable pieces of the structural model.

    ``attn`` holds per-layer per-head q/k/v projections plus the merged
    output map; ``concat_proj`` exists only for the concat variant;
    ``head`` maps the disease representation (or [Z; h_U] for direct) to
    bag logits.
    """

    d_h: int
    n_heads: int
    sigma_unc: float
    embed_x: _EmbedParams
    embed_u: _EmbedParams
    z_init: Tensor  # 1 x d_h learned bias (a linear map of the zero vector)
    attn: list[dict]  # per layer: {"q": [..], "k": [..], "v": [..], "out_w", "out_b"}
    decoder: _MlpParams
    imputer: _MlpParams
    head_w: Tensor
    head_b: Tensor
    concat_proj_w: Tensor | None = None
    concat_proj_b: Tensor | None = None


def _init_embed(rng: np.random.Generator, d_in: int, d_h: int) -> _EmbedParams:
    return _EmbedParams(
        w=dm.uniform_init(rng, d_in, d_h, fan_in=d_in),
        b=dm.uniform_init(rng, 1, d_h, fan_in=d_in),
        ln_gain=dm.tensor(np.ones((1, d_h))),
        ln_bias=dm.tensor(np.zeros((1, d_h))),
    )


def _init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> _MlpParams:
    return _MlpParams(
        w1=dm.uniform_init(rng, d_in, d_hidden, fan_in=d_in),
        b1=dm.uniform_init(rng, 1, d_hidden, fan_in=d_in),
        w2=dm.uniform_init(rng, d_hidden, d_out, fan_in=d_hidden),
        b2=dm.uniform_init(rng, 1, d_out, fan_in=d_hidden),
    )


def init_sem(
    rng: np.random.Generator,
    d: int,
    d_h: int,
    n_heads: int,
    layers: int,
    n_out: int,
    variant: str,
    sigma_unc: float = 0.5,
) -> SemParams:
    if d_h % n_heads != 0:
        raise ConfigError(f"d_h={d_h} must be divisible by n_heads={n_heads}")
    if layers < 1:
        raise ConfigError(f"layers must be >= 1, got {layers}")
    if not 0.0 < sigma_unc < 1.0:
        raise ConfigError(f"sigma_unc must lie in (0, 1), got {sigma_unc}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown graph variant {variant!r}")
    d_head = d_h // n_heads
    attn = []
    for _ in range(layers):
        layer = {
            "q": [dm.uniform_init(rng, d_h, d_head, fan_in=d_h) for _ in range(n_heads)],
            "k": [dm.uniform_init(rng, d_h, d_head, fan_in=d_h) for _ in range(n_heads)],
            "v": [dm.uniform_init(rng, d_h, d_head, fan_in=d_h) for _ in range(n_heads)],
            "out_w": dm.uniform_init(rng, d_h, d_h, fan_in=d_h),
            "out_b": dm.uniform_init(rng, 1, d_h, fan_in=d_h),
        }
        attn.append(layer)
    head_in = 2 * d_h if variant == "direct" else d_h
    params = SemParams(
        d_h=d_h,
        n_heads=n_heads,
        sigma_unc=sigma_unc,
        embed_x=_init_embed(rng, d, d_h),
        embed_u=_init_embed(rng, 8, d_h),
        z_init=dm.uniform_init(rng, 1, d_h, fan_in=d_h),
        attn=attn,
        decoder=_init_mlp(rng, d_h, d_h, 8),
        imputer=_init_mlp(rng, d, d_h, 8),
        head_w=dm.uniform_init(rng, head_in, n_out, fan_in=head_in),
        head_b=dm.uniform_init(rng, 1, n_out, fan_in=head_in),
    )
    if variant == "concat":
        params.concat_proj_w = dm.uniform_init(rng, 2 * d_h, d_h, fan_in=2 * d_h)
        params.concat_proj_b = dm.uniform_init(rng, 1, d_h, fan_in=2 * d_h)
    return params


def embed_node(
    p: _EmbedParams, x: Tensor, rate: float, mode: str, rng: np.random.Generator | None
) -> Tensor:
    """Dropout(GELU(LayerNorm(Linear(x)))) to a 1 x d_h node embedding."""
    lin = dm.add(dm.matmul(x, p.w), p.b)
    return dm.dropout(dm.gelu(dm.layer_norm(lin, p.ln_gain, p.ln_bias)), rate, mode, rng)


def embed_nodes(
    params: SemParams,
    bag_vec: Tensor,
    u_final: Tensor,
    rate: float,
    mode: str,
    rng: np.random.Generator | None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(h_X, h_U, h_Z0): embedded bag, embedded demographics, learned Z seed."""
    if u_final.shape != (1, 8):
        raise DimensionError(f"u_final must be 1 x 8, got {u_final.shape}")
    h_x = embed_node(params.embed_x, bag_vec, rate, mode, rng)
    h_u = embed_node(params.embed_u, u_final, rate, mode, rng)
    return h_x, h_u, params.z_init


def graph_pass(
    params: SemParams, spec: CausalGraphSpec, nodes: tuple[Tensor, Tensor, Tensor], mode: str
) -> list[Tensor]:
    """One stack of masked multi-head attention layers with residuals.

    Per layer and head: scores are scaled dot products of per-node query
    and key projections, the softmax runs only over each receiver's
    senders (masked entries are exactly zero), and the head outputs are
    concatenated, merged through the output map, and added residually.
    Returns the three updated node rows.
    """
    if spec.variant == "concat":
        raise ContractError("the concat variant has no message passing")
    if len(nodes) != 3:
        raise DimensionError(f"graph pass expects 3 nodes, got {len(nodes)}")
    mask = spec.mask(mode)
    d_head = params.d_h // params.n_heads
    scale = 1.0 / math.sqrt(d_head)
    h = dm.stack_rows(list(nodes))  # 3 x d_h
    for layer in params.attn:
        merged = None
        for head in range(params.n_heads):
            q = dm.matmul(h, layer["q"][head])  # 3 x d_head
            k = dm.matmul(h, layer["k"][head])
            v = dm.matmul(h, layer["v"][head])
            scores = dm.smul(dm.matmul(q, dm.transpose(k)), scale)  # 3 x 3
            alpha = dm.masked_softmax_rows(scores, mask)
            if (alpha.data[~mask] != 0.0).any():
                raise ContractError("attention leaked across a masked edge")
            out = dm.matmul(alpha, v)  # 3 x d_head
            merged = out if merged is None else dm.concat_cols(merged, out)
        update = dm.add(dm.matmul(merged, layer["out_w"]), layer["out_b"])
        h = dm.add(h, update)
    return [dm.row(h, i) for i in range(3)]


# Sigmoid applies to the one-hot slots (gender + race); the age slot
# stays linear. Constant masks, not parameters.
_ONE_HOT_MASK = np.array([[1.0] * 7 + [0.0]])


def _imputer_forward(params: SemParams, bag_vec: Tensor) -> Tensor:
    p = params.imputer
    raw = dm.add(
        dm.matmul(dm.gelu(dm.add(dm.matmul(bag_vec, p.w1), p.b1)), p.w2), p.b2
    )  # 1 x 8
    squashed = dm.sigmoid(raw)
    hot = dm.tensor(_ONE_HOT_MASK)
    cold = dm.tensor(1.0 - _ONE_HOT_MASK)
    return dm.add(dm.mul(squashed, hot), dm.mul(raw, cold))


def impute_demographics(params: SemParams, bag_vec: Tensor, demo) -> Tensor:
    """Final 1 x 8 demographic vector entering the graph.

    Fully observed passes through untouched (and gradient-free); fully
    missing is the imputer output scaled by sigma_unc to encode
    uncertainty; partial observation blends per-field: observed fields
    keep their values, missing fields take the imputer's.
    """
    if demo.fully_observed():
        return dm.tensor(demo.values.reshape(1, 8))
    predicted = _imputer_forward(params, bag_vec)
    if demo.fully_missing():
        return dm.smul(predicted, params.sigma_unc)
    m = demo.mask.astype(np.float64).reshape(1, 8)
    observed = dm.tensor((demo.values * demo.mask).reshape(1, 8))
    return dm.add(observed, dm.mul(predicted, dm.tensor(1.0 - m)))


def decode_demographics(params: SemParams, z: Tensor) -> Tensor:
    """Two-layer reconstruction of the 8-d demographics from Z."""
    p = params.decoder
    hidden = dm.gelu(dm.add(dm.matmul(z, p.w1), p.b1))
    return dm.add(dm.matmul(hidden, p.w2), p.b2)


@dataclass
class SemForward:
    """Intermediate node outputs of one structural pass."""

    h_x: Tensor
    h_u: Tensor
    z: Tensor
    u_final: Tensor


def disease_representation(
    params: SemParams,
    spec: CausalGraphSpec,
    bag_vec: Tensor,
    u_final: Tensor,
    rate: float,
    mode: str,
    rng: np.random.Generator | None,
) -> SemForward:
    """Run embeddings plus the variant's structural pass and pick the
    representation the prediction head consumes (see module docstring)."""
    h_x, h_u, h_z0 = embed_nodes(params, bag_vec, u_final, rate, mode, rng)
    if spec.variant == "concat":
        z = dm.add(dm.matmul(dm.concat_cols(h_x, h_u), params.concat_proj_w), params.concat_proj_b)
        return SemForward(h_x=h_x, h_u=h_u, z=z, u_final=u_final)
    updated = graph_pass(params, spec, (h_x, h_u, h_z0), mode)
    z = updated[NODE_X] if spec.variant == "fork" else updated[NODE_Z]
    return SemForward(h_x=h_x, h_u=h_u, z=z, u_final=u_final)


def bag_logits(params: SemParams, fw: SemForward, variant: str) -> Tensor:
    """Bag-level logits; the direct variant feeds [Z; h_U] to its head."""
    head_in = dm.concat_cols(fw.z, fw.h_u) if variant == "direct" else fw.z
    if head_in.cols != params.head_w.rows:
        raise DimensionError(
            f"head input dim {head_in.cols} != head weight rows {params.head_w.rows}"
        )
    return dm.add(dm.matmul(head_in, params.head_w), params.head_b)


def intervene(
    params: SemParams,
    spec: CausalGraphSpec,
    bag_vec: Tensor,
    u_do: np.ndarray,
) -> Tensor:
    """do-operator pass: force the demographic vector to ``u_do``.

    Imputation is bypassed entirely, the inference adjacency applies,
    and dropout is off: this is the eval-mode structural counterfactual.
    Returns the disease representation.
    """
    u_do = np.asarray(u_do, dtype=np.float64).reshape(-1)
    if u_do.shape != (8,):
        raise DimensionError(f"u_do must hold 8 values, got shape {u_do.shape}")
    u_t = dm.tensor(u_do.reshape(1, 8))
    fw = disease_representation(params, spec, bag_vec, u_t, rate=0.0, mode="eval", rng=None)
    return fw.z
