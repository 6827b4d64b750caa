"""Whole-model assembly: config, parameter registry, forward pass, checkpoints.

A model is the instance branch plus attention pooling (milnet) feeding
the structural graph (scmgraph). Parameters live in a flat name -> Tensor
registry with a fixed creation order so the optimizer, checkpoints, and
gradient checks all walk the same list.

Checkpoint layout (little-endian):

    magic       4 bytes  b"MCKP"
    version     u32      1
    meta_len    u32
    meta        meta_len bytes of UTF-8 JSON (config, neutral_u, param manifest)
    meta_crc    u32      CRC32 of the meta bytes
    per parameter, in manifest order:
        name_len  u16
        name      name_len bytes UTF-8
        rows      u32
        cols      u32
        data      rows*cols float64, row-major
        block_crc u32     CRC32 of name..data
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import milnet as mn
from . import scmgraph as sg
from .bagio import AGE_INDEX, FeatureBag, GENDER_SLICE, RACE_SLICE
from .diffmath import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError

__all__ = [
    "ModelConfig",
    "ModelState",
    "BagForward",
    "init_model",
    "forward_bag",
    "default_neutral_demographics",
    "save_model",
    "load_model",
]

_CKPT_MAGIC = b"MCKP"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``n_out`` is 1 in survival mode."""

    d: int
    class_count: int
    variant: str = "collider"
    d_h: int = 256
    d_q: int = 128
    n_heads: int = 4
    layers: int = 1
    k_frac: float = 0.1
    dropout: float = 0.3
    sigma_unc: float = 0.5
    survival: bool = False

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ConfigError(f"feature dim must be positive, got {self.d}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.variant not in sg.VARIANTS:
            raise ConfigError(f"unknown graph variant {self.variant!r}")
        if self.d_h < 1 or self.d_q < 1:
            raise ConfigError("hidden and query dims must be positive")
        if self.d_h % self.n_heads != 0:
            raise ConfigError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not 0.0 < self.k_frac <= 1.0:
            raise ConfigError(f"k_frac must lie in (0, 1], got {self.k_frac}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.sigma_unc < 1.0:
            raise ConfigError(f"sigma_unc must lie in (0, 1), got {self.sigma_unc}")

    @property
    def n_out(self) -> int:
        return 1 if self.survival else self.class_count


def default_neutral_demographics() -> np.ndarray:
    """Uninformative reference vector: uniform one-hot blocks, midlife age."""
    u = np.zeros(8)
    u[GENDER_SLICE] = 0.5
    u[RACE_SLICE] = 0.2
    u[AGE_INDEX] = 0.5
    return u


@dataclass
class ModelState:
    config: ModelConfig
    instance: mn.InstanceBranchParams
    pool: mn.PoolingParams
    sem: sg.SemParams
    spec: sg.CausalGraphSpec
    params: dict[str, Tensor]
    neutral_u: np.ndarray = field(default_factory=default_neutral_demographics)


def _register(params: dict[str, Tensor], name: str, t: Tensor) -> None:
    if name in params:
        raise ContractError(f"duplicate parameter name {name!r}")
    params[name] = t


def _build_registry(
    instance: mn.InstanceBranchParams, pool: mn.PoolingParams, sem: sg.SemParams
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _register(params, "instance.align_w", instance.align_w)
    _register(params, "instance.align_b", instance.align_b)
    _register(params, "instance.cls_w", instance.cls_w)
    _register(params, "instance.cls_b", instance.cls_b)
    _register(params, "pool.query_w", pool.query_w)
    for prefix, emb in (("sem.embed_x", sem.embed_x), ("sem.embed_u", sem.embed_u)):
        _register(params, f"{prefix}.w", emb.w)
        _register(params, f"{prefix}.b", emb.b)
        _register(params, f"{prefix}.ln_gain", emb.ln_gain)
        _register(params, f"{prefix}.ln_bias", emb.ln_bias)
    _register(params, "sem.z_init", sem.z_init)
    for li, layer in enumerate(sem.attn):
        for hi in range(sem.n_heads):
            _register(params, f"sem.attn{li}.q{hi}", layer["q"][hi])
            _register(params, f"sem.attn{li}.k{hi}", layer["k"][hi])
            _register(params, f"sem.attn{li}.v{hi}", layer["v"][hi])
        _register(params, f"sem.attn{li}.out_w", layer["out_w"])
        _register(params, f"sem.attn{li}.out_b", layer["out_b"])
    for prefix, mlp in (("sem.decoder", sem.decoder), ("sem.imputer", sem.imputer)):
        _register(params, f"{prefix}.w1", mlp.w1)
        _register(params, f"{prefix}.b1", mlp.b1)
        _register(params, f"{prefix}.w2", mlp.w2)
        _register(params, f"{prefix}.b2", mlp.b2)
    _register(params, "sem.head_w", sem.head_w)
    _register(params, "sem.head_b", sem.head_b)
    if sem.concat_proj_w is not None:
        _register(params, "sem.concat_proj_w", sem.concat_proj_w)
        _register(params, "sem.concat_proj_b", sem.concat_proj_b)
    return params


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Seeded construction; the same (config, seed) yields identical weights."""
    rng = np.random.default_rng(seed)
    instance = mn.init_instance_branch(rng, config.d, config.n_out)
    pool = mn.init_pooling(rng, config.d, config.d_q)
    sem = sg.init_sem(
        rng,
        d=config.d,
        d_h=config.d_h,
        n_heads=config.n_heads,
        layers=config.layers,
        n_out=config.n_out,
        variant=config.variant,
        sigma_unc=config.sigma_unc,
    )
    spec = sg.build_adjacency(config.variant)
    params = _build_registry(instance, pool, sem)
    return ModelState(
        config=config, instance=instance, pool=pool, sem=sem, spec=spec, params=params
    )


@dataclass
class BagForward:
    """Everything one pass produces, for losses, metrics, and inspection."""

    instance_logits: Tensor  # K x n_out
    critical_index: int
    alpha: Tensor  # 1 x K attention weights
    bag_vec: Tensor  # 1 x d pooled features
    u_final: Tensor  # 1 x 8 demographics entering the graph
    h_x: Tensor
    h_u: Tensor
    z: Tensor  # disease representation
    logits: Tensor  # 1 x n_out


def forward_bag(
    state: ModelState,
    bag: FeatureBag,
    mode: str,
    rng: np.random.Generator | None = None,
) -> BagForward:
    """One full pass over a bag. ``mode`` is "train" or "eval"; train mode
    applies dropout and the training adjacency and needs an rng."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = state.config
    if bag.features.shape[1] != cfg.d:
        raise DimensionError(
            f"bag {bag.bag_id!r} has feature dim {bag.features.shape[1]}, model expects {cfg.d}"
        )
    rate = cfg.dropout if mode == "train" else 0.0
    features = dm.tensor(bag.features.astype(np.float64))
    inst_logits = mn.instance_logits(state.instance, features)
    crit_idx, crit = mn.select_critical(inst_logits.data, bag.features)
    bag_vec, alpha = mn.attention_pool(state.pool, features, crit)
    u_final = sg.impute_demographics(state.sem, bag_vec, bag.demographics)
    fw = sg.disease_representation(
        state.sem, state.spec, bag_vec, u_final, rate=rate, mode=mode, rng=rng
    )
    logits = sg.bag_logits(state.sem, fw, cfg.variant)
    return BagForward(
        instance_logits=inst_logits,
        critical_index=crit_idx,
        alpha=alpha,
        bag_vec=bag_vec,
        u_final=u_final,
        h_x=fw.h_x,
        h_u=fw.h_u,
        z=fw.z,
        logits=logits,
    )


def save_model(state: ModelState, path) -> None:
    """Write the checkpoint format documented in the module docstring."""
    manifest = [
        {"name": name, "rows": t.rows, "cols": t.cols} for name, t in state.params.items()
    ]
    meta = {
        "config": {
            "d": state.config.d,
            "class_count": state.config.class_count,
            "variant": state.config.variant,
            "d_h": state.config.d_h,
            "d_q": state.config.d_q,
            "n_heads": state.config.n_heads,
            "layers": state.config.layers,
            "k_frac": state.config.k_frac,
            "dropout": state.config.dropout,
            "sigma_unc": state.config.sigma_unc,
            "survival": state.config.survival,
        },
        "neutral_u": state.neutral_u.tolist(),
        "params": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", zlib.crc32(meta_bytes))
    for name, t in state.params.items():
        name_b = name.encode("utf-8")
        block = bytearray()
        block += struct.pack("<H", len(name_b))
        block += name_b
        block += struct.pack("<II", t.rows, t.cols)
        block += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        block += struct.pack("<I", zlib.crc32(bytes(block)))
        blob += block
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _CkptReader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated reading {what}", offset=self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def load_model(path) -> ModelState:
    """Read a checkpoint; any corruption or mismatch raises FormatError."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _CkptReader(raw)
    if r.take(4, "magic") != _CKPT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)", offset=0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (meta_len,) = struct.unpack("<I", r.take(4, "meta length"))
    meta_start = r.pos
    meta_bytes = r.take(meta_len, "meta JSON")
    (meta_crc,) = struct.unpack("<I", r.take(4, "meta CRC"))
    if zlib.crc32(meta_bytes) != meta_crc:
        raise FormatError("meta JSON failed its CRC check", offset=meta_start)
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"meta JSON unreadable: {exc}", offset=meta_start) from None
    try:
        config = ModelConfig(**meta["config"])
        manifest = meta["params"]
        neutral_u = np.asarray(meta["neutral_u"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"meta JSON missing fields: {exc}", offset=meta_start) from None
    if neutral_u.shape != (8,):
        raise FormatError("neutral_u must hold 8 values", offset=meta_start)
    state = init_model(config, seed=0)
    expected = list(state.params.keys())
    listed = [entry["name"] for entry in manifest]
    if listed != expected:
        raise FormatError(
            "parameter manifest does not match this architecture "
            f"(first difference at {_first_diff(listed, expected)!r})",
            offset=meta_start,
        )
    for entry in manifest:
        block_start = r.pos
        (name_len,) = struct.unpack("<H", r.take(2, "parameter name length"))
        body = bytearray(r.raw[block_start : block_start + 2])
        name = r.take(name_len, "parameter name").decode("utf-8")
        body += name.encode("utf-8")
        rows, cols = struct.unpack("<II", r.take(8, f"{name} dims"))
        body += struct.pack("<II", rows, cols)
        if name != entry["name"]:
            raise FormatError(
                f"block name {name!r} does not match manifest {entry['name']!r}",
                offset=block_start,
            )
        target = state.params[name]
        if (rows, cols) != target.shape:
            raise FormatError(
                f"{name}: stored shape {(rows, cols)} != expected {target.shape}",
                offset=block_start,
            )
        data_b = r.take(rows * cols * 8, f"{name} data")
        body += data_b
        (block_crc,) = struct.unpack("<I", r.take(4, f"{name} CRC"))
        if zlib.crc32(bytes(body)) != block_crc:
            raise FormatError(f"{name}: block failed its CRC check", offset=block_start)
        target.data[...] = np.frombuffer(data_b, dtype="<f8").reshape(rows, cols)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after final parameter block", offset=r.pos)
    state.neutral_u = neutral_u
    return state


def _first_diff(a: list[str], b: list[str]) -> str:
    for x, y in zip(a, b):
        if x != y:
            return f"{x} vs {y}"
    return f"length {len(a)} vs {len(b)}"
