"""Feature-bag data model, binary on-disk format, and synthetic cohorts.

On-disk bag layout (little-endian throughout)::

    offset  size  field
    0       4     magic "MCML"
    4       4     format version, u32 (currently 1)
    8       4     K  (instances per bag), u32
    12      4     d  (feature dimension), u32
    16      2     C  (class count), u16
    18      2     bag label, u16, < C
    20      1     survival_present, u8 (0 or 1)
    [21     8     survival time, f64   } only when survival_present
    [29     1     event indicator, u8  }
    ...     64    demographics, 8 x f64
    ...     1     demographic mask, u8, bit i = field i observed
    ...     K*d*4 features, f32, row-major
    ...     4     CRC32 (zlib) of every prior byte, u32

The bag id is not part of the layout; writers name files ``<bag_id>.bag``
and readers recover the id from the file stem.

The demographic vector is 8-dimensional: gender one-hot [0:2]
(male, female), race one-hot [2:7] (white, black, asian, other,
unknown), and normalized age [7] with ``age_norm = (years - 20) / 70``
clamped to [0, 1].
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, FormatError

__all__ = [
    "GENDER_LABELS",
    "RACE_LABELS",
    "AGE_BIN_LABELS",
    "GENDER_SLICE",
    "RACE_SLICE",
    "AGE_INDEX",
    "ATTRIBUTES",
    "DemographicVector",
    "SurvivalRecord",
    "FeatureBag",
    "Cohort",
    "DemographicMarginals",
    "ScmConfig",
    "normalize_age",
    "age_bin_of",
    "write_bag",
    "read_bag",
    "save_cohort",
    "load_cohort",
    "auto_split",
    "generate_cohort",
    "drop_demographics",
    "demographic_correlations",
]

MAGIC = b"MCML"
FORMAT_VERSION = 1

GENDER_LABELS = ("male", "female")
RACE_LABELS = ("white", "black", "asian", "other", "unknown")
AGE_BIN_LABELS = ("<40", "40-50", "50-60", "60-70", ">=70")

GENDER_SLICE = slice(0, 2)
RACE_SLICE = slice(2, 7)
AGE_INDEX = 7
ATTRIBUTES = ("gender", "race", "age")

# Age bins in years: <40, 40-50, 50-60, 60-70, >=70.
_AGE_BIN_EDGES_YEARS = (40.0, 50.0, 60.0, 70.0)


def normalize_age(years: float) -> float:
    """Map age in years to [0, 1] via (years - 20) / 70, clamped."""
    return min(1.0, max(0.0, (years - 20.0) / 70.0))


def age_bin_of(age_norm: float) -> int:
    """Bin index for a normalized age."""
    years = 20.0 + 70.0 * age_norm
    for i, edge in enumerate(_AGE_BIN_EDGES_YEARS):
        if years < edge:
            return i
    return len(_AGE_BIN_EDGES_YEARS)


@dataclass
class DemographicVector:
    """8-d demographic encoding plus a per-field observation mask."""

    values: np.ndarray  # shape (8,), float64
    mask: np.ndarray  # shape (8,), bool

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != (8,) or self.mask.shape != (8,):
            raise ConfigError("demographics need 8 values and an 8-bit mask")
        self.validate()

    def validate(self) -> None:
        """Observed one-hot blocks must contain exactly one 1; observed age in [0,1]."""
        for name, sl in (("gender", GENDER_SLICE), ("race", RACE_SLICE)):
            if self.mask[sl].all():
                block = self.values[sl]
                if not (np.isin(block, (0.0, 1.0)).all() and block.sum() == 1.0):
                    raise DomainError(f"observed {name} block is not one-hot: {block}")
        if self.mask[AGE_INDEX] and not 0.0 <= self.values[AGE_INDEX] <= 1.0:
            raise DomainError(f"observed age {self.values[AGE_INDEX]} outside [0, 1]")

    @classmethod
    def make(cls, gender: int, race: int, age_years: float) -> "DemographicVector":
        values = np.zeros(8)
        values[GENDER_SLICE.start + gender] = 1.0
        values[RACE_SLICE.start + race] = 1.0
        values[AGE_INDEX] = normalize_age(age_years)
        return cls(values, np.ones(8, dtype=bool))

    @classmethod
    def missing(cls) -> "DemographicVector":
        return cls(np.zeros(8), np.zeros(8, dtype=bool))

    def block_observed(self, attribute: str) -> bool:
        if attribute == "gender":
            return bool(self.mask[GENDER_SLICE].all())
        if attribute == "race":
            return bool(self.mask[RACE_SLICE].all())
        if attribute == "age":
            return bool(self.mask[AGE_INDEX])
        raise DomainError(f"unknown attribute {attribute!r}")

    def group(self, attribute: str) -> int | None:
        """Group index within an attribute, or None when unobserved."""
        if not self.block_observed(attribute):
            return None
        if attribute == "gender":
            return int(self.values[GENDER_SLICE].argmax())
        if attribute == "race":
            return int(self.values[RACE_SLICE].argmax())
        return age_bin_of(float(self.values[AGE_INDEX]))

    def group_label(self, attribute: str) -> str:
        g = self.group(attribute)
        if g is None:
            return ""
        if attribute == "gender":
            return GENDER_LABELS[g]
        if attribute == "race":
            return RACE_LABELS[g]
        return AGE_BIN_LABELS[g]

    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def fully_missing(self) -> bool:
        return not self.mask.any()

    def copy(self) -> "DemographicVector":
        return DemographicVector(self.values.copy(), self.mask.copy())


@dataclass(frozen=True)
class SurvivalRecord:
    """Follow-up time (positive) and event indicator (1 = event, 0 = censored)."""

    time: float
    event: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.time) and self.time > 0.0):
            raise DomainError(f"survival time must be positive and finite, got {self.time}")
        if self.event not in (0, 1):
            raise DomainError(f"event indicator must be 0 or 1, got {self.event}")


@dataclass
class FeatureBag:
    """One bag: K instance feature rows plus bag-level labels and metadata."""

    bag_id: str
    features: np.ndarray  # K x d, float32
    label: int
    class_count: int
    demographics: DemographicVector
    survival: SurvivalRecord | None = None

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ConfigError(f"features must be K x d with K,d >= 1, got {self.features.shape}")
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if not 0 <= self.label < self.class_count:
            raise DomainError(f"label {self.label} outside [0, {self.class_count})")

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# Binary bag format


def write_bag(bag: FeatureBag, path: str | Path) -> None:
    """Serialize one bag to the binary layout documented in the module docstring."""
    path = Path(path)
    parts = [
        MAGIC,
        struct.pack("<IIIHHB", FORMAT_VERSION, bag.k, bag.dim, bag.class_count, bag.label,
                    1 if bag.survival is not None else 0),
    ]
    if bag.survival is not None:
        parts.append(struct.pack("<dB", bag.survival.time, bag.survival.event))
    parts.append(struct.pack("<8d", *bag.demographics.values))
    mask_byte = 0
    for i in range(8):
        if bag.demographics.mask[i]:
            mask_byte |= 1 << i
    parts.append(struct.pack("<B", mask_byte))
    parts.append(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    path.write_bytes(body + struct.pack("<I", crc))


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise FormatError(f"truncated bag file while reading {what}", offset=offset)


def read_bag(path: str | Path) -> FeatureBag:
    """Read and validate one bag; the bag id comes from the file stem."""
    path = Path(path)
    buf = path.read_bytes()
    _need(buf, 0, 4, "magic")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0)
    _need(buf, 4, 17, "header")
    version, k, d, class_count, label, survival_present = struct.unpack_from("<IIIHHB", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if k < 1 or d < 1:
        raise FormatError(f"bag dimensions K={k}, d={d} must be >= 1", offset=8)
    if class_count < 1:
        raise FormatError(f"class count {class_count} must be >= 1", offset=16)
    if label >= class_count:
        raise FormatError(f"label {label} outside [0, {class_count})", offset=18)
    if survival_present not in (0, 1):
        raise FormatError(f"survival flag must be 0 or 1, got {survival_present}", offset=20)
    offset = 21
    survival = None
    if survival_present:
        _need(buf, offset, 9, "survival record")
        time, event = struct.unpack_from("<dB", buf, offset)
        if event not in (0, 1):
            raise FormatError(f"event indicator must be 0 or 1, got {event}", offset=offset + 8)
        if not (math.isfinite(time) and time > 0.0):
            raise FormatError(f"survival time {time} must be positive and finite", offset=offset)
        survival = SurvivalRecord(time=time, event=event)
        offset += 9
    _need(buf, offset, 64, "demographics")
    values = np.array(struct.unpack_from("<8d", buf, offset))
    offset += 64
    _need(buf, offset, 1, "demographic mask")
    (mask_byte,) = struct.unpack_from("<B", buf, offset)
    mask = np.array([(mask_byte >> i) & 1 for i in range(8)], dtype=bool)
    offset += 1
    feat_bytes = k * d * 4
    _need(buf, offset, feat_bytes, "features")
    features = np.frombuffer(buf, dtype="<f4", count=k * d, offset=offset).reshape(k, d)
    offset += feat_bytes
    _need(buf, offset, 4, "checksum")
    (stored_crc,) = struct.unpack_from("<I", buf, offset)
    actual_crc = zlib.crc32(buf[:offset]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=offset,
        )
    if offset + 4 != len(buf):
        raise FormatError("trailing bytes after checksum", offset=offset + 4)
    try:
        demo = DemographicVector(values, mask)
    except DomainError as exc:
        raise FormatError(f"invalid demographics: {exc}", offset=21 + (9 if survival else 0)) from exc
    return FeatureBag(
        bag_id=path.stem,
        features=features.copy(),
        label=label,
        class_count=class_count,
        demographics=demo,
        survival=survival,
    )


# ---------------------------------------------------------------------------
# Cohorts


SPLITS = ("train", "val", "test")


@dataclass
class Cohort:
    """Bags plus an aligned split tag per bag."""

    bags: list[FeatureBag]
    splits: list[str]
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.bags) != len(self.splits):
            raise ConfigError("bags and splits must align")
        for s in self.splits:
            if s not in SPLITS:
                raise ConfigError(f"unknown split {s!r}")
        for b in self.bags:
            if b.class_count != self.class_count:
                raise ConfigError(
                    f"bag {b.bag_id} has class_count {b.class_count}, cohort says {self.class_count}"
                )
        if not self.class_names:
            if self.class_count == 2:
                self.class_names = ["negative", "positive"]
            else:
                self.class_names = [f"class_{i}" for i in range(self.class_count)]

    def split_bags(self, split: str) -> list[FeatureBag]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return [b for b, s in zip(self.bags, self.splits) if s == split]

    @property
    def dim(self) -> int:
        return self.bags[0].dim if self.bags else 0

    def __len__(self) -> int:
        return len(self.bags)


def auto_split(
    n: int, rng: np.random.Generator, fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
) -> list[str]:
    """Disjoint covering split tags: floor(0.6n) train, floor(0.15n) val, rest test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    order = rng.permutation(n)
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    tags = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return tags


def save_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    """Write bags/<id>.bag files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for bag, split in zip(cohort.bags, cohort.splits):
        rel = f"bags/{bag.bag_id}.bag"
        write_bag(bag, out_dir / rel)
        entries.append({"id": bag.bag_id, "path": rel, "split": split})
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_count": cohort.class_count,
        "class_names": cohort.class_names,
        "bags": entries,
    }
    manifest_path = out_dir / "cohort_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_cohort(manifest_path: str | Path) -> Cohort:
    """Load every bag named by a manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("class_count", "bags"):
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    bags, splits = [], []
    for entry in manifest["bags"]:
        bag = read_bag(manifest_path.parent / entry["path"])
        if bag.bag_id != entry["id"]:
            raise FormatError(
                f"manifest id {entry['id']!r} does not match file stem {bag.bag_id!r}"
            )
        bags.append(bag)
        splits.append(entry["split"])
    return Cohort(
        bags=bags,
        splits=splits,
        class_count=int(manifest["class_count"]),
        class_names=list(manifest.get("class_names", [])),
    )


# ---------------------------------------------------------------------------
# Synthetic confounded cohorts


@dataclass(frozen=True)
class DemographicMarginals:
    """Sampling probabilities per attribute; each tuple must sum to 1."""

    gender: tuple[float, ...] = (0.42, 0.58)
    race: tuple[float, ...] = (0.78, 0.09, 0.07, 0.06, 0.0)
    age_bins: tuple[float, ...] = (0.15, 0.20, 0.25, 0.25, 0.15)

    def __post_init__(self) -> None:
        for name, probs, want in (
            ("gender", self.gender, 2),
            ("race", self.race, 5),
            ("age_bins", self.age_bins, 5),
        ):
            if len(probs) != want:
                raise ConfigError(f"{name} needs {want} probabilities, got {len(probs)}")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ConfigError(f"{name} probabilities must be nonnegative and sum to 1")


@dataclass(frozen=True)
class ScmConfig:
    """Generator settings for a synthetic confounded cohort.

    Instance features are drawn Normal(mu_s + gamma * M_u, sigma^2):
    mu_s is the per-class direction (class 0 for background instances),
    M_u the bag's demographic direction, gamma the confounding strength.
    A rho-fraction of instances in positive-class bags carries the class
    signal; all other instances use the class-0 direction.
    """

    seed: int = 0
    n_bags: int = 200
    k: int = 16
    dim: int = 32
    class_count: int = 2
    rho: float = 0.5
    gamma: float = 0.0
    sigma: float = 0.3
    survival: bool = False
    marginals: DemographicMarginals = field(default_factory=DemographicMarginals)
    split_fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)

    def __post_init__(self) -> None:
        if self.n_bags < 1 or self.k < 1 or self.dim < 1:
            raise ConfigError("n_bags, k, dim must all be >= 1")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.sigma <= 0.0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


# Alignment of demographic directions with the class axis. Nonzero values
# make confounding decision-relevant (it shifts features along the axis a
# classifier uses), which is the regime the fairness metrics probe. Gender
# carries the largest alignment because the disparity metrics gate on the
# gender gap first; race and age act as weaker secondary shifts.
_GENDER_ALIGNMENT = 0.7
_RACE_ALIGNMENT = 0.3
_AGE_ALIGNMENT = 0.2

# Survival: exponential hazard rates per class (binary case scales for C>2).
_BASE_HAZARD = 0.05
_HAZARD_RATIO = 6.0
_CENSOR_HORIZON = 40.0

_AGE_BIN_YEAR_RANGES = ((20.0, 40.0), (40.0, 50.0), (50.0, 60.0), (60.0, 70.0), (70.0, 90.0))


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return v / n


def _aligned_direction(rng: np.random.Generator, axis: np.ndarray, alignment: float) -> np.ndarray:
    """Unit vector with a fixed component along ``axis`` plus a seeded orthogonal part."""
    raw = rng.normal(size=axis.size)
    orth = raw - np.dot(raw, axis) * axis
    orth = _unit(orth)
    return _unit(alignment * axis + math.sqrt(max(0.0, 1.0 - alignment**2)) * orth)


@dataclass(frozen=True)
class _ScmDirections:
    class_means: np.ndarray  # C x d unit rows
    gender: np.ndarray  # 2 x d
    race: np.ndarray  # 5 x d
    age: np.ndarray  # d


def _derive_directions(cfg: ScmConfig, rng: np.random.Generator) -> _ScmDirections:
    class_means = np.stack([_unit(rng.normal(size=cfg.dim)) for _ in range(cfg.class_count)])
    axis = _unit(class_means[1] - class_means[0])
    gender = np.stack(
        [
            _aligned_direction(rng, axis, +_GENDER_ALIGNMENT),
            _aligned_direction(rng, axis, -_GENDER_ALIGNMENT),
        ]
    )
    race_aligns = np.linspace(1.0, -1.0, 5) * _RACE_ALIGNMENT
    race = np.stack([_aligned_direction(rng, axis, a) for a in race_aligns])
    age = _aligned_direction(rng, axis, _AGE_ALIGNMENT)
    return _ScmDirections(class_means=class_means, gender=gender, race=race, age=age)


def _group_direction(dirs: _ScmDirections, gender: int, race: int, age_norm: float) -> np.ndarray:
    return dirs.gender[gender] + dirs.race[race] + (2.0 * age_norm - 1.0) * dirs.age


def generate_cohort(cfg: ScmConfig) -> Cohort:
    """Sample a cohort from the synthetic structural model.

    Demographics come from the configured marginals, the disease state
    uniformly over classes (independent of demographics), and features
    from per-class Gaussians shifted by gamma times the bag's
    demographic direction. With gamma = 0 features are independent of
    demographics by construction.
    """
    rng = np.random.default_rng(cfg.seed)
    dirs = _derive_directions(cfg, rng)
    hazards = _BASE_HAZARD * _HAZARD_RATIO ** np.linspace(0.0, 1.0, cfg.class_count)

    bags: list[FeatureBag] = []
    width = len(str(max(cfg.n_bags - 1, 1)))
    for i in range(cfg.n_bags):
        gender = int(rng.choice(2, p=cfg.marginals.gender))
        race = int(rng.choice(5, p=cfg.marginals.race))
        age_bin = int(rng.choice(5, p=cfg.marginals.age_bins))
        lo, hi = _AGE_BIN_YEAR_RANGES[age_bin]
        age_years = float(rng.uniform(lo, hi))
        demo = DemographicVector.make(gender, race, age_years)
        age_norm = float(demo.values[AGE_INDEX])

        label = int(rng.integers(cfg.class_count))
        shift = cfg.gamma * _group_direction(dirs, gender, race, age_norm)
        means = np.tile(dirs.class_means[0] + shift, (cfg.k, 1))
        if label > 0:
            n_signal = max(1, int(round(cfg.rho * cfg.k)))
            signal_rows = rng.choice(cfg.k, size=n_signal, replace=False)
            means[signal_rows] = dirs.class_means[label] + shift
        features = means + rng.normal(scale=cfg.sigma, size=(cfg.k, cfg.dim))

        survival = None
        if cfg.survival:
            event_time = float(rng.exponential(1.0 / hazards[label]))
            censor_time = float(rng.uniform(0.0, _CENSOR_HORIZON))
            time = max(min(event_time, censor_time), 1e-6)
            survival = SurvivalRecord(time=time, event=int(event_time <= censor_time))

        bags.append(
            FeatureBag(
                bag_id=f"bag{i:0{width}d}",
                features=features.astype(np.float32),
                label=label,
                class_count=cfg.class_count,
                demographics=demo,
                survival=survival,
            )
        )
    splits = auto_split(cfg.n_bags, rng, cfg.split_fractions)
    return Cohort(bags=bags, splits=splits, class_count=cfg.class_count)


def drop_demographics(
    cohort: Cohort,
    fraction: float,
    rng: np.random.Generator,
    blocks: Sequence[str] = ATTRIBUTES,
) -> Cohort:
    """Mask whole attribute blocks on an independent ``fraction`` of bags.

    Each bag is selected with probability ``fraction``; a selected bag
    has every listed block's mask bits cleared (the default clears all
    three, leaving the bag fully missing). Returns a new cohort; bags
    are copied, features shared.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must lie in [0, 1], got {fraction}")
    for b in blocks:
        if b not in ATTRIBUTES:
            raise ConfigError(f"unknown attribute block {b!r}")
    new_bags = []
    for bag in cohort.bags:
        demo = bag.demographics.copy()
        if rng.random() < fraction:
            for b in blocks:
                if b == "gender":
                    demo.mask[GENDER_SLICE] = False
                elif b == "race":
                    demo.mask[RACE_SLICE] = False
                else:
                    demo.mask[AGE_INDEX] = False
        new_bags.append(replace(bag, demographics=demo))
    return Cohort(
        bags=new_bags,
        splits=list(cohort.splits),
        class_count=cohort.class_count,
        class_names=list(cohort.class_names),
    )


def demographic_correlations(cohort: Cohort) -> np.ndarray:
    """|Pearson r| between each bag-mean feature coordinate and each
    demographic indicator, over all bags. Shape d x 8; constant columns
    yield zero correlation."""
    means = np.stack([bag.features.astype(np.float64).mean(axis=0) for bag in cohort.bags])
    demos = np.stack([bag.demographics.values for bag in cohort.bags])
    out = np.zeros((means.shape[1], 8))
    mc = means - means.mean(axis=0)
    dc = demos - demos.mean(axis=0)
    ms = mc.std(axis=0)
    ds = dc.std(axis=0)
    for j in range(8):
        if ds[j] == 0.0:
            continue
        cov = (mc * dc[:, j : j + 1]).mean(axis=0)
        valid = ms > 0.0
        out[valid, j] = np.abs(cov[valid] / (ms[valid] * ds[j]))
    return out
