"""Synthetic source/target feature data with covariate and label-space shift.

Source classes are isotropic Gaussian clusters. The target domain reuses the
class identities but translates every class mean along one shared seeded
direction and rotates all target features in a seeded 2-D plane.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import ConfigError, DataError

SETTINGS = ("closed", "closed_label_shift", "open", "partial", "open_partial")
SPLITS = ("train", "val", "test")
DOMAINS = ("source", "target")
SPLIT_FRACTIONS = {"val": 0.2, "test": 0.3}
LABEL_SHIFT_RATIO = 0.85


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes_total: int = 12
    feature_dim: int = 8
    samples_per_class_per_domain: int = 100
    cluster_spread: float = 0.5
    shift_magnitude: float = 3.0
    rotation_angle: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.num_classes_total < 2:
            raise ConfigError(
                f"num_classes_total must be >= 2, got {self.num_classes_total}"
            )
        if self.samples_per_class_per_domain < 1:
            raise ConfigError("samples_per_class_per_domain must be positive")
        if self.cluster_spread < 0 or self.shift_magnitude < 0:
            raise ConfigError("cluster_spread and shift_magnitude must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@dataclass(frozen=True)
class ClassGroups:
    common: frozenset
    source_private: frozenset
    target_private: frozenset

    def as_dict(self) -> dict[str, list[int]]:
        return {
            "common": sorted(self.common),
            "source_private": sorted(self.source_private),
            "target_private": sorted(self.target_private),
        }

    def nonempty(self) -> list[frozenset]:
        return [g for g in (self.common, self.source_private, self.target_private) if g]


@dataclass(frozen=True)
class LabelSpaceConfig:
    source_classes: tuple
    target_classes: tuple
    setting_name: str = "closed"

    def __post_init__(self):
        object.__setattr__(self, "source_classes", tuple(sorted(set(self.source_classes))))
        object.__setattr__(self, "target_classes", tuple(sorted(set(self.target_classes))))
        if self.setting_name not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting_name!r}")
        src, trg = set(self.source_classes), set(self.target_classes)
        if not src & trg:
            raise ConfigError("source and target label sets share no class")
        name = self.setting_name
        if name in ("closed", "closed_label_shift") and src != trg:
            raise ConfigError(f"{name} requires identical label sets")
        if name == "open" and not src < trg:
            raise ConfigError("open requires source to be a strict subset of target")
        if name == "partial" and not trg < src:
            raise ConfigError("partial requires target to be a strict subset of source")
        if name == "open_partial" and (src <= trg or trg <= src):
            raise ConfigError("open_partial requires both private groups nonempty")

    @property
    def all_classes(self) -> tuple:
        return tuple(sorted(set(self.source_classes) | set(self.target_classes)))

    def to_dict(self) -> dict:
        return {
            "source_classes": list(self.source_classes),
            "target_classes": list(self.target_classes),
            "setting_name": self.setting_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelSpaceConfig":
        return cls(tuple(d["source_classes"]), tuple(d["target_classes"]), d["setting_name"])


@dataclass
class FeatureDataset:
    """Feature matrix plus per-sample labels, labeled flags and split names."""

    features: np.ndarray
    class_ids: np.ndarray
    domain: str
    labeled_mask: np.ndarray
    split: np.ndarray = None
    label_set: tuple = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        n = self.features.shape[0]
        if self.split is None:
            self.split = np.full(n, "train")
        self.split = np.asarray(self.split, dtype="<U5")
        if self.label_set is None:
            self.label_set = tuple(int(c) for c in np.unique(self.class_ids))
        self.label_set = tuple(sorted(int(c) for c in self.label_set))
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}")
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if not (len(self.class_ids) == len(self.labeled_mask) == len(self.split) == n):
            raise DataError("per-sample arrays must match the number of feature rows")
        if not np.isin(self.class_ids, self.label_set).all():
            raise DataError(f"{self.domain} dataset has class ids outside its label set")
        if not np.isin(self.split, SPLITS).all():
            raise DataError("split values must be train/val/test")
        if self.domain == "source" and not self.labeled_mask.all():
            raise DataError("source samples must all be labeled")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "FeatureDataset":
        mask = np.asarray(mask)
        return FeatureDataset(
            self.features[mask],
            self.class_ids[mask],
            self.domain,
            self.labeled_mask[mask],
            self.split[mask],
            self.label_set,
        )

    def select(self, split=None, labeled=None) -> "FeatureDataset":
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.split == split
        if labeled is not None:
            keep &= self.labeled_mask == labeled
        return self.subset(keep)

    def class_counts(self) -> dict[int, int]:
        return {c: int((self.class_ids == c).sum()) for c in self.label_set}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain.encode())
        h.update(np.asarray(self.label_set, dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.class_ids.astype("<i8").tobytes())
        h.update(self.labeled_mask.astype(np.uint8).tobytes())
        h.update("\n".join(self.split.tolist()).encode())
        return h.hexdigest()

    def equals(self, other: "FeatureDataset") -> bool:
        return (
            self.domain == other.domain
            and self.label_set == other.label_set
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.labeled_mask, other.labeled_mask)
            and np.array_equal(self.split, other.split)
        )


def _unit_vector(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _rotation_matrix(rng, d, angle):
    # rotation by `angle` inside a seeded random 2-D plane, identity elsewhere
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (
        np.eye(d)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )


def generate_domain_pair(cfg: SyntheticConfig) -> tuple[FeatureDataset, FeatureDataset]:
    """Draw a labeled source domain and a shifted target domain.

    Every class gets ``samples_per_class_per_domain`` samples in both domains.
    Target samples start unlabeled; use :func:`split_and_label` to draw k shots.
    """
    if not isinstance(cfg, SyntheticConfig):
        raise ConfigError("generate_domain_pair expects a SyntheticConfig")
    rng = np.random.default_rng(cfg.seed)
    C, d, n = cfg.num_classes_total, cfg.feature_dim, cfg.samples_per_class_per_domain
    radius = 10.0 * cfg.cluster_spread
    means = np.stack([radius * _unit_vector(rng, d) for _ in range(C)])
    direction = _unit_vector(rng, d)
    rotation = _rotation_matrix(rng, d, cfg.rotation_angle)
    labels = np.repeat(np.arange(C), n)

    src_x = means[labels] + cfg.cluster_spread * rng.standard_normal((C * n, d))
    trg_means = means + cfg.shift_magnitude * direction
    trg_x = trg_means[labels] + cfg.cluster_spread * rng.standard_normal((C * n, d))
    trg_x = trg_x @ rotation.T

    classes = tuple(range(C))
    source = FeatureDataset(src_x, labels, "source", np.ones(C * n, bool), None, classes)
    target = FeatureDataset(trg_x, labels.copy(), "target", np.zeros(C * n, bool), None, classes)
    return source, target


def default_group_counts(setting: str, num_classes: int) -> dict[str, int]:
    if setting in ("closed", "closed_label_shift"):
        return {"common": num_classes, "source_private": 0, "target_private": 0}
    half = num_classes // 2
    if setting == "open":
        return {"common": half, "source_private": 0, "target_private": num_classes - half}
    if setting == "partial":
        return {"common": half, "source_private": num_classes - half, "target_private": 0}
    if setting == "open_partial":
        quarter = (num_classes - half) // 2
        return {
            "common": half,
            "source_private": quarter,
            "target_private": num_classes - half - quarter,
        }
    raise ConfigError(f"unknown setting {setting!r}")


def _check_counts(setting, counts, available):
    common = counts.get("common", 0)
    sp = counts.get("source_private", 0)
    tp = counts.get("target_private", 0)
    if min(common, sp, tp) < 0:
        raise ConfigError("group counts must be nonnegative")
    if common < 1:
        raise ConfigError("at least one common class is required")
    if common + sp + tp > available:
        raise ConfigError(
            f"group counts {common}+{sp}+{tp} exceed the {available} available classes"
        )
    required = {
        "closed": (False, False),
        "closed_label_shift": (False, False),
        "open": (False, True),
        "partial": (True, False),
        "open_partial": (True, True),
    }
    if setting not in required:
        raise ConfigError(f"unknown setting {setting!r}")
    need_sp, need_tp = required[setting]
    if (sp > 0) != need_sp or (tp > 0) != need_tp:
        raise ConfigError(
            f"setting {setting} needs source_private {'> 0' if need_sp else '= 0'} "
            f"and target_private {'> 0' if need_tp else '= 0'}, got {sp} and {tp}"
        )
    return common, sp, tp


def _keep_classes(ds: FeatureDataset, classes, per_class_limit=None) -> FeatureDataset:
    keep = np.zeros(len(ds), dtype=bool)
    for c in classes:
        idx = np.flatnonzero(ds.class_ids == c)
        if per_class_limit is not None:
            idx = idx[: per_class_limit[c]]
        keep[idx] = True
    out = ds.subset(keep)
    out.label_set = tuple(sorted(classes))
    return out


def apply_label_space_setting(
    src: FeatureDataset,
    trg: FeatureDataset,
    setting: str,
    counts: Mapping[str, int] | None = None,
) -> tuple[FeatureDataset, FeatureDataset, LabelSpaceConfig]:
    """Restrict both domains to a label-space setting.

    Classes are assigned by contiguous blocks of the sorted class ids: the
    first ``common`` ids are shared, the next ``source_private`` ids exist only
    in the source, and the following ``target_private`` ids only in the target.
    Classes past the last block are dropped from both domains.
    """
    available = sorted(set(src.label_set) & set(trg.label_set))
    if counts is None:
        counts = default_group_counts(setting, len(available))
    common, sp, tp = _check_counts(setting, dict(counts), len(available))
    common_ids = available[:common]
    sp_ids = available[common : common + sp]
    tp_ids = available[common + sp : common + sp + tp]
    src_classes = common_ids + sp_ids
    trg_classes = common_ids + tp_ids

    limit = None
    if setting == "closed_label_shift":
        # geometric down-sampling by class rank; the first n samples of a
        # class are an iid draw so truncation needs no extra randomness
        trg_counts = trg.class_counts()
        limit = {
            c: max(1, int(round(trg_counts[c] * LABEL_SHIFT_RATIO**rank)))
            for rank, c in enumerate(trg_classes)
        }
    elif setting == "closed":
        src_counts, trg_counts = src.class_counts(), trg.class_counts()
        limit = {c: min(src_counts[c], trg_counts[c]) for c in common_ids}

    if setting == "closed":
        src_out = _keep_classes(src, src_classes, limit)
    else:
        src_out = _keep_classes(src, src_classes)
    trg_out = _keep_classes(trg, trg_classes, limit)
    cfg = LabelSpaceConfig(tuple(src_classes), tuple(trg_classes), setting)
    return src_out, trg_out, cfg


def class_groups(cfg: LabelSpaceConfig) -> ClassGroups:
    src, trg = set(cfg.source_classes), set(cfg.target_classes)
    return ClassGroups(frozenset(src & trg), frozenset(src - trg), frozenset(trg - src))


def split_counts(n: int) -> dict[str, int]:
    """Per-class split sizes: val and test rounded, the remainder goes to train."""
    n_val = int(round(n * SPLIT_FRACTIONS["val"]))
    n_test = int(round(n * SPLIT_FRACTIONS["test"]))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def split_and_label(trg: FeatureDataset, k: int, seed: int) -> FeatureDataset:
    """Split each target class 50/20/30 and label exactly ``k`` training samples."""
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    rng = np.random.default_rng(seed)
    split = np.empty(len(trg), dtype="<U5")
    labeled = np.zeros(len(trg), dtype=bool)
    for c in trg.label_set:
        idx = np.flatnonzero(trg.class_ids == c)
        idx = idx[rng.permutation(len(idx))]
        sizes = split_counts(len(idx))
        train_idx = idx[: sizes["train"]]
        split[train_idx] = "train"
        split[idx[sizes["train"] : sizes["train"] + sizes["val"]]] = "val"
        split[idx[sizes["train"] + sizes["val"] :]] = "test"
        if len(train_idx) < k:
            raise DataError(
                f"target class {c} has {len(train_idx)} training samples, fewer than k={k}"
            )
        labeled[rng.choice(train_idx, size=k, replace=False)] = True
    return FeatureDataset(trg.features, trg.class_ids, trg.domain, labeled, split, trg.label_set)


def make_benchmark(
    synthetic: SyntheticConfig,
    setting: str,
    counts: Mapping[str, int] | None = None,
    k: int = 3,
    split_seed: int | None = None,
) -> tuple[FeatureDataset, FeatureDataset, LabelSpaceConfig]:
    """Generate, restrict and split in one call; the usual entry point."""
    src, trg = generate_domain_pair(synthetic)
    src, trg, cfg = apply_label_space_setting(src, trg, setting, counts)
    seed = synthetic.seed if split_seed is None else split_seed
    return src, split_and_label(trg, k, seed), cfg


def infer_setting(source_classes, target_classes) -> str:
    """Name the setting implied by two label sets (plain closed for equal sets)."""
    src, trg = set(source_classes), set(target_classes)
    if src == trg:
        return "closed"
    if src < trg:
        return "open"
    if trg < src:
        return "partial"
    return "open_partial"
