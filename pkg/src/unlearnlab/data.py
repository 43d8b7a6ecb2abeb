"""Datasets, named splits, and forget/retain partition handling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class PartitionError(ValueError):
    """A forget/retain partition violates its invariants."""


class DatasetError(ValueError):
    """A dataset violates its invariants (ids, labels, or splits)."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Indexed classification examples with named splits.

    ids are unique and stable; labels lie in [0, num_classes); split id
    sets are subsets of the id universe and "train" and "test" are
    disjoint. Immutable after construction, safe to share across workers.
    """

    name: str
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict[str, frozenset[int]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float32)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", features)
        if ids.ndim != 1 or len(ids) != len(features) or len(ids) != len(labels):
            raise DatasetError("ids, features, labels must have matching length")
        if len(np.unique(ids)) != len(ids):
            raise DatasetError("example ids must be unique")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError("labels must lie in [0, num_classes)")
        universe = frozenset(int(i) for i in ids)
        normalized = {}
        for split_name, split_ids in self.splits.items():
            split_ids = frozenset(int(i) for i in split_ids)
            if not split_ids <= universe:
                raise DatasetError(f"split {split_name!r} references unknown ids")
            normalized[split_name] = split_ids
        for required in ("train", "test"):
            if required not in normalized:
                raise DatasetError(f"missing required split {required!r}")
        if normalized["train"] & normalized["test"]:
            raise DatasetError("train and test splits overlap")
        object.__setattr__(self, "splits", normalized)
        object.__setattr__(
            self, "_row_of", {int(i): r for r, i in enumerate(ids)}
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def split_ids(self, name: str) -> frozenset[int]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}")
        return self.splits[name]

    def rows(self, ids: Iterable[int]) -> np.ndarray:
        """Row indices for `ids`, preserving the given order."""
        row_of = self._row_of  # type: ignore[attr-defined]
        try:
            return np.array([row_of[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"unknown example id {exc.args[0]}") from exc

    def features_for(self, ids: Sequence[int]) -> np.ndarray:
        return self.features[self.rows(ids)]

    def labels_for(self, ids: Sequence[int]) -> np.ndarray:
        return self.labels[self.rows(ids)]

    def with_validation_split(self, fraction: float = 0.1, seed: int = 0) -> "LabeledDataset":
        """Carve a "val" split out of "train" (deterministic by seed)."""
        if not 0 < fraction < 1:
            raise DatasetError("validation fraction must lie in (0, 1)")
        train = sorted(self.splits["train"])
        rng = np.random.default_rng(seed)
        n_val = max(1, int(round(fraction * len(train))))
        if n_val >= len(train):
            raise DatasetError("validation split would empty the train split")
        val = frozenset(int(i) for i in rng.choice(train, size=n_val, replace=False))
        splits = dict(self.splits)
        splits["train"] = self.splits["train"] - val
        splits["val"] = val
        return LabeledDataset(
            self.name, self.ids, self.features, self.labels,
            self.num_classes, splits, dict(self.meta),
        )


@dataclass(frozen=True)
class ForgetPartition:
    """Disjoint forget/retain id sets covering a train split."""

    forget_ids: frozenset[int]
    retain_ids: frozenset[int]
    provenance: str = "custom"

    def __post_init__(self):
        forget = frozenset(int(i) for i in self.forget_ids)
        retain = frozenset(int(i) for i in self.retain_ids)
        object.__setattr__(self, "forget_ids", forget)
        object.__setattr__(self, "retain_ids", retain)
        if not forget:
            raise PartitionError("forget set must be nonempty")
        if not retain:
            raise PartitionError("retain set must be nonempty")
        if forget & retain:
            raise PartitionError("forget and retain sets overlap")

    @property
    def train_ids(self) -> frozenset[int]:
        return self.forget_ids | self.retain_ids


def make_partition(
    train_ids: Iterable[int], forget_ids: Iterable[int], provenance: str = "custom"
) -> ForgetPartition:
    """Build a partition with retain = train \\ forget.

    Rejects forget ids outside the train split, an empty forget set, and
    an empty retain set (every unlearner and the MIA need retain data).
    """
    train = frozenset(int(i) for i in train_ids)
    forget = frozenset(int(i) for i in forget_ids)
    if not forget:
        raise PartitionError("forget set must be nonempty")
    if not forget <= train:
        extra = sorted(forget - train)[:5]
        raise PartitionError(f"forget ids outside train split: {extra}")
    retain = train - forget
    if not retain:
        raise PartitionError("forget set may not cover the whole train split")
    return ForgetPartition(forget, retain, provenance)


def random_subsets(
    partition: ForgetPartition, k: int, seed: int
) -> list[frozenset[int]]:
    """Split the forget set into k random subsets with sizes differing by <= 1."""
    forget = sorted(partition.forget_ids)
    if not 1 <= k <= len(forget):
        raise PartitionError(f"k={k} out of range for |forget|={len(forget)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(forget))
    shuffled = [forget[i] for i in order]
    base, extra = divmod(len(forget), k)
    subsets, start = [], 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        subsets.append(frozenset(shuffled[start : start + size]))
        start += size
    return subsets


def save_partition(partition: ForgetPartition, path: str | Path) -> None:
    payload = {
        "provenance": partition.provenance,
        "forget_ids": sorted(partition.forget_ids),
        "retain_ids": sorted(partition.retain_ids),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_partition(
    path: str | Path, train_ids: Iterable[int] | None = None
) -> ForgetPartition:
    """Load a partition file; optionally check it against a train id universe."""
    try:
        payload = json.loads(Path(path).read_text())
        forget = payload["forget_ids"]
        retain = payload["retain_ids"]
        provenance = payload.get("provenance", "custom")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PartitionError(f"malformed partition file {path}: {exc}") from exc
    partition = ForgetPartition(frozenset(forget), frozenset(retain), provenance)
    if train_ids is not None:
        universe = frozenset(int(i) for i in train_ids)
        if partition.train_ids != universe:
            raise PartitionError(
                "partition does not match the train id universe "
                f"(missing={len(universe - partition.train_ids)}, "
                f"unknown={len(partition.train_ids - universe)})"
            )
    return partition


def make_blobs(
    *,
    n_per_class: int = 200,
    centers: np.ndarray | None = None,
    num_classes: int = 4,
    dim: int = 8,
    cluster_std: float | Sequence[float] = 1.0,
    test_fraction: float = 0.25,
    flip_fraction: float = 0.0,
    seed: int = 0,
    name: str = "blobs",
) -> LabeledDataset:
    """Gaussian-blob classification data for fast, controlled experiments.

    `flip_fraction` relabels that fraction of *train* examples to a
    uniformly-random other class (seeded); flipped ids are recorded in
    meta["flipped_ids"]. Test examples keep clean labels.
    """
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.normal(scale=4.0, size=(num_classes, dim))
    centers = np.asarray(centers, dtype=np.float64)
    num_classes = centers.shape[0]
    stds = np.broadcast_to(np.asarray(cluster_std, dtype=np.float64), (num_classes,))
    xs, ys = [], []
    for c in range(num_classes):
        xs.append(rng.normal(loc=centers[c], scale=stds[c], size=(n_per_class, centers.shape[1])))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    features = np.concatenate(xs).astype(np.float32)
    labels = np.concatenate(ys)
    n = len(labels)
    ids = np.arange(n, dtype=np.int64)

    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    test = frozenset(int(i) for i in order[:n_test])
    train = frozenset(int(i) for i in order[n_test:])

    flipped: list[int] = []
    if flip_fraction > 0:
        train_sorted = sorted(train)
        n_flip = int(round(flip_fraction * len(train_sorted)))
        chosen = rng.choice(train_sorted, size=n_flip, replace=False)
        for i in sorted(int(v) for v in chosen):
            other = [c for c in range(num_classes) if c != labels[i]]
            labels[i] = other[rng.integers(len(other))]
            flipped.append(i)

    return LabeledDataset(
        name=name,
        ids=ids,
        features=features,
        labels=labels,
        num_classes=num_classes,
        splits={"train": train, "test": test},
        meta={"flipped_ids": flipped, "seed": seed},
    )


def load_digits_subsample(
    *, n_examples: int = 1200, test_fraction: float = 0.25, seed: int = 0
) -> LabeledDataset:
    """Deterministic subsample of scikit-learn's 8x8 digits as (1,8,8) images."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    rng = np.random.default_rng(seed)
    n_total = len(raw.target)
    n_examples = min(n_examples, n_total)
    chosen = rng.choice(n_total, size=n_examples, replace=False)
    features = raw.images[chosen].astype(np.float32)[:, None, :, :] / 16.0
    labels = raw.target[chosen].astype(np.int64)
    ids = np.arange(n_examples, dtype=np.int64)
    order = rng.permutation(n_examples)
    n_test = int(round(test_fraction * n_examples))
    test = frozenset(int(i) for i in order[:n_test])
    train = frozenset(int(i) for i in order[n_test:])
    return LabeledDataset(
        name="digits",
        ids=ids,
        features=features,
        labels=labels,
        num_classes=10,
        splits={"train": train, "test": test},
        meta={"seed": seed},
    )
