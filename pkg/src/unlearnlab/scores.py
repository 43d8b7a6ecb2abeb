"""Per-example and per-partition difficulty scores.

Covers the embedding-space entanglement score between forget and retain
sets, the centroid-distance ranking used to generate entanglement buckets,
an RBF-kernel MMD cross-check, the subsampled in/out memorization
estimator, the epoch-averaged confidence proxy, and rank statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from . import backend
from .backend import EmbeddingMatrix, TrainConfig
from .data import ForgetPartition, LabeledDataset, make_partition


class DegenerateCentroidsError(ValueError):
    """Forget and retain centroids coincide; entanglement is undefined."""


SCORE_KINDS = ("memorization", "c-proxy", "centroid-distance")
BUCKET_MODES = ("lowest-n", "highest-n", "nearest-to-midpoint", "contiguous-range")


@dataclass(frozen=True, eq=False)
class ScoreProfile:
    """Per-example scalar scores keyed by example id."""

    kind: str
    values: dict[int, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        clean = {int(i): float(v) for i, v in self.values.items()}
        object.__setattr__(self, "values", clean)
        lo, hi = (-1.0, 1.0) if self.kind == "memorization" else (0.0, 1.0)
        if self.kind != "centroid-distance":
            bad = [i for i, v in clean.items() if not lo <= v <= hi]
            if bad:
                raise ValueError(f"{self.kind} scores outside [{lo}, {hi}] for ids {bad[:5]}")

    def __len__(self) -> int:
        return len(self.values)

    def covered_ids(self) -> frozenset[int]:
        return frozenset(self.values)


@dataclass(frozen=True)
class BucketSpec:
    """Selection rule over a score profile: which n examples to pick."""

    key: str
    mode: str
    n: int
    offset: int = 0

    def __post_init__(self):
        if self.mode not in BUCKET_MODES:
            raise ValueError(f"unknown bucket mode {self.mode!r}")
        if self.n < 1:
            raise ValueError("bucket size n must be >= 1")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")


def entanglement_score(emb_retain: EmbeddingMatrix, emb_forget: EmbeddingMatrix) -> float:
    """Intra-set embedding variance over inter-centroid separation.

    Higher values mean the two sets are more entangled in embedding space.
    Invariant under common translation and positive uniform scaling of all
    embeddings; symmetric in its two arguments.
    """
    r, s = emb_retain.vectors, emb_forget.vectors
    if r.shape[1] != s.shape[1]:
        raise ValueError("embedding dimensions differ between the two sets")
    mu_r = r.mean(axis=0)
    mu_s = s.mean(axis=0)
    pooled = np.concatenate([r, s])
    mu = pooled.mean(axis=0)
    numerator = float(
        np.mean(np.sum((r - mu_r) ** 2, axis=1)) + np.mean(np.sum((s - mu_s) ** 2, axis=1))
    )
    denominator = 0.5 * float(np.sum((mu_r - mu) ** 2) + np.sum((mu_s - mu) ** 2))
    scale = numerator if numerator > 0 else 1.0
    if denominator <= 1e-12 * scale:
        raise DegenerateCentroidsError(
            "degenerate: identical centroids (inter-centroid separation ~ 0)"
        )
    return numerator / denominator


def centroid_distance_ranking(emb_all: EmbeddingMatrix) -> list[int]:
    """Ids ordered by descending squared distance to the global centroid.

    Ties break by ascending id so the ranking is reproducible.
    """
    mu = emb_all.vectors.mean(axis=0)
    d = np.sum((emb_all.vectors - mu) ** 2, axis=1)
    ids = np.asarray(emb_all.ids, dtype=np.int64)
    order = np.lexsort((ids, -d))
    return [int(ids[i]) for i in order]


def es_buckets(
    ranking: Sequence[int], size: int, offsets: Sequence[int]
) -> list[ForgetPartition]:
    """Contiguous windows of the centroid-distance ranking as forget sets.

    The window at offset 0 (largest distances) is the least entangled;
    windows deeper in the ranking grow progressively more entangled with
    the rest of the data.
    """
    ranking = [int(i) for i in ranking]
    universe = set(ranking)
    if len(universe) != len(ranking):
        raise ValueError("ranking contains duplicate ids")
    names = ("es-low", "es-med", "es-high") if len(offsets) == 3 else None
    partitions = []
    for j, off in enumerate(offsets):
        if off < 0 or off + size > len(ranking):
            raise ValueError(f"window [{off}, {off + size}) out of bounds for {len(ranking)} ids")
        window = ranking[off : off + size]
        provenance = names[j] if names else f"es-window-{off}"
        partitions.append(make_partition(universe, window, provenance))
    return partitions


def median_heuristic_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    d = cdist(pooled, pooled)
    upper = d[np.triu_indices(len(pooled), k=1)]
    if len(upper) == 0:
        raise ValueError("median heuristic needs at least two pooled points")
    return float(np.median(upper))


def mmd_rbf(
    emb_a: EmbeddingMatrix,
    emb_b: EmbeddingMatrix,
    bandwidth: float | str = "median-heuristic",
) -> float:
    """Squared MMD with an RBF kernel (biased V-statistic, clamped at 0)."""
    a, b = emb_a.vectors, emb_b.vectors
    if a.shape[1] != b.shape[1]:
        raise ValueError("embedding dimensions differ between the two sets")
    if bandwidth == "median-heuristic":
        sigma = median_heuristic_bandwidth(np.concatenate([a, b]))
    else:
        sigma = float(bandwidth)
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")

    def kernel_mean(x, y):
        return float(np.mean(np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * sigma**2))))

    value = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b)
    return max(0.0, value)


def estimate_memorization(
    dataset: LabeledDataset,
    train_ids: Iterable[int],
    trainer: TrainConfig,
    m_models: int = 20,
    inclusion_prob: float = 0.7,
    seed: int = 0,
) -> ScoreProfile:
    """Subsampled in/out memorization estimate per train example.

    Trains m models, each on an independent inclusion_prob-subsample of
    the train ids, and scores each example as (mean correctness over
    models whose subsample contains it) minus (mean correctness over the
    models excluding it). Ids landing in every subsample or in none get
    score 0 and are listed under metadata["low_confidence_ids"].
    """
    if m_models < 2:
        raise ValueError("m_models must be >= 2")
    if not 0 < inclusion_prob < 1:
        raise ValueError("inclusion_prob must lie in (0, 1)")
    ids_sorted = sorted(int(i) for i in train_ids)
    n = len(ids_sorted)
    labels = dataset.labels_for(ids_sorted)

    children = np.random.SeedSequence(seed).spawn(m_models + 1)
    mask_rng = np.random.default_rng(children[0])
    model_seeds = [int(c.generate_state(1)[0]) for c in children[1:]]

    in_counts = np.zeros(n)
    in_correct = np.zeros(n)
    out_counts = np.zeros(n)
    out_correct = np.zeros(n)
    for j in range(m_models):
        mask = mask_rng.random(n) < inclusion_prob
        if not mask.any() or mask.all():
            # keep both ensembles nonempty on tiny inputs
            flip = mask_rng.integers(n)
            mask[flip] = not mask[flip]
        subset = [ids_sorted[i] for i in np.flatnonzero(mask)]
        config = replace(trainer, seed=model_seeds[j], record_confidence_trace=False)
        checkpoint, _ = backend.train(dataset, subset, config)
        predictions = backend.predict(checkpoint, dataset, ids_sorted)
        correct = np.array(
            [predictions[i] == int(y) for i, y in zip(ids_sorted, labels)], dtype=np.float64
        )
        in_counts += mask
        in_correct += mask * correct
        out_counts += ~mask
        out_correct += (~mask) * correct

    values: dict[int, float] = {}
    flagged: list[int] = []
    for r, i in enumerate(ids_sorted):
        if in_counts[r] == 0 or out_counts[r] == 0:
            values[i] = 0.0
            flagged.append(i)
        else:
            values[i] = float(in_correct[r] / in_counts[r] - out_correct[r] / out_counts[r])
    return ScoreProfile(
        kind="memorization",
        values=values,
        metadata={
            "m_models": m_models,
            "inclusion_prob": inclusion_prob,
            "seed": seed,
            "low_confidence_ids": flagged,
        },
    )


def confidence_proxy(trace: backend.ConfidenceTrace) -> ScoreProfile:
    """Mean over training epochs of the true-label softmax probability."""
    if not trace.values:
        raise ValueError("confidence trace is empty")
    values = {i: float(np.mean(t)) for i, t in trace.values.items()}
    return ScoreProfile(kind="c-proxy", values=values, metadata={"epochs": trace.epochs})


def spearman(a: Mapping[int, float], b: Mapping[int, float]) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    if set(a) != set(b):
        raise ValueError("score maps cover different id sets")
    keys = sorted(a)
    if len(keys) < 2:
        raise ValueError("need at least 2 paired scores")
    xs = np.array([a[k] for k in keys], dtype=np.float64)
    ys = np.array([b[k] for k in keys], dtype=np.float64)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise ValueError("rank correlation undefined for a constant score map")
    rho = float(spearmanr(xs, ys).statistic)
    return rho


def score_buckets(profile: ScoreProfile, spec: BucketSpec) -> frozenset[int]:
    """Pick n ids from a profile by the bucket rule; ties break by ascending id."""
    if spec.key != profile.kind:
        raise ValueError(f"bucket key {spec.key!r} does not match profile kind {profile.kind!r}")
    items = list(profile.values.items())
    if spec.mode == "contiguous-range":
        if spec.offset + spec.n > len(items):
            raise ValueError("contiguous-range window exceeds profile size")
    elif spec.n > len(items):
        raise ValueError(f"n={spec.n} exceeds profile size {len(items)}")
    if spec.mode == "lowest-n":
        chosen = sorted(items, key=lambda kv: (kv[1], kv[0]))[: spec.n]
    elif spec.mode == "highest-n":
        chosen = sorted(items, key=lambda kv: (-kv[1], kv[0]))[: spec.n]
    elif spec.mode == "nearest-to-midpoint":
        chosen = sorted(items, key=lambda kv: (abs(kv[1] - 0.5), kv[0]))[: spec.n]
    else:
        ordered = sorted(items, key=lambda kv: (kv[1], kv[0]))
        chosen = ordered[spec.offset : spec.offset + spec.n]
    return frozenset(i for i, _ in chosen)


def three_buckets(
    profile: ScoreProfile, n: int, exclude_flagged: bool = True
) -> tuple[frozenset[int], frozenset[int], frozenset[int]]:
    """(lowest-n, nearest-to-midpoint-n, highest-n) buckets, checked disjoint.

    Low-confidence ids flagged by the estimator are excluded before
    selection. Overlapping buckets mean the score mass is too degenerate
    to separate difficulty levels, which is reported as an error.
    """
    values = dict(profile.values)
    if exclude_flagged:
        for i in profile.metadata.get("low_confidence_ids", ()):
            values.pop(int(i), None)
    usable = ScoreProfile(profile.kind, values, dict(profile.metadata))
    low = score_buckets(usable, BucketSpec(profile.kind, "lowest-n", n))
    mid = score_buckets(usable, BucketSpec(profile.kind, "nearest-to-midpoint", n))
    high = score_buckets(usable, BucketSpec(profile.kind, "highest-n", n))
    if low & mid or mid & high or low & high:
        raise ValueError("score buckets overlap; score distribution too degenerate")
    return low, mid, high


def save_score_profile(profile: ScoreProfile, path: str | Path) -> None:
    payload = {
        "kind": profile.kind,
        "metadata": profile.metadata,
        "values": {str(i): v for i, v in sorted(profile.values.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_score_profile(path: str | Path) -> ScoreProfile:
    """Load a profile; accepts externally computed id -> score tables."""
    try:
        payload = json.loads(Path(path).read_text())
        kind = payload["kind"]
        values = {int(i): float(v) for i, v in payload["values"].items()}
        metadata = payload.get("metadata", {})
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed score profile {path}: {exc}") from exc
    return ScoreProfile(kind, values, metadata)
