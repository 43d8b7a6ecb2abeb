"""Refine-then-sequence unlearning pipeline.

Refinement splits a forget set into K homogeneous subsets (by a score
profile or at random); a meta-policy assigns an algorithm to each subset
and fixes the execution order; the executor unlearns the subsets one at a
time, keeping every not-yet-unlearned subset inside the running retain
set, and snapshots accuracies after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import backend, unlearners
from .backend import ModelCheckpoint
from .data import ForgetPartition, LabeledDataset, PartitionError, random_subsets
from .scores import ScoreProfile
from .unlearners import UnlearnConfig, UnlearnResult

REFINEMENT_KEYS = ("memorization", "c-proxy", "random")
ORDERS = ("low-to-high", "high-to-low")


@dataclass(frozen=True)
class RefinementSpec:
    """How to split the forget set: by which score, into how many subsets."""

    key: str
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.key not in REFINEMENT_KEYS:
            raise ValueError(f"unknown refinement key {self.key!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class MetaPolicy:
    """Per-subset algorithm assignment plus execution order.

    `assignment` maps the bucket index in ascending-score order to that
    bucket's algorithm config; `order` permutes buckets for execution and
    may be "low-to-high", "high-to-low", or an explicit permutation.
    """

    assignment: dict[int, UnlearnConfig]
    order: str | tuple[int, ...] = "low-to-high"

    def permutation(self, k: int) -> tuple[int, ...]:
        if self.order == "low-to-high":
            perm = tuple(range(k))
        elif self.order == "high-to-low":
            perm = tuple(reversed(range(k)))
        else:
            perm = tuple(int(i) for i in self.order)
            if sorted(perm) != list(range(k)):
                raise ValueError(f"order {perm} is not a permutation of 0..{k - 1}")
        missing = [i for i in range(k) if i not in self.assignment]
        if missing:
            raise ValueError(f"assignment missing buckets {missing}")
        return perm


@dataclass(frozen=True)
class StepRecord:
    """Snapshot taken right after one sequential unlearning step."""

    subset_ids: frozenset[int]
    algorithm: str
    forget_acc: float
    retain_acc: float
    test_acc: float
    per_subset_forget_acc: dict[int, float]
    wall_seconds: float


@dataclass(frozen=True)
class SequenceTrace:
    steps: tuple[StepRecord, ...]

    def __len__(self) -> int:
        return len(self.steps)


class RumStepError(RuntimeError):
    """A step's unlearner failed; the trace of completed steps is preserved."""

    def __init__(self, step: int, cause: Exception, partial_trace: SequenceTrace):
        super().__init__(f"unlearning failed at step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.partial_trace = partial_trace


def refine(
    partition: ForgetPartition,
    scores: ScoreProfile | None,
    spec: RefinementSpec,
) -> list[frozenset[int]]:
    """Split the forget set into K disjoint subsets covering it exactly.

    Score-keyed refinement yields contiguous ascending score ranges (ties
    break by id); the random key delegates to random equal-size subsets.
    """
    forget = sorted(partition.forget_ids)
    if spec.k > len(forget):
        raise PartitionError(f"k={spec.k} exceeds |forget|={len(forget)}")
    if spec.key == "random":
        return random_subsets(partition, spec.k, spec.seed)
    if scores is None:
        raise ValueError(f"refinement by {spec.key!r} needs a score profile")
    if scores.kind != spec.key:
        raise ValueError(f"score profile kind {scores.kind!r} does not match key {spec.key!r}")
    missing = [i for i in forget if i not in scores.values]
    if missing:
        raise ValueError(f"score profile does not cover forget ids, e.g. {missing[:5]}")
    ranked = sorted(forget, key=lambda i: (scores.values[i], i))
    base, extra = divmod(len(ranked), spec.k)
    subsets, start = [], 0
    for j in range(spec.k):
        size = base + (1 if j < extra else 0)
        subsets.append(frozenset(ranked[start : start + size]))
        start += size
    return subsets


def order_variants(subsets: Sequence[frozenset[int]]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """The two canonical execution orders over score-sorted subsets."""
    k = len(subsets)
    return tuple(range(k)), tuple(reversed(range(k)))


def retain_schedule(
    partition: ForgetPartition,
    subsets: Sequence[frozenset[int]],
    order: Sequence[int] | None = None,
) -> list[frozenset[int]]:
    """Retain set per step: base retain plus every not-yet-unlearned subset."""
    _check_refinement(partition, subsets)
    order = list(order) if order is not None else list(range(len(subsets)))
    schedule = []
    for t in range(len(order)):
        remaining: frozenset[int] = frozenset()
        for j in order[t + 1 :]:
            remaining |= subsets[j]
        schedule.append(partition.retain_ids | remaining)
    return schedule


def _check_refinement(partition: ForgetPartition, subsets: Sequence[frozenset[int]]) -> None:
    union: set[int] = set()
    total = 0
    for s in subsets:
        union |= s
        total += len(s)
    if total != len(union) or union != set(partition.forget_ids):
        raise PartitionError("subsets must partition the forget set exactly")


def run_rum(
    model: ModelCheckpoint,
    dataset: LabeledDataset,
    partition: ForgetPartition,
    subsets: Sequence[frozenset[int]],
    policy: MetaPolicy,
) -> tuple[ModelCheckpoint, SequenceTrace]:
    """Unlearn the subsets sequentially under the meta-policy.

    Step t unlearns bucket order[t] from the current model against a
    retain set holding everything not yet unlearned; an evaluation
    snapshot is recorded after every step. A failing step raises
    RumStepError carrying the partial trace.
    """
    subsets = [frozenset(s) for s in subsets]
    _check_refinement(partition, subsets)
    order = policy.permutation(len(subsets))
    test_ids = sorted(dataset.split_ids("test"))
    current = model
    steps: list[StepRecord] = []
    for t, bucket in enumerate(order):
        remaining: frozenset[int] = frozenset()
        for j in order[t + 1 :]:
            remaining |= subsets[j]
        step_partition = ForgetPartition(
            forget_ids=subsets[bucket],
            retain_ids=partition.retain_ids | remaining,
            provenance=f"rum-step-{t}-bucket-{bucket}",
        )
        config = policy.assignment[bucket]
        try:
            result = unlearners.unlearn(current, dataset, step_partition, config)
        except Exception as exc:
            raise RumStepError(t, exc, SequenceTrace(tuple(steps))) from exc
        current = result.model
        steps.append(
            StepRecord(
                subset_ids=subsets[bucket],
                algorithm=config.algorithm,
                forget_acc=backend.evaluate(current, dataset, partition.forget_ids),
                retain_acc=backend.evaluate(current, dataset, partition.retain_ids),
                test_acc=backend.evaluate(current, dataset, test_ids),
                per_subset_forget_acc={
                    j: backend.evaluate(current, dataset, subsets[j]) for j in range(len(subsets))
                },
                wall_seconds=result.wall_seconds,
            )
        )
    return current, SequenceTrace(tuple(steps))
