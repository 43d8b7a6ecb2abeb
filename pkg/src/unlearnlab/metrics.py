"""Evaluation metrics: tug-of-war scores, membership inference, disagreement.

All metrics compare a candidate (unlearned) model against the
retrain-from-scratch oracle on frozen checkpoints; nothing here mutates a
model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import backend
from .backend import ModelCheckpoint
from .data import ForgetPartition, LabeledDataset


@dataclass(frozen=True)
class EvalTriple:
    """Accuracies on the forget, retain, and test sets."""

    forget_acc: float
    retain_acc: float
    test_acc: float

    def __post_init__(self):
        for name in ("forget_acc", "retain_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def tow(eval_u: EvalTriple, eval_r: EvalTriple) -> float:
    """Product of (1 - |accuracy gap to retrain|) over forget/retain/test.

    1.0 means the unlearned model matches the retrain oracle on all three
    sets; symmetric in its arguments because the gaps are absolute.
    """
    return (
        (1.0 - abs(eval_u.forget_acc - eval_r.forget_acc))
        * (1.0 - abs(eval_u.retain_acc - eval_r.retain_acc))
        * (1.0 - abs(eval_u.test_acc - eval_r.test_acc))
    )


def mia_gap(mia_u: float, mia_r: float) -> float:
    """Absolute distance between the two models' MIA scores (lower is better)."""
    return abs(mia_u - mia_r)


def tow_mia(mia_u: float, mia_r: float, eval_u: EvalTriple, eval_r: EvalTriple) -> float:
    """Tug-of-war with the forget-accuracy gap replaced by the MIA gap."""
    return (
        (1.0 - mia_gap(mia_u, mia_r))
        * (1.0 - abs(eval_u.retain_acc - eval_r.retain_acc))
        * (1.0 - abs(eval_u.test_acc - eval_r.test_acc))
    )


class Attacker(Protocol):
    """Binary membership classifier: fit on labeled features, then predict {0,1}."""

    def fit(self, features: np.ndarray, labels: np.ndarray) -> None: ...

    def predict(self, features: np.ndarray) -> np.ndarray: ...


class LogisticAttacker:
    """Regularized logistic regression on standardized confidence features.

    Full-batch gradient descent from a zero init: deterministic given its
    inputs, no solver dependency. Ties at probability 0.5 predict the
    positive ("training") class so the MIA score stays conservative.
    """

    def __init__(self, l2: float = 1e-3, lr: float = 0.5, steps: int = 400):
        self.l2 = l2
        self.lr = lr
        self.steps = steps
        self.weights: np.ndarray | None = None
        self._mean: np.ndarray | None = None
        self._std: np.ndarray | None = None

    def _design(self, features: np.ndarray) -> np.ndarray:
        z = (features - self._mean) / self._std
        return np.hstack([z, np.ones((len(z), 1))])

    def fit(self, features: np.ndarray, labels: np.ndarray) -> None:
        features = np.asarray(features, dtype=np.float64)
        self._mean = features.mean(axis=0)
        std = features.std(axis=0)
        self._std = np.where(std > 0, std, 1.0)
        x = self._design(features)
        y = np.asarray(labels, dtype=np.float64)
        w = np.zeros(x.shape[1])
        for _ in range(self.steps):
            p = 1.0 / (1.0 + np.exp(-(x @ w)))
            grad = x.T @ (p - y) / len(y) + self.l2 * w
            w -= self.lr * grad
        self.weights = w

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = self._design(np.asarray(features, dtype=np.float64))
        p = 1.0 / (1.0 + np.exp(-(x @ self.weights)))
        return (p >= 0.5).astype(np.int64)  # ties -> positive ("training")


@dataclass(frozen=True)
class MiaResult:
    """MIA score with attacker diagnostics."""

    score: float
    attacker_accuracy: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.score


def _attack_features(
    model: ModelCheckpoint, dataset: LabeledDataset, ids: Sequence[int]
) -> np.ndarray:
    conf = backend.confidences(model, dataset, ids)
    p = np.array([conf[int(i)] for i in ids], dtype=np.float64)
    loss = -np.log(np.clip(p, 1e-12, None))
    return np.stack([p, loss], axis=1)


def mia_score(
    model: ModelCheckpoint,
    dataset: LabeledDataset,
    partition: ForgetPartition,
    test_ids: Iterable[int],
    attacker_seed: int = 0,
    attacker: Attacker | None = None,
) -> MiaResult:
    """Fraction of forget examples an attacker calls "non-training".

    The attacker is trained on balanced confidence features from retain
    ("training", positive) and test ("non-training", negative) samples,
    then queried on the forget set. All-identical training features are
    flagged as degenerate instead of failing.
    """
    test_list = sorted(int(i) for i in test_ids)
    retain_list = sorted(partition.retain_ids)
    if not test_list or not retain_list:
        raise ValueError("MIA needs nonempty retain and test samples")
    m = min(len(retain_list), len(test_list))
    rng = np.random.default_rng(attacker_seed)
    retain_sample = [retain_list[i] for i in rng.choice(len(retain_list), size=m, replace=False)]
    test_sample = [test_list[i] for i in rng.choice(len(test_list), size=m, replace=False)]

    x_train = np.concatenate(
        [
            _attack_features(model, dataset, retain_sample),
            _attack_features(model, dataset, test_sample),
        ]
    )
    y_train = np.concatenate([np.ones(m, dtype=np.int64), np.zeros(m, dtype=np.int64)])
    degenerate = bool(np.allclose(x_train.std(axis=0), 0.0))

    attacker = attacker if attacker is not None else LogisticAttacker()
    attacker.fit(x_train, y_train)
    attacker_accuracy = float(np.mean(attacker.predict(x_train) == y_train))

    forget_list = sorted(partition.forget_ids)
    x_forget = _attack_features(model, dataset, forget_list)
    predicted = attacker.predict(x_forget)
    score = float(np.mean(predicted == 0))
    return MiaResult(score=score, attacker_accuracy=attacker_accuracy, degenerate=degenerate)


def disagreement(
    model_a: ModelCheckpoint,
    model_b: ModelCheckpoint,
    dataset: LabeledDataset,
    ids: Iterable[int],
) -> float:
    """Percentage of ids where the two models' predictions differ."""
    ids_sorted = sorted(int(i) for i in ids)
    pred_a = backend.predict(model_a, dataset, ids_sorted)
    pred_b = backend.predict(model_b, dataset, ids_sorted)
    differing = sum(1 for i in ids_sorted if pred_a[i] != pred_b[i])
    return 100.0 * differing / len(ids_sorted)


@dataclass(frozen=True)
class MetricsReport:
    """One unlearning run's metric bundle, serializable into a run record."""

    eval_unlearned: EvalTriple
    eval_retrain: EvalTriple
    tow: float
    tow_mia: float
    mia: float
    mia_retrain: float
    mia_gap: float
    disagreement_pct: dict[str, float]
    wall_seconds: float
    attacker_note: str = "two-feature logistic stand-in attacker (confidence + loss)"

    def __post_init__(self):
        recomputed = tow(self.eval_unlearned, self.eval_retrain)
        if abs(recomputed - self.tow) > 1e-12:
            raise ValueError("stored tow is inconsistent with the stored triples")
        if abs(abs(self.mia - self.mia_retrain) - self.mia_gap) > 1e-12:
            raise ValueError("stored mia_gap is inconsistent with the stored MIA scores")

    def to_dict(self) -> dict:
        return {
            "eval_unlearned": vars(self.eval_unlearned),
            "eval_retrain": vars(self.eval_retrain),
            "tow": self.tow,
            "tow_mia": self.tow_mia,
            "mia": self.mia,
            "mia_retrain": self.mia_retrain,
            "mia_gap": self.mia_gap,
            "disagreement_pct": dict(self.disagreement_pct),
            "wall_seconds": self.wall_seconds,
            "attacker_note": self.attacker_note,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MetricsReport":
        return cls(
            eval_unlearned=EvalTriple(**raw["eval_unlearned"]),
            eval_retrain=EvalTriple(**raw["eval_retrain"]),
            tow=raw["tow"],
            tow_mia=raw["tow_mia"],
            mia=raw["mia"],
            mia_retrain=raw["mia_retrain"],
            mia_gap=raw["mia_gap"],
            disagreement_pct=dict(raw["disagreement_pct"]),
            wall_seconds=raw["wall_seconds"],
            attacker_note=raw.get("attacker_note", ""),
        )


def eval_triple(
    model: ModelCheckpoint,
    dataset: LabeledDataset,
    partition: ForgetPartition,
    test_ids: Iterable[int],
) -> EvalTriple:
    return EvalTriple(
        forget_acc=backend.evaluate(model, dataset, partition.forget_ids),
        retain_acc=backend.evaluate(model, dataset, partition.retain_ids),
        test_acc=backend.evaluate(model, dataset, test_ids),
    )


def compute_report(
    unlearned: ModelCheckpoint,
    retrain_oracle: ModelCheckpoint,
    dataset: LabeledDataset,
    partition: ForgetPartition,
    test_ids: Iterable[int] | None = None,
    attacker_seed: int = 0,
    wall_seconds: float = 0.0,
) -> MetricsReport:
    """Full metric bundle comparing an unlearned model to the retrain oracle."""
    test_list = sorted(test_ids if test_ids is not None else dataset.split_ids("test"))
    triple_u = eval_triple(unlearned, dataset, partition, test_list)
    triple_r = eval_triple(retrain_oracle, dataset, partition, test_list)
    mia_u = mia_score(unlearned, dataset, partition, test_list, attacker_seed)
    mia_r = mia_score(retrain_oracle, dataset, partition, test_list, attacker_seed)
    return MetricsReport(
        eval_unlearned=triple_u,
        eval_retrain=triple_r,
        tow=tow(triple_u, triple_r),
        tow_mia=tow_mia(mia_u.score, mia_r.score, triple_u, triple_r),
        mia=mia_u.score,
        mia_retrain=mia_r.score,
        mia_gap=mia_gap(mia_u.score, mia_r.score),
        disagreement_pct={
            "forget": disagreement(unlearned, retrain_oracle, dataset, partition.forget_ids),
            "retain": disagreement(unlearned, retrain_oracle, dataset, partition.retain_ids),
            "test": disagreement(unlearned, retrain_oracle, dataset, test_list),
        },
        wall_seconds=wall_seconds,
    )
