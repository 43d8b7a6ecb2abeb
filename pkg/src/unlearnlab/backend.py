"""Train, evaluate, and introspect small classifiers on CPU.

The backend owns the original-model / retrain-oracle training loop and the
model surfaces everything else consumes: accuracies, per-example
predictions, penultimate-layer embeddings, and true-label confidences.
Runs are bit-deterministic for a fixed (seed, config, ids) on one platform;
we pin torch to a single CPU thread to keep reductions reproducible
(desk-scale models gain nothing from threading).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetError, LabeledDataset

torch.set_num_threads(1)

VALID_SCHEDULES = ("constant", "cosine", "step")
VALID_AUGMENTATIONS = frozenset({"crop", "horizontal-flip"})


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the run is reported as failed, never clipped."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """SGD training recipe for the original model and the retrain oracle."""

    architecture: str = "mlp"
    epochs: int = 15
    learning_rate: float = 0.05
    lr_schedule: str = "cosine"
    lr_milestones: tuple[int, ...] = ()
    lr_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    augmentation: frozenset[str] = frozenset()
    record_confidence_trace: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.lr_schedule not in VALID_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        aug = frozenset(self.augmentation)
        if not aug <= VALID_AUGMENTATIONS:
            raise ValueError(f"unknown augmentation flags {sorted(aug - VALID_AUGMENTATIONS)}")
        object.__setattr__(self, "augmentation", aug)
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    """Immutable trained-model handle: architecture id + parameter arrays."""

    architecture: str
    input_shape: tuple[int, ...]
    num_classes: int
    train_config: TrainConfig
    trained_on: frozenset[int]
    wall_seconds: float
    state: dict[str, np.ndarray]

    def to_module(self) -> nn.Module:
        module = build_model(self.architecture, self.input_shape, self.num_classes)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        module.load_state_dict(tensors)
        module.eval()
        return module

    def replace_state(self, module: nn.Module, wall_seconds: float) -> "ModelCheckpoint":
        return ModelCheckpoint(
            architecture=self.architecture,
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            train_config=self.train_config,
            trained_on=self.trained_on,
            wall_seconds=wall_seconds,
            state=_state_arrays(module),
        )


@dataclass(frozen=True, eq=False)
class ConfidenceTrace:
    """Per-example softmax probability of the true label, one entry per epoch."""

    epochs: int
    values: dict[int, np.ndarray]

    def __post_init__(self):
        for i, trace in self.values.items():
            if len(trace) != self.epochs:
                raise ValueError(f"trace for id {i} has length {len(trace)} != epochs")
            if np.any(trace < 0) or np.any(trace > 1):
                raise ValueError(f"trace for id {i} leaves [0, 1]")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Penultimate-layer activations, one fixed-dimension row per id."""

    ids: tuple[int, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if vectors.ndim != 2 or len(self.ids) != vectors.shape[0]:
            raise ValueError("need one embedding row per id")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embeddings must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, ids: Iterable[int]) -> "EmbeddingMatrix":
        row_of = {i: r for r, i in enumerate(self.ids)}
        wanted = [int(i) for i in ids]
        missing = [i for i in wanted if i not in row_of]
        if missing:
            raise ValueError(f"ids without embeddings: {missing[:5]}")
        rows = [row_of[i] for i in wanted]
        return EmbeddingMatrix(tuple(wanted), self.vectors[rows])


class _MLP(nn.Module):
    """Two hidden layers; the 32-wide second layer feeds the classifier."""

    WIDE = 128
    EMBED = 32

    def __init__(self, input_shape, num_classes):
        super().__init__()
        in_features = int(np.prod(input_shape))
        self.fc1 = nn.Linear(in_features, self.WIDE)
        self.fc2 = nn.Linear(self.WIDE, self.EMBED)
        self.head = nn.Linear(self.EMBED, num_classes)

    def features(self, x):
        return F.relu(self.fc2(F.relu(self.fc1(x.flatten(1)))))

    def forward(self, x):
        return self.head(self.features(x))


class _SmallCNN(nn.Module):
    """2 conv blocks + 1 fc classifier; embedding = flattened pooled features."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        if len(input_shape) != 3:
            raise ValueError("small-cnn expects (channels, height, width) inputs")
        c, h, w = input_shape
        self.conv1 = nn.Conv2d(c, 8, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, padding=1)
        flat = 16 * (h // 4) * (w // 4)
        if flat <= 0:
            raise ValueError("small-cnn needs images of at least 4x4")
        self.head = nn.Linear(flat, num_classes)

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return x.flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class _TinyResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class _TinyResNet(nn.Module):
    """Conv stem + two residual blocks + global average pool; embedding dim 32."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        if len(input_shape) != 3:
            raise ValueError("resnet-ish-tiny expects (channels, height, width) inputs")
        c = input_shape[0]
        self.stem = nn.Conv2d(c, 32, kernel_size=3, padding=1)
        self.block1 = _TinyResBlock(32)
        self.block2 = _TinyResBlock(32)
        self.head = nn.Linear(32, num_classes)

    def features(self, x):
        x = F.relu(self.stem(x))
        x = self.block1(x)
        x = self.block2(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


_ARCHITECTURES = {
    "mlp": _MLP,
    "small-cnn": _SmallCNN,
    "resnet-ish-tiny": _TinyResNet,
}


def build_model(architecture: str, input_shape: Sequence[int], num_classes: int) -> nn.Module:
    if architecture not in _ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    return _ARCHITECTURES[architecture](tuple(input_shape), num_classes)


def _state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def epoch_learning_rate(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch index under the configured schedule."""
    base = config.learning_rate
    if config.lr_schedule == "constant":
        return base
    if config.lr_schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    drops = sum(1 for m in config.lr_milestones if epoch >= m)
    return base * config.lr_factor**drops


def _augment(batch: torch.Tensor, flags: frozenset[str], rng: np.random.Generator) -> torch.Tensor:
    if not flags:
        return batch
    if batch.ndim != 4:
        raise ValueError("augmentation flags require image-shaped (N,C,H,W) features")
    out = batch
    if "horizontal-flip" in flags:
        flip = torch.from_numpy(rng.random(len(out)) < 0.5)
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    if "crop" in flags:
        pad = 2
        padded = F.pad(out, (pad, pad, pad, pad))
        h, w = out.shape[-2:]
        shifted = torch.empty_like(out)
        offsets = rng.integers(0, 2 * pad + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(offsets):
            shifted[i] = padded[i, :, dy : dy + h, dx : dx + w]
        out = shifted
    return out


def train(
    dataset: LabeledDataset, ids: Iterable[int], config: TrainConfig
) -> tuple[ModelCheckpoint, ConfidenceTrace | None]:
    """SGD-train a fresh model on `ids` only.

    Returns the checkpoint and, iff config.record_confidence_trace, the
    per-epoch true-label confidence trace over the trained ids. A
    non-finite loss aborts with TrainingDivergedError rather than being
    silently clipped.
    """
    ids_sorted = sorted(int(i) for i in ids)
    if not ids_sorted:
        raise DatasetError("cannot train on an empty id set")
    features = torch.from_numpy(dataset.features_for(ids_sorted))
    labels = torch.from_numpy(dataset.labels_for(ids_sorted))

    start = time.perf_counter()
    torch.manual_seed(config.seed)
    module = build_model(config.architecture, dataset.feature_shape, dataset.num_classes)
    optimizer = torch.optim.SGD(
        module.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    streams = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(streams[0])
    aug_rng = np.random.default_rng(streams[1])

    n = len(ids_sorted)
    trace_columns: list[np.ndarray] = []
    module.train()
    for epoch in range(config.epochs):
        lr = epoch_learning_rate(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(n)
        for step, lo in enumerate(range(0, n, config.batch_size)):
            rows = torch.as_tensor(perm[lo : lo + config.batch_size])
            batch = _augment(features[rows], config.augmentation, aug_rng)
            optimizer.zero_grad()
            loss = F.cross_entropy(module(batch), labels[rows])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, step)
            loss.backward()
            optimizer.step()
        if config.record_confidence_trace:
            trace_columns.append(_true_label_probs(module, features, labels))
    module.eval()
    wall = time.perf_counter() - start

    checkpoint = ModelCheckpoint(
        architecture=config.architecture,
        input_shape=dataset.feature_shape,
        num_classes=dataset.num_classes,
        train_config=config,
        trained_on=frozenset(ids_sorted),
        wall_seconds=wall,
        state=_state_arrays(module),
    )
    trace = None
    if config.record_confidence_trace:
        stacked = np.stack(trace_columns, axis=1)  # [n, epochs]
        trace = ConfidenceTrace(
            epochs=config.epochs,
            values={i: stacked[r] for r, i in enumerate(ids_sorted)},
        )
    return checkpoint, trace


@torch.no_grad()
def _true_label_probs(module: nn.Module, features: torch.Tensor, labels: torch.Tensor) -> np.ndarray:
    was_training = module.training
    module.eval()
    probs = []
    for lo in range(0, len(features), 512):
        logits = module(features[lo : lo + 512])
        p = F.softmax(logits, dim=1)
        probs.append(p[torch.arange(len(p)), labels[lo : lo + 512]].numpy())
    if was_training:
        module.train()
    return np.concatenate(probs).astype(np.float64)


@torch.no_grad()
def _logits(checkpoint: ModelCheckpoint, dataset: LabeledDataset, ids: Sequence[int]) -> torch.Tensor:
    module = checkpoint.to_module()
    features = torch.from_numpy(dataset.features_for(ids))
    chunks = [module(features[lo : lo + 512]) for lo in range(0, len(features), 512)]
    return torch.cat(chunks)


def predict(
    checkpoint: ModelCheckpoint, dataset: LabeledDataset, ids: Iterable[int]
) -> dict[int, int]:
    """Argmax class per id; ties resolve to the lowest class index."""
    ids_sorted = sorted(int(i) for i in ids)
    if not ids_sorted:
        raise DatasetError("predict needs a nonempty id set")
    logits = _logits(checkpoint, dataset, ids_sorted)
    classes = logits.argmax(dim=1).numpy()  # torch argmax returns the first maximum
    return {i: int(c) for i, c in zip(ids_sorted, classes)}


def evaluate(
    checkpoint: ModelCheckpoint, dataset: LabeledDataset, ids: Iterable[int]
) -> float:
    """Fraction of ids whose argmax prediction equals the label."""
    ids_sorted = sorted(int(i) for i in ids)
    if not ids_sorted:
        raise DatasetError("evaluate needs a nonempty id set")
    predictions = predict(checkpoint, dataset, ids_sorted)
    labels = dataset.labels_for(ids_sorted)
    hits = sum(1 for i, y in zip(ids_sorted, labels) if predictions[i] == int(y))
    return hits / len(ids_sorted)


def embed(
    checkpoint: ModelCheckpoint, dataset: LabeledDataset, ids: Iterable[int]
) -> EmbeddingMatrix:
    """Penultimate-layer activations for `ids` (row order = given order)."""
    wanted = [int(i) for i in ids]
    if not wanted:
        raise DatasetError("embed needs a nonempty id set")
    module = checkpoint.to_module()
    features = torch.from_numpy(dataset.features_for(wanted))
    with torch.no_grad():
        chunks = [module.features(features[lo : lo + 512]) for lo in range(0, len(features), 512)]
    return EmbeddingMatrix(tuple(wanted), torch.cat(chunks).numpy().astype(np.float64))


def confidences(
    checkpoint: ModelCheckpoint, dataset: LabeledDataset, ids: Iterable[int]
) -> dict[int, float]:
    """Softmax probability assigned to the true label, per id."""
    ids_sorted = sorted(int(i) for i in ids)
    if not ids_sorted:
        raise DatasetError("confidences needs a nonempty id set")
    logits = _logits(checkpoint, dataset, ids_sorted)
    labels = torch.from_numpy(dataset.labels_for(ids_sorted))
    probs = F.softmax(logits, dim=1)[torch.arange(len(ids_sorted)), labels]
    return {i: float(p) for i, p in zip(ids_sorted, probs)}


def save_checkpoint(checkpoint: ModelCheckpoint, path: str | Path) -> None:
    """Self-describing, losslessly round-tripping container (npz + json header)."""
    import json

    header = {
        "architecture": checkpoint.architecture,
        "input_shape": list(checkpoint.input_shape),
        "num_classes": checkpoint.num_classes,
        "trained_on": sorted(checkpoint.trained_on),
        "wall_seconds": checkpoint.wall_seconds,
        "train_config": _config_to_dict(checkpoint.train_config),
    }
    arrays = {f"param::{k}": v for k, v in checkpoint.state.items()}
    np.savez_compressed(path, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    import json

    with np.load(path) as blob:
        header = json.loads(bytes(blob["header"]).decode())
        state = {
            k[len("param::") :]: blob[k].copy() for k in blob.files if k.startswith("param::")
        }
    return ModelCheckpoint(
        architecture=header["architecture"],
        input_shape=tuple(header["input_shape"]),
        num_classes=header["num_classes"],
        train_config=config_from_dict(header["train_config"]),
        trained_on=frozenset(header["trained_on"]),
        wall_seconds=header["wall_seconds"],
        state=state,
    )


def _config_to_dict(config: TrainConfig) -> dict:
    return {
        "architecture": config.architecture,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "lr_schedule": config.lr_schedule,
        "lr_milestones": list(config.lr_milestones),
        "lr_factor": config.lr_factor,
        "weight_decay": config.weight_decay,
        "momentum": config.momentum,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "augmentation": sorted(config.augmentation),
        "record_confidence_trace": config.record_confidence_trace,
    }


def config_from_dict(raw: Mapping) -> TrainConfig:
    known = dict(raw)
    known["lr_milestones"] = tuple(known.get("lr_milestones", ()))
    known["augmentation"] = frozenset(known.get("augmentation", ()))
    return TrainConfig(**known)
