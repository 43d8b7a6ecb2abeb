"""Approximate unlearning algorithm zoo behind one interface.

Every algorithm maps (original model, forget set, retain set, config) to a
new checkpoint. Descent-style algorithms continue SGD with the original
recipe's momentum/weight-decay and batch size; pure gradient ascent runs
plain SGD. Ascent gradient contributions are norm-clipped (config-exposed)
to keep desk-scale runs finite; the clip never touches descent terms, so
the limiting cases (beta=1, gamma=0, sparsity=1) match their descent
counterparts exactly.

Batch-order randomness comes from numpy streams derived from the config
seed: stream 0 orders the descent pool, stream 1 cycles forget batches,
stream 2 draws relabel targets. Algorithms that share a stream layout
therefore share trajectories in their limiting cases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import backend
from .backend import ModelCheckpoint, TrainingDivergedError
from .data import ForgetPartition, LabeledDataset

ALGORITHM_TAGS = (
    "retrain",
    "noop",
    "finetune",
    "neggrad",
    "neggrad_plus",
    "l1_sparse",
    "scrub",
    "random_label",
    "salun",
)


@dataclass(frozen=True)
class UnlearnConfig:
    """Knobs for one unlearning run; only fields the algorithm reads matter."""

    algorithm: str
    epochs: int = 5
    learning_rate: float = 0.01
    beta: float = 0.9
    gamma: float = 1e-5
    sparsity_ratio: float = 0.5
    alpha_distill: float = 0.5
    ascent_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHM_TAGS:
            raise ValueError(f"unknown unlearning algorithm {self.algorithm!r}")


@dataclass(frozen=True, eq=False)
class UnlearnResult:
    model: ModelCheckpoint
    wall_seconds: float
    algorithm: str
    config: UnlearnConfig


def _validate(config: UnlearnConfig) -> None:
    alg = config.algorithm
    if alg in ("noop",):
        return
    if alg != "retrain":
        if config.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if config.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
    if alg == "neggrad_plus" and not 0.0 <= config.beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if alg == "l1_sparse" and config.gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if alg == "salun" and not 0.0 < config.sparsity_ratio <= 1.0:
        raise ValueError("sparsity_ratio must lie in (0, 1]")
    if alg == "scrub" and config.alpha_distill < 0:
        raise ValueError("alpha_distill must be nonnegative")
    if alg in ("neggrad", "neggrad_plus", "scrub") and config.ascent_clip <= 0:
        raise ValueError("ascent_clip must be positive")


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _tensors(dataset: LabeledDataset, ids: Iterable[int]) -> tuple[torch.Tensor, torch.Tensor]:
    ids_sorted = sorted(int(i) for i in ids)
    return (
        torch.from_numpy(dataset.features_for(ids_sorted)),
        torch.from_numpy(dataset.labels_for(ids_sorted)),
    )


def _make_optimizer(module, config: UnlearnConfig, original: backend.TrainConfig, *, plain=False):
    if plain:
        return torch.optim.SGD(module.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(
        module.parameters(),
        lr=config.learning_rate,
        momentum=original.momentum,
        weight_decay=original.weight_decay,
    )


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[torch.Tensor]:
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield torch.as_tensor(perm[lo : lo + batch_size])


class _BatchCycler:
    """Reshuffling batch iterator for the smaller (forget) pool."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> torch.Tensor:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        rows = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return torch.as_tensor(rows)


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(epoch, step)


def _clip_global_norm(tensors: list[torch.Tensor], max_norm: float) -> list[torch.Tensor]:
    total = torch.sqrt(sum((t.detach() ** 2).sum() for t in tensors))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        return [t * scale for t in tensors]
    return tensors


def _descent_loop(
    module,
    optimizer,
    x: torch.Tensor,
    y: torch.Tensor,
    epochs: int,
    batch_size: int,
    order_rng: np.random.Generator,
    extra_loss: Callable | None = None,
    grad_mask: dict[str, torch.Tensor] | None = None,
) -> None:
    module.train()
    for epoch in range(epochs):
        for step, rows in enumerate(_epoch_batches(len(x), batch_size, order_rng)):
            optimizer.zero_grad()
            loss = F.cross_entropy(module(x[rows]), y[rows])
            if extra_loss is not None:
                loss = loss + extra_loss(module)
            _check_finite(loss, epoch, step)
            loss.backward()
            if grad_mask is not None:
                for name, param in module.named_parameters():
                    param.grad.mul_(grad_mask[name])
            optimizer.step()
    module.eval()


def _finetune(model, dataset, partition, config) -> ModelCheckpoint:
    module = model.to_module()
    optimizer = _make_optimizer(module, config, model.train_config)
    x, y = _tensors(dataset, partition.retain_ids)
    order_rng = _streams(config.seed)[0]
    _descent_loop(module, optimizer, x, y, config.epochs, model.train_config.batch_size, order_rng)
    return model.replace_state(module, 0.0)


def _l1_sparse(model, dataset, partition, config) -> ModelCheckpoint:
    module = model.to_module()
    optimizer = _make_optimizer(module, config, model.train_config)
    x, y = _tensors(dataset, partition.retain_ids)
    order_rng = _streams(config.seed)[0]
    extra = None
    if config.gamma != 0.0:
        gamma = config.gamma

        def extra(m):
            return gamma * sum(p.abs().sum() for p in m.parameters())

    _descent_loop(
        module, optimizer, x, y, config.epochs, model.train_config.batch_size, order_rng,
        extra_loss=extra,
    )
    return model.replace_state(module, 0.0)


def _neggrad(model, dataset, partition, config) -> ModelCheckpoint:
    module = model.to_module()
    optimizer = _make_optimizer(module, config, model.train_config, plain=True)
    x, y = _tensors(dataset, partition.forget_ids)
    order_rng = _streams(config.seed)[0]
    batch_size = min(model.train_config.batch_size, len(x))
    module.train()
    params = [p for p in module.parameters()]
    for epoch in range(config.epochs):
        for step, rows in enumerate(_epoch_batches(len(x), batch_size, order_rng)):
            loss = F.cross_entropy(module(x[rows]), y[rows])
            _check_finite(loss, epoch, step)
            grads = torch.autograd.grad(loss, params)
            ascent = _clip_global_norm([-g for g in grads], config.ascent_clip)
            optimizer.zero_grad()
            for p, g in zip(params, ascent):
                p.grad = g
            optimizer.step()
    module.eval()
    return model.replace_state(module, 0.0)


def _neggrad_plus(model, dataset, partition, config) -> ModelCheckpoint:
    module = model.to_module()
    optimizer = _make_optimizer(module, config, model.train_config)
    xr, yr = _tensors(dataset, partition.retain_ids)
    xf, yf = _tensors(dataset, partition.forget_ids)
    order_rng, forget_rng, _ = _streams(config.seed)
    batch_size = model.train_config.batch_size
    cycler = _BatchCycler(len(xf), batch_size, forget_rng)
    params = [p for p in module.parameters()]
    module.train()
    # one retain batch + one cycling forget batch per step: an epoch is a
    # pass over the retain set, which dominates the pool
    for epoch in range(config.epochs):
        for step, rows in enumerate(_epoch_batches(len(xr), batch_size, order_rng)):
            retain_loss = F.cross_entropy(module(xr[rows]), yr[rows])
            _check_finite(retain_loss, epoch, step)
            descent = torch.autograd.grad(config.beta * retain_loss, params)
            frows = cycler.next()
            forget_loss = F.cross_entropy(module(xf[frows]), yf[frows])
            _check_finite(forget_loss, epoch, step)
            ascent = torch.autograd.grad(-(1.0 - config.beta) * forget_loss, params)
            ascent = _clip_global_norm(list(ascent), config.ascent_clip)
            optimizer.zero_grad()
            for p, gd, ga in zip(params, descent, ascent):
                p.grad = gd + ga
            optimizer.step()
    module.eval()
    return model.replace_state(module, 0.0)


def neggrad_plus_objective(
    module, x_retain, y_retain, x_forget, y_forget, beta: float
) -> torch.Tensor:
    """Per-step objective: beta*CE(retain) - (1-beta)*CE(forget), minimized."""
    return beta * F.cross_entropy(module(x_retain), y_retain) - (1.0 - beta) * F.cross_entropy(
        module(x_forget), y_forget
    )


def _kl_divergence(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    """KL(P || Q) from log-probabilities, averaged over the batch."""
    return (p_log.exp() * (p_log - q_log)).sum(dim=1).mean()


def scrub_retain_loss(
    student, teacher_logits: torch.Tensor, x: torch.Tensor, y: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Retain step: cross-entropy plus alpha * KL(student || teacher)."""
    logits = student(x)
    loss = F.cross_entropy(logits, y)
    if alpha != 0.0:
        loss = loss + alpha * _kl_divergence(
            F.log_softmax(logits, dim=1), F.log_softmax(teacher_logits, dim=1)
        )
    return loss


def _scrub(model, dataset, partition, config) -> ModelCheckpoint:
    student = model.to_module()
    teacher = model.to_module()
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = _make_optimizer(student, config, model.train_config)
    xr, yr = _tensors(dataset, partition.retain_ids)
    xf, _ = _tensors(dataset, partition.forget_ids)
    order_rng, forget_rng, _ = _streams(config.seed)
    batch_size = model.train_config.batch_size
    params = [p for p in student.parameters()]
    ascent_epochs = (config.epochs + 1) // 2  # forget-ascent only in the first half
    student.train()
    for epoch in range(config.epochs):
        if epoch < ascent_epochs:
            for step, rows in enumerate(
                _epoch_batches(len(xf), min(batch_size, len(xf)), forget_rng)
            ):
                with torch.no_grad():
                    t_log = F.log_softmax(teacher(xf[rows]), dim=1)
                kl = _kl_divergence(F.log_softmax(student(xf[rows]), dim=1), t_log)
                _check_finite(kl, epoch, step)
                grads = torch.autograd.grad(kl, params)
                ascent = _clip_global_norm([-g for g in grads], config.ascent_clip)
                optimizer.zero_grad()
                for p, g in zip(params, ascent):
                    p.grad = g
                optimizer.step()
        for step, rows in enumerate(_epoch_batches(len(xr), batch_size, order_rng)):
            with torch.no_grad():
                t_logits = teacher(xr[rows])
            optimizer.zero_grad()
            loss = scrub_retain_loss(student, t_logits, xr[rows], yr[rows], config.alpha_distill)
            _check_finite(loss, epoch, step)
            loss.backward()
            optimizer.step()
    student.eval()
    return model.replace_state(student, 0.0)


def relabel_forget(
    dataset: LabeledDataset, forget_ids: Iterable[int], num_classes: int, seed: int
) -> dict[int, int]:
    """New label per forget id, uniform over the other classes (seeded)."""
    relabel_rng = _streams(seed)[2]
    new_labels = {}
    for i in sorted(int(v) for v in forget_ids):
        y = int(dataset.labels_for([i])[0])
        others = [c for c in range(num_classes) if c != y]
        new_labels[i] = others[int(relabel_rng.integers(len(others)))]
    return new_labels


def _relabel_pool(model, dataset, partition, config):
    retain_sorted = sorted(partition.retain_ids)
    forget_sorted = sorted(partition.forget_ids)
    new_labels = relabel_forget(dataset, forget_sorted, model.num_classes, config.seed)
    pool = retain_sorted + forget_sorted
    x = torch.from_numpy(dataset.features_for(pool))
    y_np = dataset.labels_for(pool).copy()
    for r, i in enumerate(forget_sorted):
        y_np[len(retain_sorted) + r] = new_labels[i]
    return x, torch.from_numpy(y_np)


def _random_label(model, dataset, partition, config, grad_mask=None) -> ModelCheckpoint:
    module = model.to_module()
    optimizer = _make_optimizer(module, config, model.train_config)
    x, y = _relabel_pool(model, dataset, partition, config)
    order_rng = _streams(config.seed)[0]
    _descent_loop(
        module, optimizer, x, y, config.epochs, model.train_config.batch_size, order_rng,
        grad_mask=grad_mask,
    )
    return model.replace_state(module, 0.0)


def saliency_mask(
    model: ModelCheckpoint,
    dataset: LabeledDataset,
    forget_ids: Iterable[int],
    sparsity_ratio: float,
) -> dict[str, torch.Tensor]:
    """0/1 mask over parameters: top fraction by |forget-set loss gradient|.

    Computed once at the original weights; mask cardinality is
    round(sparsity_ratio * #params) with the global top-k selected
    per-parameter.
    """
    module = model.to_module()
    x, y = _tensors(dataset, forget_ids)
    module.zero_grad()
    loss = F.cross_entropy(module(x), y)
    loss.backward()
    names = [n for n, _ in module.named_parameters()]
    saliency = {n: p.grad.detach().abs() for n, p in module.named_parameters()}
    flat = torch.cat([saliency[n].flatten() for n in names])
    total = flat.numel()
    k = int(round(sparsity_ratio * total))
    mask_flat = torch.zeros(total)
    if k > 0:
        top = torch.topk(flat, k).indices
        mask_flat[top] = 1.0
    masks, offset = {}, 0
    for n in names:
        numel = saliency[n].numel()
        masks[n] = mask_flat[offset : offset + numel].reshape(saliency[n].shape)
        offset += numel
    return masks


def _salun(model, dataset, partition, config) -> ModelCheckpoint:
    mask = saliency_mask(model, dataset, partition.forget_ids, config.sparsity_ratio)
    return _random_label(model, dataset, partition, config, grad_mask=mask)


def _retrain(model, dataset, partition, config) -> ModelCheckpoint:
    fresh = replace(model.train_config, seed=config.seed, record_confidence_trace=False)
    checkpoint, _ = backend.train(dataset, partition.retain_ids, fresh)
    return checkpoint


def _noop(model, dataset, partition, config) -> ModelCheckpoint:
    return model


_ALGORITHMS: dict[str, Callable] = {
    "retrain": _retrain,
    "noop": _noop,
    "finetune": _finetune,
    "neggrad": _neggrad,
    "neggrad_plus": _neggrad_plus,
    "l1_sparse": _l1_sparse,
    "scrub": _scrub,
    "random_label": _random_label,
    "salun": _salun,
}


def unlearn(
    model: ModelCheckpoint,
    dataset: LabeledDataset,
    partition: ForgetPartition,
    config: UnlearnConfig,
) -> UnlearnResult:
    """Apply one unlearning algorithm; deterministic given (model, partition, config)."""
    if not partition.train_ids <= model.trained_on:
        raise ValueError("partition references ids the model was not trained on")
    _validate(config)
    start = time.perf_counter()
    new_model = _ALGORITHMS[config.algorithm](model, dataset, partition, config)
    wall = time.perf_counter() - start
    if config.algorithm != "noop":
        new_model = ModelCheckpoint(
            architecture=new_model.architecture,
            input_shape=new_model.input_shape,
            num_classes=new_model.num_classes,
            train_config=new_model.train_config,
            trained_on=new_model.trained_on,
            wall_seconds=wall,
            state=new_model.state,
        )
    return UnlearnResult(model=new_model, wall_seconds=wall, algorithm=config.algorithm, config=config)
