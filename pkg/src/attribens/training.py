"""Optimizers and the model populations every ensemble strategy consumes:
independently trained members over sampled subsets, intermediate
checkpoints, and LoRA fine-tunes on frozen bases."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .costs import CostLedger
from .data import Dataset
from .errors import NumericError, TrainingDivergence
from .grads import ModelView, batch_loss_and_grad
from .models import ModelSpec, ParamVector, init_params
from .nn import LoraAdapter, Mode
from .rng import derive_seed, keyed_generator

__all__ = [
    "TrainConfig",
    "TrainedMember",
    "sample_subset",
    "train_member",
    "fine_tune_lora",
    "LORA_FINETUNE_DEFAULTS",
]

log = logging.getLogger("attribens.training")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_momentum"  # "sgd_momentum" | "adam"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    subset_fraction: float = 1.0
    checkpoint_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ValueError("subset_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# Adapter fine-tuning defaults: Adam(1e-4, 0.9, 0.98), ten epochs on a
# half-size subset of the training data.
LORA_FINETUNE_DEFAULTS = TrainConfig(optimizer="adam", lr=1e-4, beta1=0.9,
                                     beta2=0.98, epochs=10, subset_fraction=0.5)


@dataclass
class TrainedMember:
    member_index: int
    spec: ModelSpec
    params: ParamVector
    subset_indices: np.ndarray
    seed: int
    checkpoints: dict[int, ParamVector] = field(default_factory=dict)


def sample_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """floor(fraction * n) distinct indices, uniform without replacement,
    sorted ascending; fully determined by the seed."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1]: {fraction}")
    size = int(np.floor(fraction * n))
    if fraction == 1.0:
        return np.arange(n, dtype=np.int64)
    rng = keyed_generator(seed, "subset")
    return np.sort(rng.choice(n, size=size, replace=False)).astype(np.int64)


class _Optimizer:
    def __init__(self, config: TrainConfig, dim: int):
        self.config = config
        if config.optimizer == "sgd_momentum":
            self.velocity = np.zeros(dim)
        else:
            self.m = np.zeros(dim)
            self.v = np.zeros(dim)
            self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        c = self.config
        if c.optimizer == "sgd_momentum":
            self.velocity = c.momentum * self.velocity + grad
            params -= c.lr * self.velocity
        else:
            self.t += 1
            self.m = c.beta1 * self.m + (1 - c.beta1) * grad
            self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
            mhat = self.m / (1 - c.beta1 ** self.t)
            vhat = self.v / (1 - c.beta2 ** self.t)
            params -= c.lr * mhat / (np.sqrt(vhat) + c.eps)


def _run_epochs(view: ModelView, data: Dataset, config: TrainConfig, run_seed: int,
                trainable: np.ndarray, optimizer: _Optimizer,
                ledger: Optional[CostLedger],
                checkpoint_hook=None, label: str = "train") -> None:
    """Shared minibatch loop; `trainable` is updated in place, everything
    else in the view stays frozen."""
    n = data.n
    for epoch in range(1, config.epochs + 1):
        order = keyed_generator(run_seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            drop_rng = keyed_generator(run_seed, "dropout", epoch, step)
            try:
                loss, grad = batch_loss_and_grad(view, data.inputs[idx],
                                                 data.targets[idx],
                                                 mode=Mode.TRAIN, train_rng=drop_rng)
            except NumericError as exc:
                raise TrainingDivergence(
                    f"{label}: diverged at epoch {epoch}, batch {step}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"{label}: loss non-finite at epoch {epoch}, batch {step}"
                )
            if ledger is not None:
                ledger.record("train", "forward", idx.size)
                ledger.record("train", "backward", idx.size)
            optimizer.step(trainable, grad)
            epoch_loss += loss
            n_batches += 1
        log.info("epoch=%d loss=%.6f", epoch, epoch_loss / max(n_batches, 1))
        if checkpoint_hook is not None:
            checkpoint_hook(epoch)


def train_member(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                 member_index: int,
                 ledger: Optional[CostLedger] = None) -> TrainedMember:
    """Train one ensemble member from scratch on its sampled subset.

    All randomness (init, subset, shuffling, dropout) is keyed by
    (config.seed, member_index), so members are reproducible in isolation
    and mutually independent.
    """
    member_seed = derive_seed(config.seed, "member", member_index)
    subset = sample_subset(dataset.n, config.subset_fraction,
                           derive_seed(member_seed, "subset"))
    sub = dataset.take(subset)
    params = init_params(spec, member_seed)
    view = ModelView(spec, params.data)
    optimizer = _Optimizer(config, params.data.size)
    checkpoints: dict[int, ParamVector] = {}
    wanted = set(config.checkpoint_epochs)

    def hook(epoch: int) -> None:
        if epoch in wanted:
            checkpoints[epoch] = params.copy()

    if ledger is not None:
        ledger.training_runs += 1
    with (ledger.timer("train") if ledger is not None else _null_ctx()):
        _run_epochs(view, sub, config, member_seed, params.data, optimizer, ledger,
                    checkpoint_hook=hook, label=f"member {member_index}")
    return TrainedMember(member_index=member_index, spec=spec, params=params,
                         subset_indices=subset, seed=member_seed,
                         checkpoints=checkpoints)


def fine_tune_lora(base: TrainedMember, adapters: list[LoraAdapter],
                   dataset: Dataset, subset_seed: int,
                   config: TrainConfig = LORA_FINETUNE_DEFAULTS,
                   ledger: Optional[CostLedger] = None) -> list[LoraAdapter]:
    """Train adapter parameters on a sampled subset; the base ParamVector
    is never written. Returns the same adapter objects, updated."""
    base_before = base.params.data
    subset = sample_subset(dataset.n, config.subset_fraction, subset_seed)
    sub = dataset.take(subset)
    view = ModelView(base.spec, base_before, adapters=adapters,
                     adapter_grads_only=True)
    # Adapter params live in per-adapter arrays; the optimizer works on a
    # flat copy synced back after each step.
    flat = _flatten_adapters(adapters)
    optimizer = _Optimizer(config, flat.size)

    if ledger is not None:
        ledger.lora_finetune_runs += 1
    run_seed = derive_seed(subset_seed, "lora_ft")
    n = sub.n
    with (ledger.timer("train_lora") if ledger is not None else _null_ctx()):
        for epoch in range(1, config.epochs + 1):
            order = keyed_generator(run_seed, "shuffle", epoch).permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for step, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                drop_rng = keyed_generator(run_seed, "dropout", epoch, step)
                try:
                    loss, grad = batch_loss_and_grad(view, sub.inputs[idx],
                                                     sub.targets[idx],
                                                     mode=Mode.TRAIN, train_rng=drop_rng)
                except NumericError as exc:
                    raise TrainingDivergence(
                        f"lora fine-tune: diverged at epoch {epoch}, batch {step}: {exc}"
                    ) from exc
                if not np.isfinite(loss):
                    raise TrainingDivergence(
                        f"lora fine-tune: loss non-finite at epoch {epoch}, batch {step}"
                    )
                if ledger is not None:
                    ledger.record("train", "forward", idx.size)
                    ledger.record("train", "backward", idx.size)
                optimizer.step(flat, grad)
                _unflatten_adapters(flat, adapters)
                epoch_loss += loss
                n_batches += 1
            log.info("epoch=%d loss=%.6f", epoch, epoch_loss / max(n_batches, 1))
    assert base.params.data is base_before
    return adapters


def _flatten_adapters(adapters: list[LoraAdapter]) -> np.ndarray:
    parts = []
    for ad in adapters:
        parts.append(ad.A.ravel())
        parts.append(ad.B.ravel())
        if ad.bias_delta is not None:
            parts.append(ad.bias_delta.ravel())
    return np.concatenate(parts)


def _unflatten_adapters(flat: np.ndarray, adapters: list[LoraAdapter]) -> None:
    offset = 0
    for ad in adapters:
        ad.A[:] = flat[offset : offset + ad.A.size].reshape(ad.A.shape)
        offset += ad.A.size
        ad.B[:] = flat[offset : offset + ad.B.size].reshape(ad.B.shape)
        offset += ad.B.size
        if ad.bias_delta is not None:
            ad.bias_delta[:] = flat[offset : offset + ad.bias_delta.size]
            offset += ad.bias_delta.size


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
