"""Adam training loop with plateau halving and best-checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from eqdense import tensor as T
from eqdense.errors import ConfigurationError, ContractError
from eqdense.groups import elements
from eqdense.model import DenseNet, ParamStore

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimState:
    m: dict
    v: dict
    lr: float = 1e-3
    t: int = 0
    best: float = float("inf")
    plateau: int = 0

    @classmethod
    def create(cls, params: dict, lr: float = 1e-3) -> "OptimState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            lr,
        )

    def observe(self, val_loss: float, patience: int = 20, factor: float = 0.5) -> bool:
        """Record a validation loss; halve the lr after ``patience`` epochs
        without a new best.  Returns True when the lr was reduced."""
        if val_loss < self.best:
            self.best = val_loss
            self.plateau = 0
            return False
        self.plateau += 1
        if self.plateau >= patience:
            self.lr *= factor
            self.plateau = 0
            return True
        return False


def adam_step(params: dict, grads: dict, state: OptimState, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> dict:
    """One bias-corrected Adam update; ``params`` is updated in place and returned."""
    missing = set(params) - set(grads)
    if missing:
        raise ContractError(f"no gradient for parameters {sorted(missing)}")
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        params[name] = (p - state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


def augment_d4(batch: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply an independent uniform D4 element to every ``[C,H,W]`` sample.

    Returns the augmented batch and the drawn element indices.
    """
    group = elements("D4")
    draws = rng.integers(0, len(group), size=len(batch))
    out = np.empty_like(batch)
    for i, d in enumerate(draws):
        out[i] = T.transform_plane(batch[i], group[d].rot, group[d].mirror)
    return out, draws


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 100
    batches_per_epoch: int = 312
    batch_size: int = 64
    val_size: int = 40_000
    lr: float = 1e-3
    patience: int = 20
    factor: float = 0.5
    augment_d4: bool = False
    seed: int = 0
    eval_batch_size: int = 128
    bn_recalibration: int = 0


PROFILES = {
    "full": TrainSchedule(),
    # 64 steps are too few for momentum averages to catch up with the weights
    "desk": TrainSchedule(epochs=2, batches_per_epoch=32, val_size=2048, bn_recalibration=8),
}


def schedule_for(profile: str, **overrides) -> TrainSchedule:
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return replace(PROFILES[profile], **overrides)


@dataclass
class HistoryRow:
    epoch: int
    train_nll: float
    val_nll: float
    lr: float

    def format(self) -> str:
        return f"{self.epoch}\t{self.train_nll:.6f}\t{self.val_nll:.6f}\t{self.lr:.6g}"


@dataclass
class TrainResult:
    best_store: ParamStore
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)
    final_store: ParamStore | None = None


def images_to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``[N,H,W,3]`` uint8 to ``[N,3,H,W]`` floats in [-1, 1].

    Centring matters for the first batch norm: stained tissue is bright and
    low-contrast, so uncentred inputs give stem responses whose mean dwarfs
    their spread and small lags in the running mean swamp the signal.
    """
    return (np.asarray(images).transpose(0, 3, 1, 2) / 127.5 - 1.0).astype(dtype)


def predict(model: DenseNet, store: ParamStore, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Per-patch tumour probabilities in eval mode."""
    out = []
    for start in range(0, len(images), batch_size):
        x = images_to_input(images[start:start + batch_size])
        out.append(model(store, x).data.reshape(len(x), -1).mean(axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def validation_indices(n: int, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7A11])
    if size <= n:
        return np.sort(rng.choice(n, size=size, replace=False))
    return rng.integers(0, n, size=size)


def train_step(model: DenseNet, store: ParamStore, state: OptimState, x: np.ndarray,
               labels: np.ndarray) -> float:
    params = store.tensors(requires_grad=True)
    prob = model(store, x, train=True, params=params)
    loss = T.bce_loss(T.reshape(prob, (len(x),)), labels.astype(np.float32))
    grads = T.backward(loss, params)
    adam_step(store.params, grads, state)
    return loss.item()


def recalibrate_bn(model: DenseNet, store: ParamStore, batches: Iterable[np.ndarray]) -> int:
    """Replace running moments by the exact average of batch moments at the current weights.

    Each batch is a forward pass in train mode without a gradient step; the
    momentum of every state is set to ``i / (i + 1)`` for the ``i``-th batch
    so the result is a plain mean.  Returns the number of batches used.
    """
    saved = {k: (b.momentum, b.steps) for k, b in store.bn.items()}
    for b in store.bn.values():
        b.running_mean = b.running_var = None
    n = 0
    try:
        for x in batches:
            for b in store.bn.values():
                b.momentum = n / (n + 1)
            model(store, x, train=True)
            n += 1
    finally:
        for k, b in store.bn.items():
            b.momentum, b.steps = saved[k]
    return n


def run_training(model: DenseNet, store: ParamStore, dataset, schedule: TrainSchedule,
                 validate: Callable | None = None,
                 on_epoch: Callable | None = None) -> TrainResult:
    """Train with balanced sampling; keep the lowest-validation-loss weights.

    ``validate(model, store, epoch) -> float`` replaces the built-in
    validation BCE.  ``on_epoch(row, model, store)`` is called after each epoch.
    """
    from eqdense.data import balanced_sampler
    from eqdense.evaluation import nll

    if dataset is None or len(dataset.train) == 0:
        raise ConfigurationError("training split is empty")
    if validate is None and len(dataset.valid) == 0:
        raise ConfigurationError("validation split is empty")

    sample_rng = np.random.default_rng([schedule.seed, 1])
    aug_rng = np.random.default_rng([schedule.seed, 2])
    batches = balanced_sampler(dataset.train, sample_rng, schedule.batch_size)
    calib = balanced_sampler(dataset.train, np.random.default_rng([schedule.seed, 3]), schedule.batch_size)
    val_idx = None
    if validate is None:
        val_idx = validation_indices(len(dataset.valid), schedule.val_size, schedule.seed)

    state = OptimState.create(store.params, schedule.lr)
    history: list[HistoryRow] = []
    best_store, best_epoch, best_val = store.copy(), 0, float("inf")
    for epoch in range(1, schedule.epochs + 1):
        losses = []
        for _ in range(schedule.batches_per_epoch):
            idx = next(batches)
            x = images_to_input(dataset.train.images[idx])
            if schedule.augment_d4:
                x, _ = augment_d4(x, aug_rng)
            losses.append(train_step(model, store, state, x, dataset.train.labels[idx]))
        if schedule.bn_recalibration > 0:
            recalibrate_bn(model, store, (images_to_input(dataset.train.images[next(calib)])
                                          for _ in range(schedule.bn_recalibration)))
        if validate is not None:
            val = float(validate(model, store, epoch))
        else:
            probs = predict(model, store, dataset.valid.images[val_idx], schedule.eval_batch_size)
            val = nll(probs, dataset.valid.labels[val_idx])
        if val < best_val:
            best_store, best_epoch, best_val = store.copy(), epoch, val
        state.observe(val, schedule.patience, schedule.factor)
        row = HistoryRow(epoch, float(np.mean(losses)) if losses else float("nan"), val, state.lr)
        history.append(row)
        logger.info("epoch %d train_nll %.4f val_nll %.4f lr %.3g", *vars(row).values())
        if on_epoch is not None:
            on_epoch(row, model, store)
    return TrainResult(best_store, best_epoch, best_val, history, store)
