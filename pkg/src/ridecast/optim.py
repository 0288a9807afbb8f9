"""Adaptive-moment minibatch optimizer and the early-stopping training loop
shared by FCL-Net and the neural baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward, zero_grad

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"loss became non-finite in epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_rmse: float
    val_loss: float
    val_rmse: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def as_dicts(self) -> list[dict]:
        return [vars(e) for e in self.epochs]


def snapshot(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def restore(params: Sequence[Tensor], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.data[...] = v


def train_loop(
    params: Sequence[Tensor],
    n_train: int,
    batch_loss: Callable[[np.ndarray], tuple[Tensor, float, int]],
    evaluate: Callable[[], tuple[float, float]],
    *,
    batch_size: int,
    learning_rate: float,
    max_epochs: int,
    patience: int,
    rng: np.random.Generator,
) -> TrainingLog:
    """Minibatch Adam with early stopping on validation RMSE.

    ``batch_loss(indices)`` builds the objective for a batch on the active
    tape and returns ``(loss, squared_error_sum, n_values)``; ``evaluate()``
    returns ``(val_loss, val_rmse)`` for the current parameters. On return the
    parameters hold the best-validation snapshot.
    """
    opt = Adam(params, lr=learning_rate)
    log = TrainingLog()
    best = math.inf
    best_values = snapshot(params)
    stale = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        total_loss, sq_err, count, n_batches = 0.0, 0.0, 0, 0
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss, sse, n = batch_loss(idx)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss")
                backward(loss, tape)
                opt.step()
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NonFiniteError(p.name or "parameter")
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            total_loss += loss.item()
            sq_err += sse
            count += n
            n_batches += 1
        try:
            val_loss, val_rmse = evaluate()
        except NonFiniteError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from exc
        rec = EpochRecord(epoch, total_loss / max(n_batches, 1),
                          math.sqrt(sq_err / max(count, 1)), val_loss, val_rmse)
        log.epochs.append(rec)
        logger.debug("epoch %d train %.5f val_rmse %.5f", epoch, rec.train_loss, val_rmse)
        if val_rmse < best:
            best = val_rmse
            best_values = snapshot(params)
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                log.stopped_early = True
                break
    restore(params, best_values)
    return log
