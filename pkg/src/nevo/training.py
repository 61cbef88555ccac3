"""Gradient stage: minibatch Adam with a FIFO ring of end-of-epoch
parameter snapshots.

The ring is the bridge to the evolutionary stage; its newest entries
become the seed population.  Epoch losses stored in the ring are full
training-set re-evaluations with the snapshot parameters, not running
batch averages, so a stored (params, loss) pair is self-consistent.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError, ShapeMismatchError, TrainingDiverged
from .network import NetworkSpec, backward, init_params, loss, predict
from .rng import RngStream
from .data import batches


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 10
    delta1: float = 0.0
    min_improve: float = 1e-5
    patience: int = 5
    ring_size: int = 10
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.lr > 0, "/bp/lr", "must be > 0"),
            (0 <= self.beta1 < 1, "/bp/beta1", "must be in [0, 1)"),
            (0 <= self.beta2 < 1, "/bp/beta2", "must be in [0, 1)"),
            (self.eps > 0, "/bp/eps", "must be > 0"),
            (self.lam >= 0, "/bp/lambda", "must be >= 0"),
            (self.batch_size >= 1, "/bp/batch_size", "must be >= 1"),
            (self.max_epochs >= 0, "/bp/max_epochs", "must be >= 0"),
            (self.delta1 >= 0, "/bp/delta1", "must be >= 0"),
            (self.min_improve >= 0, "/bp/min_improve", "must be >= 0"),
            (self.patience >= 1, "/bp/patience", "must be >= 1"),
            (self.ring_size >= 4, "/bp/ring_size", "must be >= 4"),
            (self.seed >= 0, "/bp/seed", "must be >= 0"),
        ]
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(path, msg)


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d: int, dtype=np.float32) -> "AdamState":
        return cls(np.zeros(d, dtype=dtype), np.zeros(d, dtype=dtype), 0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              cfg: TrainConfig):
    """One bias-corrected Adam update; returns fresh (params, state)."""
    if params.shape != grad.shape or params.shape != state.m1.shape:
        raise ShapeMismatchError(
            f"adam_step: params {tuple(params.shape)}, grad {tuple(grad.shape)}, "
            f"state {tuple(state.m1.shape)} disagree")
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step: non-finite gradient")
    t = state.t + 1
    m1 = cfg.beta1 * state.m1 + (1.0 - cfg.beta1) * grad
    m2 = cfg.beta2 * state.m2 + (1.0 - cfg.beta2) * (grad * grad)
    mhat = m1 / (1.0 - cfg.beta1 ** t)
    vhat = m2 / (1.0 - cfg.beta2 ** t)
    new_params = params - cfg.lr * (mhat / (np.sqrt(vhat) + cfg.eps))
    return new_params, AdamState(m1, m2, t)


@dataclass(frozen=True)
class RingEntry:
    epoch: int
    params: np.ndarray
    train_loss: float


class CheckpointRing:
    """FIFO of the most recent end-of-epoch (epoch, params, loss) triples."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("/bp/ring_size", "must be >= 1")
        self.capacity = capacity
        self._slots: deque = deque(maxlen=capacity)

    def push(self, epoch: int, params: np.ndarray, train_loss: float):
        if self._slots and epoch <= self._slots[-1].epoch:
            raise ShapeMismatchError(
                f"ring epochs must increase: got {epoch} after "
                f"{self._slots[-1].epoch}")
        self._slots.append(RingEntry(epoch, params.copy(), float(train_loss)))

    def __len__(self):
        return len(self._slots)

    def __iter__(self):
        return iter(self._slots)

    @property
    def entries(self) -> list:
        return list(self._slots)

    @property
    def newest(self) -> RingEntry:
        if not self._slots:
            raise IndexError("ring is empty")
        return self._slots[-1]


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: Optional[float] = None
    test_acc: Optional[float] = None
    wall_ms: float = 0.0


def train(spec: NetworkSpec, data, cfg: TrainConfig, test_data=None,
          stream: Optional[RngStream] = None, callback=None):
    """Minibatch Adam over shuffled epochs.

    Returns (final params, CheckpointRing, history).  Stops at
    max_epochs, or when the epoch loss drops below delta1, or when the
    best epoch loss fails to improve by min_improve for `patience`
    consecutive epochs.  A non-finite loss or gradient raises
    TrainingDiverged carrying the ring and history built so far.

    RNG paths: child(0) initializes parameters, child(1, epoch) orders
    each epoch's batches.
    """
    if len(data.images) == 0:
        raise ShapeMismatchError("train: empty dataset")
    if stream is None:
        stream = RngStream(cfg.seed)
    theta = init_params(spec, stream.child(0))
    state = AdamState.zeros(theta.shape[0], theta.dtype)
    ring = CheckpointRing(cfg.ring_size)
    history: list = []
    best = float("inf")
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = stream.child(1, epoch).generator()
        try:
            for xb, yb in batches(data, cfg.batch_size, shuffle=True,
                                  rng=shuffle_rng):
                batch_loss, grad = backward(spec, theta, xb, yb, cfg.lam)
                if not np.isfinite(batch_loss):
                    raise NumericError(
                        f"epoch {epoch}: non-finite batch loss {batch_loss}")
                theta, state = adam_step(state, theta, grad, cfg)
        except NumericError as exc:
            raise TrainingDiverged(str(exc), ring=ring, history=history) from exc

        epoch_loss = loss(spec, theta, data.images, data.labels, cfg.lam)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(
                f"epoch {epoch}: non-finite epoch loss", ring=ring,
                history=history)
        ring.push(epoch, theta, epoch_loss)

        test_loss = test_acc = None
        if test_data is not None:
            test_loss = loss(spec, theta, test_data.images, test_data.labels, 0.0)
            preds = predict(spec, theta, test_data.images)
            test_acc = float(np.mean(preds == test_data.labels))
        wall_ms = (time.perf_counter() - t0) * 1000.0
        metrics = EpochMetrics(epoch, epoch_loss, test_loss, test_acc, wall_ms)
        history.append(metrics)
        if callback is not None:
            callback(metrics)

        if epoch_loss < cfg.delta1:
            break
        if epoch_loss < best - cfg.min_improve:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return theta, ring, history
