"""Early stopping: train on one data set while monitoring loss on another."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    AdamState,
    DivergenceError,
    LossConfig,
    WeightSet,
    _loss_and_gradient,
    adam_step,
    check_features,
    mse,
)


@dataclass(frozen=True)
class StopConfig:
    max_iter: int = 100
    tol: float = 1e-3
    patience: int = 5
    learning_rate: float = 0.01
    batch_size: int = 1000

    def __post_init__(self):
        for name in ("max_iter", "tol", "patience", "learning_rate", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")


@dataclass
class StopResult:
    best_iter: int
    best_weights: WeightSet
    val_trace: list[float]
    train_trace: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.val_trace) - 1

    @property
    def best_val_loss(self) -> float:
        return self.val_trace[self.best_iter]


class PatienceTracker:
    """Bookkeeping for the stop rule, independent of any model.

    Feed the loss measured before training with ``start`` and every later
    loss with ``update``; ``update`` returns ``(improved, stop)``.  A step
    counts against patience when the loss fell by less than ``tol`` relative
    to the best value seen before that step, whether or not it set a new best.
    """

    def __init__(self, tol: float, patience: int):
        self.tol = tol
        self.patience = patience
        self.best = np.inf
        self.best_iter = 0
        self.counter = 0
        self.k = 0

    def start(self, loss: float) -> None:
        self.best = loss
        self.best_iter = 0
        self.counter = 0
        self.k = 0

    def update(self, loss: float) -> tuple[bool, bool]:
        self.k += 1
        gain = self.best - loss
        improved = loss < self.best
        if improved:
            self.best = loss
            self.best_iter = self.k
        if gain < self.tol:
            self.counter += 1
            if self.counter >= self.patience:
                return improved, True
        else:
            self.counter = 0
        return improved, False


def walk_trace(trace, tol: float, patience: int, max_iter: int | None = None):
    """Apply the stop rule to a scripted loss trace.

    ``trace[0]`` is the loss before training.  Returns ``(best_iter, stop_iter)``
    where ``stop_iter`` is the last iteration that was executed.
    """
    tracker = PatienceTracker(tol, patience)
    tracker.start(trace[0])
    limit = len(trace) - 1 if max_iter is None else min(max_iter, len(trace) - 1)
    k = 0
    for k in range(1, limit + 1):
        _, stop = tracker.update(trace[k])
        if stop:
            break
    return tracker.best_iter, k


def train_epoch(weights: WeightSet, adam: AdamState, X, r, cfg: StopConfig,
                loss_cfg: LossConfig, rng) -> float:
    """One shuffled pass of mini-batch ADAM steps; returns the mean batch loss."""
    n = X.shape[0]
    perm = rng.permutation(n)
    bs = cfg.batch_size
    total = 0.0
    for start in range(0, n, bs):
        idx = perm[start:start + bs]
        loss, grad = _loss_and_gradient(weights, X[idx], r[idx], loss_cfg.l1_penalty)
        if not (np.isfinite(loss) and np.isfinite(grad).all()):
            raise DivergenceError(f"training loss became {loss}")
        adam_step(weights, adam, grad, cfg.learning_rate)
        total += loss * len(idx)
    return total / n


def early_stopping(theta0: WeightSet, X_train, r_train, X_val, r_val,
                   cfg: StopConfig, loss_cfg: LossConfig = LossConfig(),
                   rng=None) -> StopResult:
    """Train from ``theta0`` and keep the weights with the lowest validation loss.

    Validation loss is eval-mode MSE (no L1 term) and is measured once before
    the first pass, so returning the starting weights (``best_iter == 0``) is
    possible.  Each iteration is one full shuffled pass over the training
    rows with a fresh ADAM state at the start of the call.  ``theta0`` is not
    modified.  A non-finite training loss ends the run early and the result
    carries ``diverged=True`` with the best weights found so far.

    Parameters
    ----------
    theta0 : WeightSet
    X_train, r_train, X_val, r_val : array-like
        Training and validation interval data; both feature matrices need the
        network's input dimension.
    cfg : StopConfig
    loss_cfg : LossConfig
    rng : numpy Generator or seed
        Drives the mini-batch shuffles.
    """
    X_train = check_features(theta0, X_train)
    X_val = check_features(theta0, X_val)
    r_train = np.asarray(r_train, dtype=np.float64).ravel()
    r_val = np.asarray(r_val, dtype=np.float64).ravel()
    if X_train.shape[0] != r_train.size or X_val.shape[0] != r_val.size:
        raise ValueError("feature rows and targets differ in length")
    if r_train.size == 0 or r_val.size == 0:
        raise ValueError("empty training or validation set")
    rng = np.random.default_rng(rng)

    theta = theta0.copy()
    adam = AdamState.fresh(theta.params.size)
    tracker = PatienceTracker(cfg.tol, cfg.patience)
    first = mse(theta, X_val, r_val)
    tracker.start(first)
    val_trace, train_trace = [first], []
    best = theta.copy()
    diverged = False

    for _ in range(cfg.max_iter):
        try:
            train_loss = train_epoch(theta, adam, X_train, r_train, cfg, loss_cfg, rng)
            val = mse(theta, X_val, r_val)
        except (DivergenceError, FloatingPointError):
            diverged = True
            break
        if not np.isfinite(val):
            diverged = True
            break
        train_trace.append(train_loss)
        val_trace.append(val)
        improved, stop = tracker.update(val)
        if improved:
            best = theta.copy()
        if stop:
            break
    return StopResult(tracker.best_iter, best, val_trace, train_trace, diverged)


def write_trace_csv(path, result: StopResult) -> None:
    """Rows of ``k, train_loss, val_loss, is_best``; ``k = 0`` is the pre-training check."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "train_loss", "val_loss", "is_best"])
        for k, val in enumerate(result.val_trace):
            train = "" if k == 0 else repr(result.train_trace[k - 1])
            w.writerow([k, train, repr(val), int(k == result.best_iter)])
