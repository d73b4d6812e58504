"""Comparison trainers: pooled expanding-window network and DTS-SGD."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .earlystop import StopConfig, early_stopping
from .nn import (
    LossConfig,
    Topology,
    WeightSet,
    _forward_eval,
    _loss_and_gradient,
    forward,
    init_weights,
)
from .oes import OESConfig, average_members, init_state, oes_advance
from .validation import check_matrix, check_panels, member_seeds


@dataclass(frozen=True)
class WindowSchedule:
    """Refit plan over interval positions (0-based, half-open ranges).

    The first fit trains on ``train`` and early-stops on ``validation``; the
    model then forecasts the next ``refit_every`` intervals.  Each refit
    moves the end of both windows forward by ``refit_every``.  With
    ``expanding`` the training start stays put, otherwise it moves too.
    """

    train: tuple[int, int]
    validation: tuple[int, int]
    refit_every: int
    expanding: bool = True
    stop: int | None = None

    def __post_init__(self):
        (a, b), (c, d) = self.train, self.validation
        if not (0 <= a < b <= c < d):
            raise ValueError(f"ranges must be non-empty, disjoint and chronological: {self.train}, {self.validation}")
        if self.refit_every < 1:
            raise ValueError("refit_every must be at least 1")

    def blocks(self, n_intervals: int):
        """Yield ``(train_range, val_range, predict_range)`` for each refit."""
        end = n_intervals if self.stop is None else min(self.stop, n_intervals)
        (a, b), (c, d) = self.train, self.validation
        shift = 0
        while d + shift < end:
            start = a if self.expanding else a + shift
            yield ((start, b + shift), (c + shift, d + shift),
                   (d + shift, min(d + shift + self.refit_every, end)))
            shift += self.refit_every


def _pool(panels, lo, hi):
    chunk = panels[lo:hi]
    if not chunk:
        raise ValueError(f"empty pooled set for range [{lo}, {hi})")
    return np.vstack([p.X for p in chunk]), np.concatenate([p.r for p in chunk])


def monthly_mse(weights: WeightSet, panels) -> float:
    """Average over intervals of the eval-mode cross-sectional MSE."""
    losses = []
    for p in panels:
        resid = _forward_eval(weights, p.X) - p.r
        losses.append(float(resid @ resid) / p.n)
    return float(np.mean(losses))


def fit_pooled(train_panels, val_panels, topology: Topology, stop_cfg: StopConfig,
               loss_cfg: LossConfig, rng) -> tuple[WeightSet, float, bool]:
    """Fresh network early-stopped on pooled data; returns weights, val score, diverged."""
    X_tr, r_tr = _pool(train_panels, 0, len(train_panels))
    X_va, r_va = _pool(val_panels, 0, len(val_panels))
    theta0 = init_weights(topology, rng)
    res = early_stopping(theta0, X_tr, r_tr, X_va, r_va, stop_cfg, loss_cfg, rng)
    return res.best_weights, monthly_mse(res.best_weights, val_panels), res.diverged


@dataclass
class DNNRun:
    predictions: list[np.ndarray | None]
    member_predictions: list[list[np.ndarray | None]]
    refit_weights: list[list[WeightSet]]
    blocks: list[tuple]
    diverged: bool = False
    chosen: list[list[int]] | None = None


def _dnn_member(panels, blocks, topology, candidates, seed):
    rng = np.random.default_rng(seed)
    preds = [None] * len(panels)
    fitted, chosen, diverged = [], [], False
    for tr, va, pr in blocks:
        best = None
        for k, (stop_cfg, loss_cfg) in enumerate(candidates):
            weights, score, div = fit_pooled(panels[tr[0]:tr[1]], panels[va[0]:va[1]],
                                             topology, stop_cfg, loss_cfg, rng)
            diverged |= div
            if best is None or score < best[0]:
                best = (score, k, weights)
        fitted.append(best[2])
        chosen.append(best[1])
        for t in range(*pr):
            preds[t] = _forward_eval(best[2], panels[t].X)
    return preds, fitted, chosen, diverged


def train_expanding_dnn(panels, schedule: WindowSchedule, stop_cfg: StopConfig,
                        loss_cfg: LossConfig = LossConfig(), ensemble_size: int = 10,
                        seeds=None, random_state=None, hidden_sizes=(32, 16, 8),
                        batch_norm: bool = True, n_jobs=None, candidates=None) -> DNNRun:
    """Pooled network refit on a schedule and frozen in between, ensemble-averaged.

    With ``candidates``, a list of ``(StopConfig, LossConfig)`` pairs, every
    refit trains each candidate and keeps the one with the lowest monthly
    validation MSE (earlier candidates win ties); ``stop_cfg`` and
    ``loss_cfg`` are then ignored.
    """
    panels = check_panels(panels)
    blocks = list(schedule.blocks(len(panels)))
    if not blocks:
        raise ValueError("schedule leaves no interval to forecast")
    topology = Topology(panels[0].m, hidden_sizes, batch_norm)
    candidates = [(stop_cfg, loss_cfg)] if candidates is None else list(candidates)
    if not candidates:
        raise ValueError("candidate list is empty")
    seeds = member_seeds(random_state, ensemble_size) if seeds is None else list(seeds)
    out = Parallel(n_jobs=n_jobs)(
        delayed(_dnn_member)(panels, blocks, topology, candidates, s) for s in seeds
    )
    member_preds = [o[0] for o in out]
    return DNNRun(average_members(member_preds), member_preds, [o[1] for o in out],
                  blocks, any(o[3] for o in out), [o[2] for o in out])


@dataclass(frozen=True)
class DtsConfig:
    window: int = 10
    forget: float = 0.9
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not 0 < self.forget <= 1:
            raise ValueError("forget factor must lie in (0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def smoothed_gradient(buffer, forget: float) -> np.ndarray:
    """Forget-factor weighted mean of buffered gradients, newest last in ``buffer``."""
    grads = list(buffer)
    weights = forget ** np.arange(len(grads))[::-1]
    return np.tensordot(weights, np.stack(grads), axes=1) / weights.sum()


@dataclass
class DtsRun:
    predictions: list[np.ndarray]
    n_updates: int
    diverged: bool
    halted_at: int | None
    weights: WeightSet


def dts_sgd_run(panels, cfg: DtsConfig, loss_cfg: LossConfig = LossConfig(),
                hidden_sizes=(32, 16, 8), batch_norm: bool = True, seed=None,
                theta0: WeightSet | None = None) -> DtsRun:
    """One weight update per interval from a window of historical gradients.

    Interval ``s`` is forecast with the current weights, then its gradient
    is taken at those same weights and buffered.  The update applies the
    forget-weighted mean of the last ``window`` buffered gradients.  A
    non-finite gradient or forecast halts learning: the chain is flagged and
    the last good weights forecast every remaining interval.
    """
    panels = check_panels(panels)
    theta = init_weights(Topology(panels[0].m, hidden_sizes, batch_norm), seed) \
        if theta0 is None else theta0.copy()
    buffer = deque(maxlen=cfg.window)
    preds, n_updates, halted_at = [], 0, None
    last_good = theta.copy()
    for s, p in enumerate(panels):
        with np.errstate(all="ignore"):
            out = _forward_eval(theta, p.X)
        if not np.isfinite(out).all():
            halted_at = s if halted_at is None else halted_at
            theta = last_good
            out = _forward_eval(theta, p.X)
        preds.append(out)
        if halted_at is not None or s == len(panels) - 1:
            continue
        last_good = theta.copy()
        with np.errstate(all="ignore"):
            loss, grad = _loss_and_gradient(theta, p.X, p.r, loss_cfg.l1_penalty)
        if not (np.isfinite(loss) and np.isfinite(grad).all()):
            halted_at = s
            theta = last_good
            continue
        buffer.append(grad)
        step = cfg.learning_rate * smoothed_gradient(buffer, cfg.forget)
        if not np.isfinite(step).all():
            halted_at = s
            continue
        theta.params -= step
        n_updates += 1
    return DtsRun(preds, n_updates, halted_at is not None, halted_at, theta)


def frozen_oes_run(panels, cfg: OESConfig, seed=None) -> list[np.ndarray | None]:
    """Reference that trains once like the first online step and never updates.

    The weights built for index 2 forecast every later interval.
    """
    panels = check_panels(panels, min_intervals=3)
    state = init_state(panels[0].m, cfg, seed)
    theta, _ = oes_advance(state, panels[0], panels[1], cfg)
    return [None, None] + [_forward_eval(theta, p.X) for p in panels[2:]]


class _WalkForwardMixin:
    def walk_forward(self, panels, y=None):
        """Fit on ``panels`` and return the per-interval forecasts (None where absent)."""
        return self.fit(panels, y).predictions_


class ExpandingWindowRegressor(_WalkForwardMixin, RegressorMixin, BaseEstimator):
    """Pooled-training network refit on a schedule, frozen between refits."""

    def __init__(self, train=(0, 60), validation=(60, 120), refit_every=10, expanding=True,
                 hidden_sizes=(32, 16, 8), batch_norm=True, learning_rate=0.01,
                 l1_penalty=1e-4, batch_size=10000, max_iter=100, tol=1e-3, patience=5,
                 ensemble_size=1, random_state=None, n_jobs=None):
        self.train = train
        self.validation = validation
        self.refit_every = refit_every
        self.expanding = expanding
        self.hidden_sizes = hidden_sizes
        self.batch_norm = batch_norm
        self.learning_rate = learning_rate
        self.l1_penalty = l1_penalty
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.tol = tol
        self.patience = patience
        self.ensemble_size = ensemble_size
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, panels, y=None):
        panels = check_panels(panels, y)
        schedule = WindowSchedule(tuple(self.train), tuple(self.validation), self.refit_every,
                                  self.expanding)
        stop = StopConfig(self.max_iter, self.tol, self.patience, self.learning_rate,
                          self.batch_size)
        run = train_expanding_dnn(panels, schedule, stop, LossConfig(self.l1_penalty),
                                  self.ensemble_size, random_state=self.random_state,
                                  hidden_sizes=self.hidden_sizes, batch_norm=self.batch_norm,
                                  n_jobs=self.n_jobs)
        self.run_ = run
        self.predictions_ = run.predictions
        self.n_features_in_ = panels[0].m
        return self

    def predict(self, X):
        """Forecast with the most recent refit of every member."""
        check_is_fitted(self, "run_")
        X = check_matrix(X, self.n_features_in_)
        return np.mean([forward(w[-1], X) for w in self.run_.refit_weights], axis=0)


class DTSSGDRegressor(_WalkForwardMixin, RegressorMixin, BaseEstimator):
    """Network updated once per interval with time-smoothed historical gradients."""

    def __init__(self, window=10, forget=0.9, learning_rate=0.01, l1_penalty=1e-4,
                 hidden_sizes=(32, 16, 8), batch_norm=True, ensemble_size=1,
                 random_state=None, n_jobs=None):
        self.window = window
        self.forget = forget
        self.learning_rate = learning_rate
        self.l1_penalty = l1_penalty
        self.hidden_sizes = hidden_sizes
        self.batch_norm = batch_norm
        self.ensemble_size = ensemble_size
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, panels, y=None):
        panels = check_panels(panels, y)
        cfg = DtsConfig(self.window, self.forget, self.learning_rate)
        seeds = member_seeds(self.random_state, self.ensemble_size)
        runs = Parallel(n_jobs=self.n_jobs)(
            delayed(dts_sgd_run)(panels, cfg, LossConfig(self.l1_penalty), self.hidden_sizes,
                                 self.batch_norm, s) for s in seeds
        )
        self.runs_ = runs
        self.predictions_ = average_members([r.predictions for r in runs])
        self.diverged_ = any(r.diverged for r in runs)
        self.n_features_in_ = panels[0].m
        return self

    def predict(self, X):
        check_is_fitted(self, "runs_")
        X = check_matrix(X, self.n_features_in_)
        return np.mean([forward(r.weights, X) for r in self.runs_], axis=0)
