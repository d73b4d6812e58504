"""Online early stopping.

At every interval ``t`` the network is early-stopped by training on
interval ``t-2`` while validating on ``t-1``.  The winning number of
passes joins a running mean; the early-stopped weights then receive
``floor(mean + 0.5)`` further passes over interval ``t-1`` and the result
predicts interval ``t``.  Only the early-stopped weights are carried
forward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .earlystop import StopConfig, early_stopping, train_epoch
from .nn import (
    AdamState,
    DivergenceError,
    LossConfig,
    Topology,
    WeightSet,
    _forward_eval,
    _loss_and_gradient,
    forward,
    init_weights,
)
from .panel import PanelSlice
from .validation import check_matrix, check_panels, member_seeds


@dataclass(frozen=True)
class OESConfig:
    stop: StopConfig = StopConfig()
    loss: LossConfig = LossConfig()
    hidden_sizes: tuple[int, ...] = (32, 16, 8)
    batch_norm: bool = True

    def topology(self, input_dim: int) -> Topology:
        return Topology(input_dim, self.hidden_sizes, self.batch_norm)


@dataclass
class OnlineState:
    theta_star: WeightSet
    rng: np.random.Generator
    tau_mean: float = 0.0
    tau_history: list[int] = field(default_factory=list)
    t: int = 2

    def record(self, tau_prime: int) -> None:
        n = len(self.tau_history)
        self.tau_mean = (self.tau_mean * n + tau_prime) / (n + 1)
        self.tau_history.append(int(tau_prime))
        self.t += 1


@dataclass
class FitReport:
    t: int
    tau_prime: int
    n_passes: int
    tau_mean: float
    gradient_deficit: float
    val_loss_start: float
    val_loss_best: float
    es_iterations: int
    predictions: np.ndarray | None = None


def rounded_passes(tau_mean: float) -> int:
    return int(math.floor(tau_mean + 0.5))


def init_state(input_dim: int, cfg: OESConfig, seed) -> OnlineState:
    rng = np.random.default_rng(seed)
    return OnlineState(init_weights(cfg.topology(input_dim), rng), rng)


def oes_advance(state: OnlineState, older: PanelSlice, newer: PanelSlice,
                cfg: OESConfig) -> tuple[WeightSet, FitReport]:
    """Early-stop on ``older`` against ``newer`` and build the next prediction weights.

    ``state`` moves forward in place; the returned weights are a separate
    copy that is never fed back into the state.
    """
    result = early_stopping(state.theta_star, older.X, older.r, newer.X, newer.r,
                            cfg.stop, cfg.loss, state.rng)
    if result.diverged:
        raise DivergenceError(f"early stopping diverged while predicting interval index {state.t}")
    theta_star = result.best_weights
    t_pred = state.t
    state.record(result.best_iter)
    passes = rounded_passes(state.tau_mean)

    _, grad = _loss_and_gradient(theta_star, newer.X, newer.r, cfg.loss.l1_penalty,
                                 update_stats=False)
    deficit = abs(cfg.stop.learning_rate * (result.best_iter - passes)) * float(np.linalg.norm(grad))

    theta = theta_star.copy()
    if passes:
        adam = AdamState.fresh(theta.params.size)
        for _ in range(passes):
            train_epoch(theta, adam, newer.X, newer.r, cfg.stop, cfg.loss, state.rng)
    state.theta_star = theta_star
    report = FitReport(
        t=t_pred,
        tau_prime=result.best_iter,
        n_passes=passes,
        tau_mean=state.tau_mean,
        gradient_deficit=deficit,
        val_loss_start=result.val_trace[0],
        val_loss_best=result.best_val_loss,
        es_iterations=result.n_iter,
    )
    return theta, report


def oes_step(state: OnlineState, older: PanelSlice, newer: PanelSlice, X_next,
             cfg: OESConfig):
    """One online step: returns ``(predictions, state, report)``.

    Only the features of the interval being predicted are taken, so its
    realized targets cannot leak into the forecast.
    """
    if older.m != newer.m:
        raise ValueError("consecutive intervals disagree on the feature count")
    X_next = check_matrix(X_next, newer.m)
    theta, report = oes_advance(state, older, newer, cfg)
    preds = _forward_eval(theta, X_next)
    if not np.isfinite(preds).all():
        raise DivergenceError("prediction is not finite")
    report.predictions = preds
    return preds, state, report


@dataclass
class ChainResult:
    seed: int
    predictions: list[np.ndarray | None]
    reports: list[FitReport]
    weights: list[WeightSet | None]
    state: OnlineState | None
    next_weights: WeightSet | None = None
    diverged: bool = False


def oes_chain(panels, cfg: OESConfig, seed, store_weights: bool = False,
              prepare_next: bool = False) -> ChainResult:
    """Run one chain over ``panels``; predictions exist from index 2 onwards.

    With ``prepare_next`` the chain also advances past the final interval
    so ``next_weights`` can forecast an interval that has not been seen yet.
    A divergence stops the chain and sets ``diverged``.
    """
    panels = check_panels(panels, min_intervals=3 if not prepare_next else 2)
    state = init_state(panels[0].m, cfg, seed)
    T = len(panels)
    preds: list = [None] * T
    weights: list = [None] * T
    reports = []
    try:
        for t in range(2, T):
            theta, report = oes_advance(state, panels[t - 2], panels[t - 1], cfg)
            report.t = t
            report.predictions = _forward_eval(theta, panels[t].X)
            if not np.isfinite(report.predictions).all():
                raise DivergenceError(f"non-finite prediction at interval index {t}")
            preds[t] = report.predictions
            reports.append(report)
            if store_weights:
                weights[t] = theta
        next_weights = None
        if prepare_next:
            next_weights, report = oes_advance(state, panels[T - 2], panels[T - 1], cfg)
            report.t = T
            reports.append(report)
    except DivergenceError:
        return ChainResult(int(seed), preds, reports, weights, state, None, diverged=True)
    return ChainResult(int(seed), preds, reports, weights, state, next_weights)


@dataclass
class EnsembleRun:
    predictions: list[np.ndarray | None]
    chains: list[ChainResult]

    @property
    def diverged(self) -> bool:
        return any(c.diverged for c in self.chains)


def average_members(member_preds: list[list]) -> list:
    out = []
    for per_t in zip(*member_preds):
        if any(p is None for p in per_t):
            out.append(None)
        else:
            out.append(np.mean(np.stack(per_t), axis=0))
    return out


def oes_run(panels, cfg: OESConfig, ensemble_size: int = 10, seeds=None,
            random_state=None, n_jobs=None, store_weights: bool = False,
            prepare_next: bool = False) -> EnsembleRun:
    """Run independent chains and average their raw predictions per interval."""
    panels = check_panels(panels, min_intervals=3 if not prepare_next else 2)
    if seeds is None:
        if ensemble_size < 1:
            raise ValueError("ensemble_size must be positive")
        seeds = member_seeds(random_state, ensemble_size)
    chains = Parallel(n_jobs=n_jobs)(
        delayed(oes_chain)(panels, cfg, s, store_weights, prepare_next) for s in seeds
    )
    return EnsembleRun(average_members([c.predictions for c in chains]), list(chains))


class OnlineEarlyStoppingRegressor(RegressorMixin, BaseEstimator):
    """Feedforward regressor trained online with early-stopping-derived step counts.

    ``fit`` consumes an ordered sequence of intervals (``PanelSlice`` objects,
    or a list of feature matrices with a list of target vectors).  It stores
    the walk-forward forecasts in ``predictions_`` and prepares weights so
    ``predict`` forecasts the interval after the last one seen;
    ``partial_fit`` adds one more interval.
    """

    def __init__(self, hidden_sizes=(32, 16, 8), batch_norm=True, learning_rate=0.01,
                 l1_penalty=1e-4, batch_size=1000, max_iter=100, tol=1e-3, patience=5,
                 ensemble_size=1, random_state=None, n_jobs=None, store_weights=False):
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
        self.store_weights = store_weights

    def _config(self) -> OESConfig:
        return OESConfig(
            StopConfig(self.max_iter, self.tol, self.patience, self.learning_rate, self.batch_size),
            LossConfig(self.l1_penalty),
            tuple(self.hidden_sizes),
            self.batch_norm,
        )

    def fit(self, panels, y=None):
        panels = check_panels(panels, y, min_intervals=2)
        cfg = self._config()
        self.seeds_ = member_seeds(self.random_state, self.ensemble_size)
        run = oes_run(panels, cfg, seeds=self.seeds_, n_jobs=self.n_jobs,
                      store_weights=self.store_weights, prepare_next=True)
        if run.diverged:
            raise DivergenceError("at least one ensemble member diverged")
        self.chains_ = run.chains
        self.predictions_ = run.predictions
        self.reports_ = [c.reports for c in run.chains]
        self.n_features_in_ = panels[0].m
        self.last_interval_ = panels[-1]
        return self

    def partial_fit(self, panel: PanelSlice, y=None):
        """Absorb one more interval; falls back to ``fit`` when nothing is fitted."""
        if not hasattr(self, "chains_"):
            raise ValueError("call fit with at least two intervals before partial_fit")
        (panel,) = check_panels([panel], None if y is None else [y])
        cfg = self._config()
        preds = []
        for chain in self.chains_:
            preds.append(_forward_eval(chain.next_weights, panel.X))
            theta, report = oes_advance(chain.state, self.last_interval_, panel, cfg)
            report.t = len(chain.predictions) + 1
            chain.reports.append(report)
            chain.predictions.append(preds[-1])
            chain.weights.append(chain.next_weights if self.store_weights else None)
            chain.next_weights = theta
        self.predictions_.append(np.mean(np.stack(preds), axis=0))
        self.last_interval_ = panel
        return self

    def predict(self, X):
        check_is_fitted(self, "chains_")
        X = check_matrix(X, self.n_features_in_)
        return np.mean([forward(c.next_weights, X, "eval") for c in self.chains_], axis=0)

    def walk_forward(self, panels, y=None) -> list[np.ndarray | None]:
        """Fit on ``panels`` and return the out-of-sample forecast for each interval."""
        return self.fit(panels, y).predictions_

    @property
    def tau_history_(self) -> list[list[int]]:
        check_is_fitted(self, "chains_")
        return [list(c.state.tau_history) for c in self.chains_]
