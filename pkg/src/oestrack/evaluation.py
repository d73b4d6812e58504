"""Forecast evaluation: R-squared variants, IC, decile portfolios, feature importance.

Prediction sets are ``pandas.DataFrame`` objects with columns
``t, entity_id, prediction, realized`` and unique ``(t, entity_id)`` keys.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy.stats import rankdata

COLUMNS = ["t", "entity_id", "prediction", "realized"]


def prediction_frame(panels, predictions, indices=None) -> pd.DataFrame:
    """Align per-interval forecasts with realized targets.

    ``predictions[k]`` belongs to ``panels[k]``; entries that are None are
    skipped unless listed in ``indices``, which restricts the output.
    """
    idx = range(len(panels)) if indices is None else indices
    frames = []
    for k in idx:
        p, pred = panels[k], predictions[k]
        if pred is None:
            raise ValueError(f"no forecast for interval {panels[k].t}")
        frames.append(pd.DataFrame({
            "t": [p.t] * p.n,
            "entity_id": p.entity_ids.astype(str),
            "prediction": np.asarray(pred, dtype=np.float64),
            "realized": p.r,
        }))
    return check_prediction_set(pd.concat(frames, ignore_index=True))


def check_prediction_set(df: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"prediction set lacks columns {missing}")
    if df.empty:
        raise ValueError("prediction set is empty")
    if df.duplicated(["t", "entity_id"]).any():
        raise ValueError("duplicate (t, entity_id) keys in prediction set")
    if df["realized"].isna().any() or df["prediction"].isna().any():
        raise ValueError("every forecast needs a realized value")
    return df


def _groups(df):
    return df.groupby("t", sort=False)


def pooled_r2_oos(df: pd.DataFrame) -> float:
    """``1 - sum((r - rhat)^2) / sum(r^2)`` over the pooled set, no demeaning."""
    r = df["realized"].to_numpy()
    rhat = df["prediction"].to_numpy()
    denom = float(r @ r)
    if denom == 0:
        raise ValueError("all realized values are zero")
    resid = r - rhat
    return 1.0 - float(resid @ resid) / denom


def interval_r2(df: pd.DataFrame) -> pd.Series:
    """Per-interval R-squared with the cross-sectional mean in the denominator.

    Intervals with fewer than two entities or constant realized values are NaN.
    """
    out = {}
    for t, g in _groups(df):
        r = g["realized"].to_numpy()
        denom = float(((r - r.mean()) ** 2).sum())
        if len(r) < 2 or denom == 0:
            out[t] = np.nan
            continue
        out[t] = 1.0 - float(((r - g["prediction"].to_numpy()) ** 2).sum()) / denom
    return pd.Series(out, name="r2")


def mean_monthly_r2(df: pd.DataFrame) -> float:
    s = interval_r2(df)
    bad = int(s.isna().sum())
    if bad:
        warnings.warn(f"{bad} interval(s) with constant realized values excluded from mean R2")
    if bad == len(s):
        raise ValueError("no interval has a usable R2")
    return float(s.mean())


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / denom) if denom > 0 else np.nan


def information_coefficient(df: pd.DataFrame, rank_based: bool = False):
    """Cross-sectional correlation of forecasts with outcomes per interval.

    Pearson by default, Spearman with ``rank_based``.  Intervals with fewer
    than three entities or a constant vector are dropped with a warning.
    Returns ``(series, mean)``.
    """
    out = {}
    for t, g in _groups(df):
        a = g["prediction"].to_numpy()
        b = g["realized"].to_numpy()
        if len(a) < 3:
            out[t] = np.nan
            continue
        if rank_based:
            a, b = rankdata(a), rankdata(b)
        out[t] = np.clip(_pearson(a, b), -1.0, 1.0)
    s = pd.Series(out, name="rank_ic" if rank_based else "ic", dtype=float)
    bad = int(s.isna().sum())
    if bad:
        warnings.warn(f"{bad} interval(s) with a constant vector excluded from IC")
    s = s.dropna()
    return s, float(s.mean()) if len(s) else np.nan


def sharpe_ratio(spread) -> float:
    """Annualised ``12 * mean / sqrt(12 * var)`` of a monthly series (sample variance)."""
    spread = np.asarray(spread, dtype=np.float64)
    if spread.size < 2:
        return np.nan
    var = spread.var(ddof=1)
    if not var > 0:
        return np.nan
    return 12.0 * spread.mean() / np.sqrt(12.0 * var)


def portfolio_members(predictions, entity_ids, n_groups: int = 10) -> list[np.ndarray]:
    """Row indices of each portfolio, lowest forecasts first.

    Rows are ordered by forecast with entity id breaking ties, then cut into
    contiguous blocks whose sizes differ by at most one, the larger blocks
    coming first.
    """
    order = np.lexsort((np.asarray(entity_ids, dtype=str), np.asarray(predictions)))
    return np.array_split(order, n_groups)


@dataclass
class DecileReport:
    table: pd.DataFrame
    spread: pd.Series
    quintile_spread: pd.Series
    portfolio_returns: pd.DataFrame
    sharpe: float
    skipped: int = 0

    @property
    def mean_spread(self) -> float:
        return float(self.spread.mean())


def decile_table(df: pd.DataFrame, n_groups: int = 10) -> DecileReport:
    """Equal-weighted portfolios sorted on forecasts.

    ``table`` has rows ``P1..P10`` with the time-averaged mean forecast and
    realized value; ``spread`` is the per-interval top-minus-bottom series
    and ``sharpe`` its annualised ratio.  Intervals with fewer than
    ``n_groups`` entities are skipped with a warning.
    """
    labels = [f"P{k + 1}" for k in range(n_groups)]
    pred_rows, real_rows, q_spread, ts = [], [], [], []
    skipped = 0
    for t, g in _groups(df):
        if len(g) < n_groups:
            skipped += 1
            continue
        pred = g["prediction"].to_numpy()
        real = g["realized"].to_numpy()
        ids = g["entity_id"].to_numpy()
        members = portfolio_members(pred, ids, n_groups)
        pred_rows.append([pred[m].mean() for m in members])
        real_rows.append([real[m].mean() for m in members])
        quint = portfolio_members(pred, ids, 5)
        q_spread.append(real[quint[-1]].mean() - real[quint[0]].mean())
        ts.append(t)
    if skipped:
        warnings.warn(f"{skipped} interval(s) with fewer than {n_groups} entities skipped")
    if not ts:
        raise ValueError("no interval is large enough for portfolio sorts")
    realized = pd.DataFrame(real_rows, index=pd.Index(ts, name="t"), columns=labels)
    predicted = pd.DataFrame(pred_rows, index=realized.index, columns=labels)
    table = pd.DataFrame({"predicted": predicted.mean(), "realized": realized.mean()})
    table.index.name = "portfolio"
    spread = (realized[labels[-1]] - realized[labels[0]]).rename("spread")
    return DecileReport(
        table=table,
        spread=spread,
        quintile_spread=pd.Series(q_spread, index=realized.index, name="quintile_spread"),
        portfolio_returns=realized,
        sharpe=sharpe_ratio(spread.to_numpy()),
        skipped=skipped,
    )


def baseline_r2(counterfactual, baseline) -> float:
    """R-squared of a counterfactual forecast measured against the baseline forecast.

    The baseline's own cross-sectional mean sets the denominator, so an
    unchanged forecast scores exactly 1.
    """
    baseline = np.asarray(baseline, dtype=np.float64)
    counterfactual = np.asarray(counterfactual, dtype=np.float64)
    denom = float(((baseline - baseline.mean()) ** 2).sum())
    if denom == 0:
        raise ValueError("baseline forecast is constant across entities")
    return 1.0 - float(((counterfactual - baseline) ** 2).sum()) / denom


def feature_importance(predictors, X_list, features=None, labels=None,
                       feature_names=None) -> pd.DataFrame:
    """Importance of each feature per interval as one minus the baseline R-squared.

    ``predictors[k]`` is a callable mapping a feature matrix to forecasts for
    interval ``k`` (for example the prediction weights an online chain used
    there).  For every listed feature its column is set to zero for all
    entities and the forecast repeated.  Returns a frame indexed by interval
    label with one column per feature.
    """
    X_list = [np.asarray(X, dtype=np.float64) for X in X_list]
    if len(predictors) != len(X_list):
        raise ValueError("one predictor per interval is required")
    m = X_list[0].shape[1]
    features = range(m) if features is None else list(features)
    names = feature_names if feature_names is not None else [f"f_{j}" for j in range(m)]
    rows = []
    for predict, X in zip(predictors, X_list):
        base = predict(X)
        row = []
        for j in features:
            Xj = X.copy()
            Xj[:, j] = 0.0
            row.append(1.0 - baseline_r2(predict(Xj), base))
        rows.append(row)
    index = pd.Index(range(len(X_list)) if labels is None else list(labels), name="t")
    return pd.DataFrame(rows, index=index, columns=[names[j] for j in features])


def rolling_average(frame, window: int = 12):
    """Trailing mean; the first ``window - 1`` rows average whatever is available."""
    return frame.rolling(window, min_periods=1).mean()


def block_average(frame, period: int = 12):
    """Mean over consecutive blocks of ``period`` rows (years for monthly data)."""
    block = np.arange(len(frame)) // period
    out = frame.groupby(block).mean()
    out.index.name = "block"
    return out


def ensemble_combine(a: pd.DataFrame, b: pd.DataFrame, mode: str = "standardized_mean"):
    """Average two aligned prediction sets; rows follow the order of ``a``.

    ``raw_mean`` averages the forecasts directly; ``standardized_mean`` first
    z-scores each model's forecasts within every interval (sample standard
    deviation).
    """
    if mode not in ("raw_mean", "standardized_mean"):
        raise ValueError(f"unknown combination mode {mode!r}")
    key = ["t", "entity_id"]
    a = a.reset_index(drop=True)
    ka = pd.MultiIndex.from_frame(a[key].astype(str))
    kb = pd.MultiIndex.from_frame(b[key].astype(str))
    if len(a) != len(b) or not ka.is_unique or not kb.is_unique or not ka.isin(kb).all():
        raise ValueError("prediction sets are not aligned on (t, entity_id)")
    pa = a["prediction"].to_numpy()
    pb = b["prediction"].to_numpy()[kb.get_indexer(ka)]
    if mode == "standardized_mean":
        pa, pb = _standardize_within(a["t"], pa), _standardize_within(b["t"], pb)
    out = a.copy()
    out["prediction"] = (pa + pb) / 2.0
    return out


def _standardize_within(t, values):
    s = pd.Series(values)
    g = s.groupby(t.to_numpy())
    sd = g.transform(lambda x: x.std(ddof=1))
    if (sd <= 0).any() or sd.isna().any():
        raise ValueError("cannot standardise a constant cross-section")
    return ((s - g.transform("mean")) / sd).to_numpy()


def interval_correlation(a: pd.DataFrame, b: pd.DataFrame, window: int = 12) -> pd.DataFrame:
    """Per-interval Pearson correlation between two models' forecasts plus a rolling mean."""
    key = ["t", "entity_id"]
    merged = a[key + ["prediction"]].merge(b[key + ["prediction"]], on=key,
                                           suffixes=("_a", "_b"), validate="one_to_one")
    if len(merged) != len(a) or len(merged) != len(b):
        raise ValueError("prediction sets cover different (t, entity_id) keys")
    corr = {t: _pearson(g["prediction_a"].to_numpy(), g["prediction_b"].to_numpy())
            for t, g in merged.groupby("t", sort=False)}
    out = pd.DataFrame({"correlation": pd.Series(corr)})
    out.index.name = "t"
    out["rolling"] = rolling_average(out["correlation"], window)
    return out


@dataclass
class MetricsReport:
    pooled_r2_oos: float
    mean_r2: float
    mean_ic: float
    mean_rank_ic: float
    mean_spread: float
    sharpe: float
    mean_quintile_spread: float
    n_intervals: int

    def to_dict(self) -> dict:
        return {k: (None if v is None or (isinstance(v, float) and np.isnan(v)) else v)
                for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(df: pd.DataFrame, n_groups: int = 10):
    """All summary metrics plus the series behind them.

    Returns ``(report, series, deciles)`` where ``series`` is a frame indexed
    by interval with IC, rank IC, R-squared and portfolio spreads.
    """
    df = check_prediction_set(df)
    ic, mean_ic = information_coefficient(df)
    ric, mean_ric = information_coefficient(df, rank_based=True)
    r2 = interval_r2(df)
    dec = decile_table(df, n_groups)
    series = pd.concat([ic, ric, r2, dec.spread, dec.quintile_spread], axis=1)
    series.index.name = "t"
    report = MetricsReport(
        pooled_r2_oos=pooled_r2_oos(df),
        mean_r2=float(r2.mean()),
        mean_ic=mean_ic,
        mean_rank_ic=mean_ric,
        mean_spread=dec.mean_spread,
        sharpe=float(dec.sharpe),
        mean_quintile_spread=float(dec.quintile_spread.mean()),
        n_intervals=int(df["t"].nunique()),
    )
    return report, series, dec
