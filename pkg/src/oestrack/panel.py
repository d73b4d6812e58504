"""Panel data: one cross-section per interval, CSV I/O and preprocessing.

CSV layout (one row per entity-interval, UTF-8, header row)::

    date,entity_id,f_<name>...,ret[,mcap][,grp_<name>...]

``date`` is an integer interval index or an ISO-8601 date; an empty cell
marks a missing value.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, TransformerMixin

FEATURE_PREFIX = "f_"
GROUP_PREFIX = "grp_"


class PanelFormatError(ValueError):
    """Raised for malformed panel files."""


@dataclass(frozen=True, eq=False)
class PanelSlice:
    t: object
    entity_ids: np.ndarray
    X: np.ndarray
    r: np.ndarray
    feature_names: tuple[str, ...] = ()
    groups: dict[str, np.ndarray] = field(default_factory=dict)
    mcap: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.entity_ids, dtype=object)
        X = np.array(self.X, dtype=np.float64)
        r = np.array(self.r, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {X.shape}")
        n = X.shape[0]
        if ids.shape != (n,) or r.shape != (n,):
            raise ValueError(
                f"interval {self.t}: {n} feature rows, {ids.size} ids, {r.size} targets"
            )
        names = tuple(self.feature_names) or tuple(f"f_{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("feature_names length differs from the column count")
        groups = {k: np.asarray(v, dtype=object) for k, v in self.groups.items()}
        if any(v.shape != (n,) for v in groups.values()):
            raise ValueError("group labels must have one entry per entity")
        mcap = None if self.mcap is None else np.asarray(self.mcap, dtype=np.float64)
        if mcap is not None and mcap.shape != (n,):
            raise ValueError("market caps must have one entry per entity")
        for name, value in (("entity_ids", ids), ("X", X), ("r", r),
                            ("feature_names", names), ("groups", groups), ("mcap", mcap)):
            object.__setattr__(self, name, value)
        X.setflags(write=False)
        r.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "PanelSlice":
        mask = np.asarray(mask)
        return replace(
            self,
            entity_ids=self.entity_ids[mask],
            X=self.X[mask],
            r=self.r[mask],
            groups={k: v[mask] for k, v in self.groups.items()},
            mcap=None if self.mcap is None else self.mcap[mask],
        )


def _sort_key(labels):
    try:
        return [int(x) for x in labels]
    except (TypeError, ValueError):
        return list(pd.to_datetime(pd.Series(list(labels)), format="ISO8601"))


def load_panel(path, date_col: str = "date", entity_col: str = "entity_id",
               target_col: str = "ret", mcap_col: str = "mcap") -> list[PanelSlice]:
    """Read a panel CSV into chronologically ordered slices.

    Missing feature cells stay NaN.  Raises :class:`PanelFormatError` on
    missing mandatory columns, unparseable numbers, or a repeated
    (date, entity) pair; file line numbers are reported 1-based with the
    header on line 1.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in (date_col, entity_col, target_col) if c not in df.columns]
    features = [c for c in df.columns if c.startswith(FEATURE_PREFIX)]
    if not features:
        missing.append(f"{FEATURE_PREFIX}*")
    if missing:
        raise PanelFormatError(f"{path}: missing column(s) {missing}")
    dup = df.duplicated(subset=[date_col, entity_col], keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise PanelFormatError(
            f"{path}: duplicate ({date_col}, {entity_col}) = "
            f"({df[date_col].iat[row]}, {df[entity_col].iat[row]}) on line {row + 2}"
        )

    def numeric(col):
        raw = df[col].str.strip()
        blank = (raw == "").to_numpy()
        out = np.full(len(raw), np.nan)
        try:
            # astype(float) parses with correct rounding; to_numeric does not
            out[~blank] = raw[~blank].astype(np.float64).to_numpy()
        except ValueError:
            bad = pd.to_numeric(raw, errors="coerce").isna().to_numpy() & ~blank
            row = int(np.flatnonzero(bad)[0])
            raise PanelFormatError(
                f"{path}: cannot parse {col}={df[col].iat[row]!r} on line {row + 2}"
            ) from None
        return out

    X_all = np.column_stack([numeric(c) for c in features])
    r_all = numeric(target_col)
    if np.isnan(r_all).any():
        row = int(np.flatnonzero(np.isnan(r_all))[0])
        raise PanelFormatError(f"{path}: missing {target_col} on line {row + 2}")
    mcap_all = numeric(mcap_col) if mcap_col in df.columns else None
    group_cols = [c for c in df.columns if c.startswith(GROUP_PREFIX)]

    dates = df[date_col].to_numpy()
    labels = list(dict.fromkeys(dates))
    try:
        keys = _sort_key(labels)
    except (ValueError, TypeError) as exc:
        raise PanelFormatError(f"{path}: unparseable {date_col} values") from exc
    order = sorted(range(len(labels)), key=lambda i: keys[i])

    slices = []
    for i in order:
        label = labels[i]
        rows = np.flatnonzero(dates == label)
        t = int(label) if isinstance(keys[i], int) else label
        slices.append(PanelSlice(
            t=t,
            entity_ids=df[entity_col].to_numpy()[rows],
            X=X_all[rows],
            r=r_all[rows],
            feature_names=tuple(features),
            groups={c[len(GROUP_PREFIX):]: df[c].to_numpy()[rows] for c in group_cols},
            mcap=None if mcap_all is None else mcap_all[rows],
        ))
    return slices


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_panel(slices, path) -> None:
    """Write slices in the panel CSV layout; floats use shortest round-trip form."""
    slices = list(slices)
    if not slices:
        raise ValueError("nothing to write")
    first = slices[0]
    names = [n if n.startswith(FEATURE_PREFIX) else FEATURE_PREFIX + n
             for n in first.feature_names]
    group_names = list(first.groups)
    has_mcap = first.mcap is not None
    header = ["date", "entity_id", *names, "ret"]
    header += ["mcap"] if has_mcap else []
    header += [GROUP_PREFIX + g for g in group_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in slices:
            for i in range(s.n):
                row = [s.t, s.entity_ids[i], *(_fmt(v) for v in s.X[i]), _fmt(s.r[i])]
                if has_mcap:
                    row.append(_fmt(s.mcap[i]))
                row += [s.groups[g][i] for g in group_names]
                w.writerow(row)


def rank_scale_matrix(X) -> np.ndarray:
    """Rank each column, map to [-1, 1], then fill gaps with the column median.

    Ties get average ranks.  A column with one valid value maps it to 0; a
    column with no valid values becomes all zeros.
    """
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        col = X[:, j]
        valid = ~np.isnan(col)
        k = int(valid.sum())
        scaled = np.full(col.shape, np.nan)
        if k == 1:
            scaled[valid] = 0.0
        elif k > 1:
            scaled[valid] = 2.0 * (rankdata(col[valid]) - 1.0) / (k - 1) - 1.0
        fill = float(np.median(scaled[valid])) if k else 0.0
        scaled[~valid] = fill
        out[:, j] = scaled
    return out


def rank_scale(s: PanelSlice) -> PanelSlice:
    return replace(s, X=rank_scale_matrix(s.X))


def winsorize_standardize(r, lower: float = 1.0, upper: float = 99.0) -> np.ndarray:
    """Clamp to the cross-sectional percentiles, then z-score with the sample std.

    Percentiles use linear interpolation between order statistics.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size < 2:
        raise ValueError("at least two observations are needed")
    if not 0 < lower < upper < 100:
        raise ValueError(f"need 0 < lower < upper < 100, got {lower}, {upper}")
    lo, hi = np.percentile(r, [lower, upper])
    clipped = np.clip(r, lo, hi)
    sd = clipped.std(ddof=1)
    if not sd > 0:
        raise ValueError("cross-section is constant after winsorizing")
    return (clipped - clipped.mean()) / sd


@dataclass(frozen=True)
class PreprocessConfig:
    rank_features: bool = True
    winsorize: tuple[float, float] | None = None
    standardize_targets: bool = False
    breakpoint_pct: float | None = None
    breakpoint_group: str = "exchange"
    breakpoint_flag: str = "NYSE"
    rebalance_period: int = 12
    rebalance_offset: int = 5

    def __post_init__(self):
        if self.winsorize is not None:
            lo, hi = self.winsorize
            if not 0 < lo < hi < 100:
                raise ValueError("winsorize bounds must satisfy 0 < lower < upper < 100")
        if self.breakpoint_pct is not None and not 0 <= self.breakpoint_pct < 100:
            raise ValueError("breakpoint percentile must lie in [0, 100)")
        if not 0 <= self.rebalance_offset < self.rebalance_period:
            raise ValueError("rebalance offset must fall inside the period")


def investable_filter(slices, percentile: float = 5.0, group: str = "exchange",
                      flag: str = "NYSE", period: int = 12, offset: int = 5):
    """Keep entities at or above a size breakpoint, frozen between rebalances.

    At the first interval and at every position ``p`` with ``p % period ==
    offset`` the breakpoint is the ``percentile``-th percentile of market cap
    among entities whose ``group`` label equals ``flag``.  Every entity with
    a cap at or above it joins the membership list, which then applies until
    the next rebalance; members that disappear simply drop out and
    newcomers wait for a later rebalance.
    """
    out, members = [], None
    for pos, s in enumerate(slices):
        if pos == 0 or pos % period == offset:
            if s.mcap is None or group not in s.groups:
                raise ValueError(f"interval {s.t}: market cap and '{group}' labels are required")
            flagged = (s.groups[group].astype(str) == str(flag)) & ~np.isnan(s.mcap)
            if not flagged.any():
                raise ValueError(f"interval {s.t}: no '{flag}' entities to set a breakpoint")
            if percentile == 0:
                keep = np.ones(s.n, dtype=bool)
            else:
                bp = np.percentile(s.mcap[flagged], percentile)
                with np.errstate(invalid="ignore"):
                    keep = s.mcap >= bp
            members = set(s.entity_ids[keep])
        mask = np.fromiter((e in members for e in s.entity_ids), dtype=bool, count=s.n)
        out.append(s.subset(mask))
    return out


class CrossSectionalRankScaler(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`rank_scale_matrix` for one cross-section."""

    def fit(self, X, y=None):
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        return rank_scale_matrix(X)


class PanelPreprocessor(TransformerMixin, BaseEstimator):
    """Investable filter, feature rank-scaling and target winsorizing in one step.

    All steps are per-interval, so ``fit`` only records the feature count.
    """

    def __init__(self, rank_features=True, winsorize=None, standardize_targets=False,
                 breakpoint_pct=None, breakpoint_group="exchange", breakpoint_flag="NYSE",
                 rebalance_period=12, rebalance_offset=5):
        self.rank_features = rank_features
        self.winsorize = winsorize
        self.standardize_targets = standardize_targets
        self.breakpoint_pct = breakpoint_pct
        self.breakpoint_group = breakpoint_group
        self.breakpoint_flag = breakpoint_flag
        self.rebalance_period = rebalance_period
        self.rebalance_offset = rebalance_offset

    @classmethod
    def from_config(cls, cfg: PreprocessConfig) -> "PanelPreprocessor":
        return cls(**{k: getattr(cfg, k) for k in cls._get_param_names()})

    def fit(self, slices, y=None):
        slices = list(slices)
        self.n_features_in_ = slices[0].m
        return self

    def transform(self, slices):
        slices = list(slices)
        if self.breakpoint_pct is not None:
            slices = investable_filter(slices, self.breakpoint_pct, self.breakpoint_group,
                                       self.breakpoint_flag, self.rebalance_period,
                                       self.rebalance_offset)
        out = []
        for s in slices:
            if self.rank_features:
                s = rank_scale(s)
            if self.standardize_targets or self.winsorize is not None:
                lo, hi = self.winsorize if self.winsorize is not None else (1.0, 99.0)
                s = replace(s, r=winsorize_standardize(s.r, lo, hi))
            out.append(s)
        return out
