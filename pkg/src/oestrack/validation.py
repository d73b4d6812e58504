"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .panel import PanelSlice


def check_panels(panels, y=None, min_intervals: int = 1) -> list[PanelSlice]:
    """Coerce input to a list of :class:`PanelSlice` with a common feature count.

    Accepts either a sequence of slices (``y`` must be None) or a sequence
    of feature matrices plus a matching sequence of target vectors, in which
    case intervals are labelled ``0, 1, ...`` and entities ``0..n-1``.
    """
    if isinstance(panels, PanelSlice):
        panels = [panels]
    panels = list(panels)
    if y is not None:
        y = list(y)
        if len(y) != len(panels):
            raise ValueError(f"{len(panels)} feature matrices but {len(y)} target vectors")
        panels = [
            PanelSlice(t=k, entity_ids=np.arange(np.shape(X)[0]).astype(str), X=X, r=r)
            for k, (X, r) in enumerate(zip(panels, y))
        ]
    elif panels and not isinstance(panels[0], PanelSlice):
        raise TypeError("pass PanelSlice objects, or feature matrices together with targets")
    if len(panels) < min_intervals:
        raise ValueError(f"need at least {min_intervals} intervals, got {len(panels)}")
    m = {p.m for p in panels}
    if len(m) > 1:
        raise ValueError(f"intervals disagree on the feature count: {sorted(m)}")
    for p in panels:
        if p.n == 0:
            raise ValueError(f"interval {p.t} is empty")
        if not np.isfinite(p.X).all() or not np.isfinite(p.r).all():
            raise ValueError(f"interval {p.t} has missing or non-finite values; preprocess first")
    return panels


def check_matrix(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"expected shape (n, {n_features}), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


def member_seeds(random_state, count: int) -> list[int]:
    """Independent integer seeds for ``count`` ensemble members."""
    ss = np.random.SeedSequence(random_state)
    return [int(s) for s in ss.generate_state(count)]
