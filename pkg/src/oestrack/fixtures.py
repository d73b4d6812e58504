"""Small bundled panel shaped like monthly equity data, for end-to-end runs."""
from __future__ import annotations

from importlib import resources

import numpy as np
import pandas as pd

from .panel import PanelSlice, write_panel

FIXTURE_NAME = "equities_fixture.csv"
EXCHANGES = np.array(["NYSE", "NASDAQ", "AMEX"])


def fixture_path():
    """Path of the bundled 24-interval fixture CSV."""
    return resources.files("oestrack") / "data" / FIXTURE_NAME


def equities_fixture(T: int = 24, n: int = 150, m: int = 8, seed: int = 7,
                     missing_rate: float = 0.02) -> list[PanelSlice]:
    """Month-end panel with churn, missing cells, exchange labels and market caps.

    Entities enter and leave (about 3% turnover a month), returns are
    Student-t around a slowly drifting tanh signal, and caps follow a
    lognormal random walk.
    """
    rng = np.random.default_rng(seed)
    dates = pd.date_range("2001-01-31", periods=T, freq="ME").strftime("%Y-%m-%d")
    pool = n + T * 6
    exchange = EXCHANGES[rng.choice(3, size=pool, p=[0.5, 0.4, 0.1])]
    log_cap = rng.normal(6.0, 1.5, size=pool)
    alive = np.zeros(pool, dtype=bool)
    alive[:n] = True
    next_id = n
    psi = rng.standard_normal(m)
    names = tuple(f"f_{j}" for j in range(m))
    out = []
    for t in range(T):
        leave = alive & (rng.random(pool) < 0.03)
        alive &= ~leave
        n_new = int(leave.sum())
        alive[next_id:next_id + n_new] = True
        next_id += n_new
        idx = np.flatnonzero(alive)
        psi = 0.95 * psi + 0.05 * rng.standard_normal(m)
        X = rng.standard_normal((idx.size, m))
        r = 0.02 * np.tanh(X * psi).sum(axis=1) + 0.08 * rng.standard_t(4, size=idx.size)
        log_cap[idx] += r
        X[rng.random(X.shape) < missing_rate] = np.nan
        out.append(PanelSlice(
            t=dates[t],
            entity_ids=np.array([f"E{i:05d}" for i in idx], dtype=object),
            X=X, r=r, feature_names=names,
            groups={"exchange": exchange[idx]},
            mcap=np.exp(log_cap[idx]),
        ))
    return out


def write_fixture(path, **kw) -> None:
    write_panel(equities_fixture(**kw), path)
