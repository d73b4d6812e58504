"""Synthetic panel whose regression function drifts over time.

Each feature ``j`` has a latent loading following

    psi[t, j] = persistence * psi[t-1, j] + innovation * delta[t, j]

and targets are ``r[t, i] = sum_j tanh(x[t, i, j] * psi[t, j]) + noise``.
All draws are standard normal from numpy's PCG64 bit generator
(``numpy.random.default_rng``) in a fixed order: ``psi[0]`` (m values),
then for each interval ``delta[t]`` (m), ``X[t]`` (n x m, row-major) and
the noise (n).  Scale parameters multiply the draws, so setting one to
zero leaves the stream of the others unchanged.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .panel import PanelSlice


@dataclass(frozen=True)
class SynthConfig:
    T: int = 180
    n: int = 200
    m: int = 100
    persistence: float = 0.95
    innovation: float = 0.05
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.T, self.n, self.m) < 1:
            raise ValueError("T, n and m must all be at least 1")
        if not 0 <= self.persistence <= 1:
            raise ValueError(f"persistence must lie in [0, 1], got {self.persistence}")
        if self.innovation < 0 or self.noise_std < 0:
            raise ValueError("scales must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def generate(cfg: SynthConfig = SynthConfig()):
    """Return ``(panels, psi)``.

    ``panels`` holds intervals ``t = 1..T``; ``psi`` has shape ``(T + 1, m)``
    with row 0 the initial loadings.
    """
    rng = np.random.default_rng(cfg.seed)
    psi = np.empty((cfg.T + 1, cfg.m))
    psi[0] = rng.standard_normal(cfg.m)
    ids = np.array([f"s{i:04d}" for i in range(cfg.n)], dtype=object)
    names = tuple(f"f_{j}" for j in range(cfg.m))
    panels = []
    for t in range(1, cfg.T + 1):
        delta = rng.standard_normal(cfg.m)
        psi[t] = cfg.persistence * psi[t - 1] + cfg.innovation * delta
        X = rng.standard_normal((cfg.n, cfg.m))
        eps = rng.standard_normal(cfg.n)
        r = np.tanh(X * psi[t]).sum(axis=1) + cfg.noise_std * eps
        panels.append(PanelSlice(t=t, entity_ids=ids, X=X, r=r, feature_names=names))
    return panels, psi


def write_psi(psi, path) -> None:
    m = psi.shape[1]
    header = "t," + ",".join(f"psi_{j}" for j in range(m))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for t, row in enumerate(psi):
            fh.write(f"{t}," + ",".join(repr(float(v)) for v in row) + "\n")
