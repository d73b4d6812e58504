"""Small fully connected regression network written directly in numpy.

The network maps an ``(n, m)`` feature matrix to ``n`` scalar predictions
through ReLU hidden layers (optionally batch-normalised before the ReLU)
and a linear output unit.  All trainable parameters live in one flat
float64 buffer; per-layer arrays are views into it, so optimisers and
gradient bookkeeping can work on a single vector.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

_sum0 = np.add.reduce

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"OESW"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Raised when array shapes disagree with the network topology."""


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class UninitializedStatisticsError(RuntimeError):
    """Raised when eval mode is requested without running statistics."""


@dataclass(frozen=True)
class Topology:
    input_dim: int
    hidden_sizes: tuple[int, ...] = (32, 16, 8)
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_sizes:
            raise ValueError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = (self.input_dim,) + self.hidden_sizes + (1,)
        return list(zip(sizes[:-1], sizes[1:]))

    def layout(self) -> list[tuple[str, int, tuple[int, ...]]]:
        """(name, layer index, shape) for every trainable array, in buffer order."""
        entries = []
        n_hidden = len(self.hidden_sizes)
        for ell, (fan_in, fan_out) in enumerate(self.layer_dims):
            entries.append(("W", ell, (fan_in, fan_out)))
            entries.append(("b", ell, (fan_out,)))
            if self.batch_norm and ell < n_hidden:
                entries.append(("gamma", ell, (fan_out,)))
                entries.append(("beta", ell, (fan_out,)))
        return entries

    @cached_property
    def _spans(self) -> tuple:
        spans, offset = [], 0
        for name, ell, shape in self.layout():
            size = math.prod(shape)
            spans.append((name, ell, shape, offset, offset + size))
            offset += size
        return tuple(spans)

    @property
    def n_params(self) -> int:
        return self._spans[-1][4]

    def views(self, flat: np.ndarray) -> dict[str, list[np.ndarray]]:
        out = {"W": [], "b": [], "gamma": [], "beta": []}
        for name, _, shape, start, stop in self._spans:
            out[name].append(flat[start:stop].reshape(shape))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "batch_norm": self.batch_norm,
        }


@dataclass
class WeightSet:
    """Every parameter of one network.

    ``params`` is the flat trainable buffer.  ``W``, ``b``, ``gamma`` and
    ``beta`` are lists of views into it (the batch-norm lists are empty when
    batch norm is off).  Running statistics are kept outside the buffer
    because they are never touched by an optimiser.
    """

    topology: Topology
    params: np.ndarray
    running_mean: list[np.ndarray] | None = None
    running_var: list[np.ndarray] | None = None
    W: list[np.ndarray] = field(init=False, repr=False)
    b: list[np.ndarray] = field(init=False, repr=False)
    gamma: list[np.ndarray] = field(init=False, repr=False)
    beta: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.topology.n_params,):
            raise DimensionError(
                f"parameter buffer has shape {self.params.shape}, "
                f"topology needs ({self.topology.n_params},)"
            )
        v = self.topology.views(self.params)
        self.W, self.b, self.gamma, self.beta = v["W"], v["b"], v["gamma"], v["beta"]
        if self.topology.batch_norm and self.running_mean is not None:
            if len(self.running_mean) != len(self.topology.hidden_sizes):
                raise DimensionError("one running mean per hidden layer is required")
            if any(np.any(v < 0) for v in self.running_var):
                raise ValueError("running variance must be non-negative")

    @property
    def stats_ready(self) -> bool:
        return not self.topology.batch_norm or (
            self.running_mean is not None and self.running_var is not None
        )

    def copy(self) -> "WeightSet":
        return WeightSet(
            self.topology,
            self.params.copy(),
            None if self.running_mean is None else [a.copy() for a in self.running_mean],
            None if self.running_var is None else [a.copy() for a in self.running_var],
        )

    def weight_mask(self) -> np.ndarray:
        """Boolean mask over ``params`` selecting weight-matrix entries only."""
        mask = np.zeros(self.topology.n_params, dtype=bool)
        for name, _, _, start, stop in self.topology._spans:
            if name == "W":
                mask[start:stop] = True
        return mask

    def l1_norm(self) -> float:
        return float(sum(np.abs(w).sum() for w in self.W))

    def equals(self, other: "WeightSet") -> bool:
        """Bit-for-bit equality of parameters and running statistics."""
        if self.topology != other.topology or not np.array_equal(self.params, other.params):
            return False
        if self.topology.batch_norm:
            if (self.running_mean is None) != (other.running_mean is None):
                return False
            if self.running_mean is not None:
                return all(
                    np.array_equal(a, b)
                    for a, b in zip(self.running_mean + self.running_var,
                                    other.running_mean + other.running_var)
                )
        return True


@dataclass(frozen=True)
class LossConfig:
    l1_penalty: float = 0.0

    def __post_init__(self):
        if not self.l1_penalty >= 0:
            raise ValueError(f"l1_penalty must be non-negative, got {self.l1_penalty}")


def init_weights(topology: Topology, rng=None) -> WeightSet:
    """Glorot-uniform weights, zero biases, unit scale, zero shift.

    Running statistics start at mean 0 / variance 1 so a fresh network can be
    evaluated before it has seen any data.
    """
    rng = np.random.default_rng(rng)
    ws = WeightSet(topology, np.zeros(topology.n_params))
    for W in ws.W:
        fan_in, fan_out = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    for g in ws.gamma:
        g[...] = 1.0
    if topology.batch_norm:
        ws.running_mean = [np.zeros(h) for h in topology.hidden_sizes]
        ws.running_var = [np.ones(h) for h in topology.hidden_sizes]
    return ws


def check_features(weights: WeightSet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != weights.topology.input_dim:
        raise DimensionError(
            f"expected a 2-d array with {weights.topology.input_dim} columns, got shape {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains non-finite values")
    return X


def _forward_eval(ws: WeightSet, X: np.ndarray) -> np.ndarray:
    a = X
    n_hidden = len(ws.topology.hidden_sizes)
    for ell in range(n_hidden):
        z = a @ ws.W[ell] + ws.b[ell]
        if ws.topology.batch_norm:
            z = (z - ws.running_mean[ell]) / np.sqrt(ws.running_var[ell] + BN_EPS)
            z = z * ws.gamma[ell] + ws.beta[ell]
        a = np.maximum(z, 0.0)
    return (a @ ws.W[-1] + ws.b[-1])[:, 0]


def _forward_train(ws: WeightSet, X: np.ndarray, update_stats: bool):
    """Batch-statistics forward pass; returns predictions and the backprop cache."""
    cache = []
    a = X
    n = X.shape[0]
    bn = ws.topology.batch_norm
    for ell in range(len(ws.topology.hidden_sizes)):
        z = a @ ws.W[ell]
        z += ws.b[ell]
        if bn:
            mu = _sum0(z) / n
            z -= mu
            var = _sum0(z * z) / n
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            z *= inv_std
            y = z * ws.gamma[ell]
            y += ws.beta[ell]
            if update_stats:
                rm, rv = ws.running_mean[ell], ws.running_var[ell]
                rm *= BN_MOMENTUM
                rm += (1.0 - BN_MOMENTUM) * mu
                rv *= BN_MOMENTUM
                rv += (1.0 - BN_MOMENTUM) * var
            cache.append((a, y, z, inv_std))
        else:
            y = z
            cache.append((a, y, None, None))
        a = np.maximum(y, 0.0)
    out = (a @ ws.W[-1])[:, 0] + ws.b[-1][0]
    return out, cache, a


def forward(weights: WeightSet, X, mode: str = "eval") -> np.ndarray:
    """Predict one scalar per row of ``X``.

    ``mode="train"`` normalises with batch statistics and folds them into the
    running averages; ``mode="eval"`` uses the running averages and leaves the
    weight set untouched.
    """
    X = check_features(weights, X)
    if mode == "eval":
        if not weights.stats_ready:
            raise UninitializedStatisticsError("running statistics are not populated")
        out = _forward_eval(weights, X)
    elif mode == "train":
        if weights.topology.batch_norm and weights.running_mean is None:
            weights.running_mean = [np.zeros(h) for h in weights.topology.hidden_sizes]
            weights.running_var = [np.ones(h) for h in weights.topology.hidden_sizes]
        out, _, _ = _forward_train(weights, X, update_stats=True)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not np.isfinite(out).all():
        raise DivergenceError("network output is not finite")
    return out


def _loss_and_gradient(ws: WeightSet, X, r, l1_penalty: float, update_stats: bool = True):
    n = X.shape[0]
    pred, cache, a_last = _forward_train(ws, X, update_stats)
    resid = pred - r
    loss = float(resid @ resid) / n
    if l1_penalty:
        loss += l1_penalty * ws.l1_norm()

    flat = np.empty_like(ws.params)
    g = ws.topology.views(flat)
    gW, gb, ggamma, gbeta = g["W"], g["b"], g["gamma"], g["beta"]
    d = (2.0 / n) * resid[:, None]
    np.matmul(a_last.T, d, out=gW[-1])
    gb[-1][0] = d.sum()
    da = d @ ws.W[-1].T
    for ell in range(len(cache) - 1, -1, -1):
        a_prev, y, xhat, inv_std = cache[ell]
        dy = da * (y > 0)
        if xhat is not None:
            gbeta[ell][...] = _sum0(dy)
            dxhat = dy * ws.gamma[ell]
            ggamma[ell][...] = _sum0(dy * xhat)
            # batch-norm backward: inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            proj = _sum0(dxhat * xhat) / n
            dxhat -= _sum0(dxhat) / n
            dxhat -= xhat * proj
            dxhat *= inv_std
            dz = dxhat
        else:
            dz = dy
        np.matmul(a_prev.T, dz, out=gW[ell])
        gb[ell][...] = _sum0(dz)
        if ell:
            da = dz @ ws.W[ell].T
    if l1_penalty:
        for gw, W in zip(gW, ws.W):
            gw += l1_penalty * np.sign(W)
    return loss, flat


def loss_and_gradient(weights: WeightSet, X, r, cfg: LossConfig = LossConfig(),
                      update_stats: bool = True):
    """Training loss and its full gradient in the flat parameter layout.

    The loss is mean squared error plus ``cfg.l1_penalty`` times the absolute
    sum of the weight matrices (biases and batch-norm parameters are not
    penalised; the subgradient of ``|w|`` at zero is zero).  The forward pass
    runs in train mode; pass ``update_stats=False`` to leave the running
    statistics alone.

    Returns
    -------
    loss : float
    gradient : ndarray of shape ``(topology.n_params,)``
    """
    X = check_features(weights, X)
    r = np.asarray(r, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if r.shape[0] != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} feature rows but {r.shape[0]} targets")
    if weights.topology.batch_norm and weights.running_mean is None:
        weights.running_mean = [np.zeros(h) for h in weights.topology.hidden_sizes]
        weights.running_var = [np.ones(h) for h in weights.topology.hidden_sizes]
    loss, grad = _loss_and_gradient(weights, X, r, cfg.l1_penalty, update_stats)
    if not np.isfinite(loss):
        raise DivergenceError(f"training loss is not finite ({loss})")
    return loss, grad


def mse(weights: WeightSet, X, r) -> float:
    """Eval-mode mean squared error, no penalty."""
    resid = _forward_eval(weights, X) - r
    return float(resid @ resid) / len(r)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    k: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kwargs)


def adam_step(weights: WeightSet, state: AdamState, gradient, lr: float):
    """One bias-corrected ADAM update, applied in place.

    Both arguments are mutated and returned for convenience.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != weights.params.shape or g.shape != state.m.shape:
        raise DimensionError("gradient, weights and optimiser state must share a shape")
    if not lr > 0:
        raise ValueError(f"step size must be positive, got {lr}")
    if not np.isfinite(g).all():
        raise DivergenceError("gradient is not finite")
    state.k += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.k)
    v_hat = state.v / (1.0 - state.beta2 ** state.k)
    weights.params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return weights, state


def save_weights(path, weights: WeightSet) -> None:
    """Write a checkpoint: magic, JSON header, then little-endian float64 arrays.

    Arrays follow buffer order (per layer W, b, gamma, beta; W and b of the
    output layer) in row-major order, then running means and variances.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "topology": weights.topology.to_dict(),
        "has_running_stats": weights.topology.batch_norm and weights.running_mean is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [weights.params]
    if header["has_running_stats"]:
        parts += weights.running_mean + weights.running_var
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in parts:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> WeightSet:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a weight checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    topo = Topology(**header["topology"])
    data = np.frombuffer(raw[8 + hlen:], dtype="<f8").astype(np.float64)
    expected = topo.n_params + (2 * sum(topo.hidden_sizes) if header["has_running_stats"] else 0)
    if data.size != expected:
        raise ValueError(f"checkpoint holds {data.size} values, expected {expected}")
    ws = WeightSet(topo, data[:topo.n_params].copy())
    if header["has_running_stats"]:
        offset = topo.n_params
        stats = []
        for _ in range(2):
            for h in topo.hidden_sizes:
                stats.append(data[offset:offset + h].copy())
                offset += h
        k = len(topo.hidden_sizes)
        ws.running_mean, ws.running_var = stats[:k], stats[k:]
    return ws
