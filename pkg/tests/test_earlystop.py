import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oestrack.earlystop import (
    PatienceTracker,
    StopConfig,
    early_stopping,
    walk_trace,
    write_trace_csv,
)
from oestrack.nn import LossConfig, Topology, WeightSet, forward, init_weights, mse


def oracle_walk(trace, tol, patience, max_iter):
    """Literal loop: best/iteration/patience counter over a scripted trace."""
    best, best_k, q = trace[0], 0, 0
    k = 0
    while k < max_iter and k + 1 < len(trace):
        k += 1
        j = trace[k]
        if best - j >= tol:
            q = 0
        else:
            q += 1
        if j < best:
            best, best_k = j, k
        if q >= patience:
            break
    return best_k, k


def test_plateau_trace():
    d = 1e-4
    trace = [5, 4, 3] + [3 + d] * 10
    assert walk_trace(trace, tol=1e-3, patience=5) == (2, 7)


def test_worsening_trace_keeps_start():
    trace = [1.0] + [1.0 + 0.1 * k for k in range(1, 20)]
    assert walk_trace(trace, tol=1e-3, patience=5) == (0, 5)


def test_monotone_trace_runs_to_limit():
    trace = [10.0 - k for k in range(8)]
    assert walk_trace(trace, tol=0.5, patience=2, max_iter=7) == (7, 7)


def test_small_improvements_count_against_patience():
    # each step sets a new best but by less than tol
    trace = [1.0, 0.9999, 0.9998, 0.9997, 0.5]
    assert walk_trace(trace, tol=1e-3, patience=3) == (3, 3)


@settings(max_examples=200, deadline=None)
@given(trace=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40),
       tol=st.sampled_from([1e-3, 0.1, 1.0]), patience=st.integers(1, 6),
       max_iter=st.integers(1, 50))
def test_walk_matches_oracle(trace, tol, patience, max_iter):
    assert walk_trace(trace, tol, patience, max_iter) == oracle_walk(trace, tol, patience, max_iter)


def test_tracker_flags():
    t = PatienceTracker(tol=0.5, patience=2)
    t.start(3.0)
    assert t.update(2.0) == (True, False)
    assert t.update(1.9) == (True, False)
    assert t.update(2.5) == (False, True)
    assert t.best_iter == 2


def test_stop_config_validation():
    for kw in ({"max_iter": 0}, {"tol": 0}, {"patience": 0}, {"learning_rate": -1}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            StopConfig(**kw)


def _data(seed=0, n=60, m=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    r = np.sin(X[:, 0]) + 0.5 * X[:, 1] + 0.1 * rng.normal(size=n)
    return X, r


def test_best_weights_reproduce_best_loss_and_input_untouched():
    X, r = _data()
    Xv, rv = _data(1)
    theta0 = init_weights(Topology(3, (8, 4)), 0)
    before = theta0.copy()
    res = early_stopping(theta0, X, r, Xv, rv, StopConfig(max_iter=40, batch_size=16), LossConfig(1e-4), 3)
    assert theta0.equals(before)
    assert res.best_val_loss == min(res.val_trace)
    assert mse(res.best_weights, Xv, rv) == res.best_val_loss
    assert res.best_iter == int(np.argmin(res.val_trace))
    assert res.n_iter <= 40 and len(res.train_trace) == res.n_iter
    assert walk_trace(res.val_trace, 1e-3, 5, 40) == (res.best_iter, res.n_iter)


def test_already_optimal_start_returns_start():
    X, r = _data()
    theta0 = init_weights(Topology(3, (4,), batch_norm=False), 0)
    r_self = forward(theta0, X)
    res = early_stopping(theta0, X, r, X, r_self, StopConfig(max_iter=50, learning_rate=0.05, batch_size=60))
    assert res.best_iter == 0
    assert res.best_weights.equals(theta0)
    assert res.n_iter == 5


def test_seed_fixes_result():
    X, r = _data()
    theta0 = init_weights(Topology(3, (6,)), 1)
    cfg = StopConfig(max_iter=15, batch_size=7)
    a = early_stopping(theta0, X, r, X, r, cfg, rng=5)
    b = early_stopping(theta0, X, r, X, r, cfg, rng=5)
    assert a.val_trace == b.val_trace and a.best_weights.equals(b.best_weights)


def test_divergence_returns_best_so_far():
    X, r = _data()
    theta0 = init_weights(Topology(3, (4,), batch_norm=False), 0)
    with np.errstate(all="ignore"):
        res = early_stopping(theta0, X * 1e150, r, X, r,
                             StopConfig(max_iter=10, learning_rate=1e150, batch_size=60))
    assert res.diverged
    assert np.isfinite(res.best_val_loss)


def test_rejects_mismatched_rows():
    theta0 = init_weights(Topology(3, (4,)), 0)
    with pytest.raises(ValueError):
        early_stopping(theta0, np.ones((4, 3)), np.ones(3), np.ones((2, 3)), np.ones(2), StopConfig())


def _simulate_scalar_descent(x, r, params, lr, steps):
    """Full-batch ADAM on pred = w2 * relu(w1 * x + b1) + b2, written out by hand."""
    w1, b1, w2, b2 = params
    m = [0.0] * 4
    v = [0.0] * 4
    losses = []

    def loss_of(w1, b1, w2, b2):
        return sum((w2 * max(w1 * xi + b1, 0.0) + b2 - ri) ** 2 for xi, ri in zip(x, r)) / len(x)

    losses.append(loss_of(w1, b1, w2, b2))
    for k in range(1, steps + 1):
        g = [0.0] * 4
        for xi, ri in zip(x, r):
            z = w1 * xi + b1
            act = max(z, 0.0)
            e = 2.0 * (w2 * act + b2 - ri) / len(x)
            on = 1.0 if z > 0 else 0.0
            g[0] += e * w2 * on * xi
            g[1] += e * w2 * on
            g[2] += e * act
            g[3] += e
        p = [w1, b1, w2, b2]
        for i in range(4):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            p[i] -= lr * (m[i] / (1 - 0.9 ** k)) / (math.sqrt(v[i] / (1 - 0.999 ** k)) + 1e-8)
        w1, b1, w2, b2 = p
        losses.append(loss_of(w1, b1, w2, b2))
    return losses


def test_quadratic_surrogate_matches_brute_force_descent():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.5, 1.5, size=12)
    r = 3.0 * x
    topo = Topology(1, (1,), batch_norm=False)
    theta0 = WeightSet(topo, np.array([1.0, 0.0, 1.0, 0.0]))
    cfg = StopConfig(max_iter=200, tol=1e-9, patience=8, learning_rate=0.3, batch_size=100)
    res = early_stopping(theta0, x[:, None], r, x[:, None], r, cfg, rng=0)
    sim = _simulate_scalar_descent(x, r, (1.0, 0.0, 1.0, 0.0), 0.3, res.n_iter)
    np.testing.assert_allclose(res.val_trace, sim, rtol=1e-9, atol=1e-12)
    executed_best, executed = oracle_walk(sim, cfg.tol, cfg.patience, cfg.max_iter)
    assert (res.best_iter, res.n_iter) == (executed_best, executed)
    assert res.best_iter == int(np.argmin(sim))
    assert 0 < res.best_iter < res.n_iter


def test_trace_csv(tmp_path):
    X, r = _data()
    res = early_stopping(init_weights(Topology(3, (4,)), 0), X, r, X, r,
                         StopConfig(max_iter=3, batch_size=60))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, res)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,train_loss,val_loss,is_best"
    assert len(lines) == res.n_iter + 2
    assert lines[1].startswith("0,,")
    assert sum(int(l.rsplit(",", 1)[1]) for l in lines[1:]) == 1
