import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oestrack.nn import (
    AdamState,
    DimensionError,
    DivergenceError,
    LossConfig,
    Topology,
    UninitializedStatisticsError,
    WeightSet,
    adam_step,
    forward,
    init_weights,
    load_weights,
    loss_and_gradient,
    save_weights,
)


def scalar_forward(ws, x):
    """Per-neuron loop evaluation of one row, eval mode."""
    a = list(x)
    topo = ws.topology
    for ell, h in enumerate(topo.hidden_sizes):
        out = []
        for k in range(h):
            z = ws.b[ell][k] + sum(a[i] * ws.W[ell][i, k] for i in range(len(a)))
            if topo.batch_norm:
                z = (z - ws.running_mean[ell][k]) / math.sqrt(ws.running_var[ell][k] + 1e-5)
                z = z * ws.gamma[ell][k] + ws.beta[ell][k]
            out.append(max(z, 0.0))
        a = out
    return ws.b[-1][0] + sum(a[i] * ws.W[-1][i, 0] for i in range(len(a)))


def numeric_gradient(ws, X, r, l1, h=1e-5):
    def loss(p):
        trial = WeightSet(ws.topology, p, *(
            (None, None) if ws.running_mean is None else
            ([a.copy() for a in ws.running_mean], [a.copy() for a in ws.running_var])))
        return loss_and_gradient(trial, X, r, LossConfig(l1), update_stats=False)[0]

    g = np.empty_like(ws.params)
    for i in range(ws.params.size):
        up, dn = ws.params.copy(), ws.params.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss(up) - loss(dn)) / (2 * h)
    return g


def randomize_biases(ws, rng):
    # zero biases put dead-input units exactly on the ReLU kink
    for b in ws.b:
        b[:] = rng.normal(size=b.shape)


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)


def test_layout_is_contiguous_and_ordered():
    topo = Topology(3, (4, 2))
    names = [name for name, _, _ in topo.layout()]
    assert names == ["W", "b", "gamma", "beta", "W", "b", "gamma", "beta", "W", "b"]
    assert topo.n_params == 3 * 4 + 4 * 3 + 4 * 2 + 2 * 3 + 2 + 1
    ws = init_weights(topo, 0)
    ws.W[1][0, 0] = 42.0
    assert 42.0 in ws.params


def test_init_is_glorot_uniform_with_unit_scale():
    topo = Topology(50, (30,))
    ws = init_weights(topo, 1)
    limit = math.sqrt(6 / 80)
    assert np.abs(ws.W[0]).max() <= limit
    assert np.abs(ws.W[0]).max() > 0.9 * limit
    assert np.all(ws.b[0] == 0) and np.all(ws.gamma[0] == 1) and np.all(ws.beta[0] == 0)
    np.testing.assert_array_equal(ws.running_var[0], 1.0)


def test_zero_network_predicts_zero():
    ws = WeightSet(Topology(4, (3,), batch_norm=False), np.zeros(Topology(4, (3,), False).n_params))
    X = np.random.default_rng(0).normal(size=(6, 4))
    np.testing.assert_array_equal(forward(ws, X), np.zeros(6))


def test_relu_kills_negative_preactivation():
    topo = Topology(3, (1,), batch_norm=False)
    ws = WeightSet(topo, np.zeros(topo.n_params))
    ws.W[0][0, 0] = 1.0
    ws.W[1][0, 0] = 1.0
    assert forward(ws, [[-2.0, 5.0, 5.0]])[0] == 0.0
    assert forward(ws, [[2.0, 5.0, 5.0]])[0] == 2.0


@pytest.mark.parametrize("bn", [False, True])
def test_forward_matches_scalar_loop(bn):
    ws = init_weights(Topology(3, (2,), batch_norm=bn), 5)
    rng = np.random.default_rng(6)
    ws.params[:] = rng.normal(size=ws.params.size)
    if bn:
        ws.running_mean = [rng.normal(size=2)]
        ws.running_var = [rng.uniform(0.5, 2, size=2)]
    X = rng.normal(size=(7, 3))
    expected = [scalar_forward(ws, x) for x in X]
    np.testing.assert_allclose(forward(ws, X), expected, rtol=0, atol=1e-12)


def test_eval_is_pure_and_train_updates_stats():
    ws = init_weights(Topology(4, (5, 3)), 2)
    X = np.random.default_rng(3).normal(size=(20, 4))
    before = ws.copy()
    a, b = forward(ws, X), forward(ws, X)
    np.testing.assert_array_equal(a, b)
    assert ws.equals(before)
    forward(ws, X, mode="train")
    assert not ws.equals(before)
    np.testing.assert_array_equal(ws.params, before.params)


def test_train_mode_batch_statistics():
    # normalised pre-activations have mean beta and variance gamma^2 (up to eps)
    ws = init_weights(Topology(4, (6,)), 2)
    rng = np.random.default_rng(4)
    ws.gamma[0][:] = rng.uniform(0.5, 2, 6)
    ws.beta[0][:] = rng.normal(size=6)
    X = rng.normal(size=(64, 4))
    z = X @ ws.W[0] + ws.b[0]
    var = z.var(axis=0)
    y = (z - z.mean(axis=0)) / np.sqrt(var + 1e-5) * ws.gamma[0] + ws.beta[0]
    np.testing.assert_allclose(y.mean(axis=0), ws.beta[0], atol=1e-6)
    np.testing.assert_allclose(y.var(axis=0), ws.gamma[0] ** 2 * var / (var + 1e-5), atol=1e-6)
    out = forward(ws, X, mode="train")
    np.testing.assert_allclose(out, np.maximum(y, 0) @ ws.W[1][:, 0] + ws.b[1][0], atol=1e-12)
    np.testing.assert_allclose(ws.running_mean[0], 0.1 * z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(ws.running_var[0], 0.9 + 0.1 * var, atol=1e-12)


def test_forward_errors():
    ws = init_weights(Topology(3, (2,)), 0)
    with pytest.raises(DimensionError):
        forward(ws, np.ones((2, 4)))
    with pytest.raises(ValueError):
        forward(ws, [[np.nan, 0, 0]])
    ws.running_mean = ws.running_var = None
    with pytest.raises(UninitializedStatisticsError):
        forward(ws, np.ones((2, 3)))
    with pytest.raises(ValueError):
        forward(init_weights(Topology(3, (2,)), 0), np.ones((2, 3)), mode="test")


def test_single_linear_unit_gradient():
    # identity pass-through hidden unit: prediction = w * x
    topo = Topology(1, (1,), batch_norm=False)
    ws = WeightSet(topo, np.zeros(topo.n_params))
    ws.W[0][0, 0] = 1.0
    ws.W[1][0, 0] = 1.0
    loss, g = loss_and_gradient(ws, [[2.0]], [0.0])
    assert loss == 4.0
    assert topo.views(g)["W"][0][0, 0] == 8.0


def test_perfect_fit_has_zero_gradient():
    ws = init_weights(Topology(3, (4,), batch_norm=False), 0)
    X = np.random.default_rng(0).normal(size=(5, 3))
    r = forward(ws, X)
    loss, g = loss_and_gradient(ws, X, r)
    assert loss == pytest.approx(0.0, abs=1e-28)
    np.testing.assert_allclose(g, 0.0, atol=1e-14)


def test_l1_term_is_additive_on_weights_only():
    ws = init_weights(Topology(3, (4, 2)), 8)
    ws.b[0][:] = 5.0
    ws.W[0][0, 0] = 0.0
    X = np.random.default_rng(1).normal(size=(9, 3))
    r = np.random.default_rng(2).normal(size=9)
    l0, g0 = loss_and_gradient(ws, X, r, LossConfig(0.0), update_stats=False)
    l1, g1 = loss_and_gradient(ws, X, r, LossConfig(0.3), update_stats=False)
    assert l1 == l0 + 0.3 * sum(np.abs(w).sum() for w in ws.W)
    diff = ws.topology.views(g1 - g0)
    np.testing.assert_allclose(diff["W"][0], 0.3 * np.sign(ws.W[0]), atol=1e-15)
    assert diff["W"][0][0, 0] == 0.0
    for name in ("b", "gamma", "beta"):
        for d in diff[name]:
            np.testing.assert_array_equal(d, 0.0)


@pytest.mark.parametrize("bn", [False, True])
def test_gradient_matches_finite_differences(bn):
    rng = np.random.default_rng(11)
    ws = init_weights(Topology(4, (5, 3), batch_norm=bn), rng)
    randomize_biases(ws, rng)
    X, r = rng.normal(size=(8, 4)), rng.normal(size=8)
    _, g = loss_and_gradient(ws, X, r, LossConfig(1e-3), update_stats=False)
    num = numeric_gradient(ws, X, r, 1e-3)
    assert rel_err(g, num).max() < (1e-6 if not bn else 1e-4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 5), h1=st.integers(1, 4),
       h2=st.integers(1, 3), n=st.integers(1, 8))
def test_gradient_property(seed, m, h1, h2, n):
    rng = np.random.default_rng(seed)
    ws = init_weights(Topology(m, (h1, h2), batch_norm=False), rng)
    randomize_biases(ws, rng)
    X, r = rng.normal(size=(n, m)), rng.normal(size=n)
    _, g = loss_and_gradient(ws, X, r, update_stats=False)
    assert rel_err(g, numeric_gradient(ws, X, r, 0.0)).max() < 1e-4


def test_loss_errors():
    ws = init_weights(Topology(2, (2,)), 0)
    with pytest.raises(ValueError):
        loss_and_gradient(ws, np.empty((0, 2)), [])
    with pytest.raises(DimensionError):
        loss_and_gradient(ws, np.ones((3, 2)), np.ones(2))
    ws.W[-1][:] = 1e200
    ws.W[0][:] = 1e200
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        loss_and_gradient(ws, np.ones((3, 2)) * 1e200, np.ones(3))


def test_adam_first_step_is_learning_rate():
    topo = Topology(1, (1,), batch_norm=False)
    ws = WeightSet(topo, np.zeros(topo.n_params))
    state = AdamState.fresh(topo.n_params)
    g = np.zeros(topo.n_params)
    g[0] = 0.3
    adam_step(ws, state, g, 0.01)
    assert ws.params[0] == pytest.approx(-0.01 * 0.3 / (0.3 + 1e-8), rel=1e-12)
    np.testing.assert_array_equal(ws.params[1:], 0.0)


def test_adam_zero_gradient_leaves_weights():
    ws = init_weights(Topology(3, (2,)), 0)
    before = ws.params.copy()
    adam_step(ws, AdamState.fresh(ws.params.size), np.zeros_like(before), 0.1)
    np.testing.assert_array_equal(ws.params, before)


def test_adam_matches_reference_recursion():
    ws = init_weights(Topology(2, (2,), batch_norm=False), 0)
    state = AdamState.fresh(ws.params.size)
    rng = np.random.default_rng(9)
    p = ws.params.copy()
    m = v = np.zeros_like(p)
    for k in range(1, 30):
        g = rng.normal(size=p.size)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.05 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        adam_step(ws, state, g, 0.05)
    np.testing.assert_allclose(ws.params, p, rtol=1e-13, atol=1e-15)


def test_adam_constant_gradient_step_converges_to_lr():
    ws = init_weights(Topology(1, (1,), batch_norm=False), 0)
    state = AdamState.fresh(ws.params.size)
    g = np.full(ws.params.size, -0.7)
    for _ in range(999):
        adam_step(ws, state, g, 0.002)
    before = ws.params.copy()
    adam_step(ws, state, g, 0.002)
    np.testing.assert_allclose(ws.params - before, 0.002, rtol=0.01)


def test_adam_rejects_bad_input():
    ws = init_weights(Topology(1, (1,)), 0)
    state = AdamState.fresh(ws.params.size)
    with pytest.raises(DivergenceError):
        adam_step(ws, state, np.full(ws.params.size, np.inf), 0.1)
    with pytest.raises(DimensionError):
        adam_step(ws, state, np.zeros(2), 0.1)


@pytest.mark.parametrize("bn", [False, True])
def test_checkpoint_round_trip(tmp_path, bn):
    ws = init_weights(Topology(3, (4, 2), batch_norm=bn), 3)
    if bn:
        forward(ws, np.random.default_rng(0).normal(size=(10, 3)), mode="train")
    path = tmp_path / "w.bin"
    save_weights(path, ws)
    assert load_weights(path).equals(ws)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_weights(path)
