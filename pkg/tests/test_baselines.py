import numpy as np
import pytest
from sklearn.base import clone

from oestrack.baselines import (
    DtsConfig,
    DTSSGDRegressor,
    ExpandingWindowRegressor,
    WindowSchedule,
    dts_sgd_run,
    frozen_oes_run,
    smoothed_gradient,
    train_expanding_dnn,
)
from oestrack.earlystop import StopConfig
from oestrack.nn import LossConfig, Topology, _forward_eval, init_weights, loss_and_gradient
from oestrack.oes import OESConfig, init_state, oes_advance
from oestrack.panel import PanelSlice


def panels_of(T=12, n=30, m=3, seed=0):
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=m)
    return [PanelSlice(t=t, entity_ids=np.array([f"e{i}" for i in range(n)]), X=(X := rng.normal(size=(n, m))),
                       r=np.tanh(X @ beta) + 0.1 * rng.normal(size=n)) for t in range(T)]


def test_simulation_schedule_rolls_both_windows():
    blocks = list(WindowSchedule((0, 60), (60, 120), 10, expanding=False).blocks(180))
    assert [b[2] for b in blocks] == [(120 + 10 * k, 130 + 10 * k) for k in range(6)]
    assert blocks[1][:2] == ((10, 70), (70, 130))
    expanding = list(WindowSchedule((0, 60), (60, 120), 10).blocks(180))
    assert expanding[5][:2] == ((0, 110), (110, 170))


def test_equities_style_schedule():
    blocks = list(WindowSchedule((0, 216), (216, 360), 12, expanding=False).blocks(720))
    assert len(blocks) == 30 and blocks[-1][2] == (708, 720)


def test_single_refit_schedule():
    blocks = list(WindowSchedule((0, 4), (4, 8), 100, stop=20).blocks(30))
    assert blocks == [((0, 4), (4, 8), (8, 20))]


@pytest.mark.parametrize("train, val", [((3, 3), (3, 5)), ((0, 5), (4, 6))])
def test_schedule_validation(train, val):
    with pytest.raises(ValueError):
        WindowSchedule(train, val, 2)


def test_frozen_weights_between_refits():
    panels = panels_of()
    run = train_expanding_dnn(panels, WindowSchedule((0, 4), (4, 7), 3), StopConfig(max_iter=10, batch_size=32),
                              ensemble_size=2, random_state=0, hidden_sizes=(4,))
    assert run.predictions[:7] == [None] * 7
    for member, weights in zip(run.member_predictions, run.refit_weights):
        assert len(weights) == 2
        for k, (_, _, (lo, hi)) in enumerate(run.blocks):
            for t in range(lo, hi):
                np.testing.assert_array_equal(member[t], _forward_eval(weights[k], panels[t].X))
    np.testing.assert_allclose(run.predictions[9],
                               np.mean([m[9] for m in run.member_predictions], axis=0), atol=1e-15)


def test_dnn_retuning_picks_best_candidate():
    panels = panels_of()
    cands = [(StopConfig(max_iter=10, batch_size=32, learning_rate=lr), LossConfig(0.0)) for lr in (1e-3, 1e-2)]
    run = train_expanding_dnn(panels, WindowSchedule((0, 4), (4, 7), 3), None, seeds=[1],
                              hidden_sizes=(4,), candidates=cands)
    assert all(c in (0, 1) for c in run.chosen[0]) and len(run.chosen[0]) == len(run.blocks)


def test_smoothed_gradient_hand_arithmetic():
    g = smoothed_gradient([np.array([1.0]), np.array([-1.0])], 0.5)
    assert -0.1 * g[0] == pytest.approx(1 / 30, abs=1e-15)


def test_unit_forget_is_plain_mean():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=5) for _ in range(7)]
    np.testing.assert_allclose(smoothed_gradient(grads, 1.0), np.mean(grads, axis=0), atol=1e-12)


def test_window_one_is_plain_sgd():
    panels = panels_of(T=5)
    cfg = DtsConfig(window=1, forget=0.5, learning_rate=0.05)
    run = dts_sgd_run(panels, cfg, LossConfig(1e-3), hidden_sizes=(4,), seed=3)
    theta = init_weights(Topology(3, (4,)), 3)
    for s, p in enumerate(panels):
        np.testing.assert_array_equal(run.predictions[s], _forward_eval(theta, p.X))
        if s < len(panels) - 1:
            _, g = loss_and_gradient(theta, p.X, p.r, LossConfig(1e-3))
            theta.params -= 0.05 * g
    assert run.n_updates == len(panels) - 1 and not run.diverged


def test_history_weighting_matches_oracle():
    panels = panels_of(T=6)
    cfg = DtsConfig(window=3, forget=0.7, learning_rate=0.02)
    run = dts_sgd_run(panels, cfg, hidden_sizes=(4,), batch_norm=False, seed=1)
    theta = init_weights(Topology(3, (4,), batch_norm=False), 1)
    grads = []
    for s, p in enumerate(panels[:-1]):
        grads.append(loss_and_gradient(theta, p.X, p.r)[1])
        recent = grads[-3:][::-1]
        w = 0.7 ** np.arange(len(recent))
        theta.params -= 0.02 * sum(wi * gi for wi, gi in zip(w, recent)) / w.sum()
        np.testing.assert_allclose(run.predictions[s + 1], _forward_eval(theta, panels[s + 1].X),
                                   rtol=1e-12, atol=1e-12)


def test_zero_gradients_leave_weights():
    theta = init_weights(Topology(3, (4,), batch_norm=False), 0)
    rng = np.random.default_rng(1)
    panels = []
    for t in range(4):
        X = rng.normal(size=(10, 3))
        panels.append(PanelSlice(t=t, entity_ids=np.arange(10).astype(str), X=X, r=_forward_eval(theta, X)))
    run = dts_sgd_run(panels, DtsConfig(), hidden_sizes=(4,), batch_norm=False, theta0=theta)
    np.testing.assert_array_equal(run.weights.params, theta.params)


def test_instability_halts_chain():
    panels = panels_of(T=6)
    with np.errstate(all="ignore"):
        run = dts_sgd_run(panels, DtsConfig(window=2, learning_rate=1e300), hidden_sizes=(4,), seed=0)
    assert run.diverged and run.halted_at is not None
    assert all(np.isfinite(p).all() for p in run.predictions)
    with pytest.raises(ValueError):
        DtsConfig(forget=0.0)


def test_frozen_baseline_uses_first_online_weights():
    panels = panels_of(T=6)
    cfg = OESConfig(StopConfig(max_iter=10, batch_size=16), hidden_sizes=(4,))
    preds = frozen_oes_run(panels, cfg, seed=4)
    theta, _ = oes_advance(init_state(3, cfg, 4), panels[0], panels[1], cfg)
    assert preds[:2] == [None, None]
    for t in range(2, 6):
        np.testing.assert_array_equal(preds[t], _forward_eval(theta, panels[t].X))


def test_estimators():
    panels = panels_of()
    dnn = ExpandingWindowRegressor(train=(0, 4), validation=(4, 7), refit_every=3, hidden_sizes=(4,),
                                   max_iter=5, random_state=0)
    assert clone(dnn).get_params() == dnn.get_params()
    preds = dnn.walk_forward(panels)
    assert preds[6] is None and preds[7].shape == (30,)
    assert dnn.predict(panels[0].X).shape == (30,)
    dts = DTSSGDRegressor(hidden_sizes=(4,), random_state=0, ensemble_size=2).fit(panels)
    assert len(dts.predictions_) == len(panels) and dts.predict(panels[0].X).shape == (30,)
