import math

import numpy as np
import pytest

from tmdnet.autodiff import Tensor
from tmdnet.dataset import Segment, class_weights, make_batches
from tmdnet.errors import NumericError, ValidationError
from tmdnet.layers import Conv, Dense, ModelSpec, PoolingHead, build_model
from tmdnet.trainer import (SHL_TRAIN, EarlyStopState, OptimizerState, TrainConfig, evaluate, fit,
                            optimizer_step, select_hyperparameters, train_epoch)

# scalar simulations run before the build
ADAM_X2_200 = -7.21798647770884e-06
ADADELTA_RATIO_500 = 1.000016108787895

TINY = ModelSpec((Conv(2, 4, 3), PoolingHead("gem"), Dense(4, 2)), 2, 2, name="tiny")


def toy_sets(n=16, seed=0, flip_val=False):
    """Two classes told apart by mean speed (1 vs 4)."""
    rng = np.random.default_rng(seed)

    def make(count, flip):
        out = []
        for i in range(count):
            c = i % 2
            length = int(rng.integers(20, 40))
            speed = (4.0 if c else 1.0) + 0.2 * rng.normal(size=length)
            out.append(Segment(np.stack([speed, np.gradient(speed)]), length, (1 - c) if flip else c, i))
        return out

    return make(n, False), make(n // 2, flip_val)


def cfg(**kw):
    base = dict(learning_rate=1e-2, weight_decay=0.0, batch_size=8, optimizer="adam", max_epochs=5,
                patience=None, dtype="float64")
    return TrainConfig(**{**base, **kw})


def scalar(v):
    return {"x": Tensor(np.array(v, dtype=np.float64))}


@pytest.mark.parametrize("kind", ["adam", "adadelta"])
def test_zero_gradient_fixed_point(kind):
    p = scalar([1.5, -2.0])
    st = OptimizerState(kind)
    for _ in range(3):
        optimizer_step(kind, p, {"x": np.zeros(2)}, st, cfg(optimizer=kind))
    np.testing.assert_array_equal(p["x"].data, [1.5, -2.0])


def test_adam_quadratic_oracle():
    p, st = scalar(1.0), OptimizerState("adam")
    c = cfg(learning_rate=0.1)
    for _ in range(200):
        optimizer_step("adam", p, {"x": 2 * p["x"].data}, st, c)
    x = float(p["x"].data)
    assert abs(x) < 1e-2
    assert x == pytest.approx(ADAM_X2_200, rel=1e-9)


def test_adadelta_scale_invariance():
    steps = []
    for g in (1.0, 10.0):
        p, st = scalar(0.0), OptimizerState("adadelta")
        c = cfg(optimizer="adadelta", learning_rate=1.0)
        for _ in range(500):
            before = float(p["x"].data)
            optimizer_step("adadelta", p, {"x": np.array(g)}, st, c)
        steps.append(before - float(p["x"].data))
    ratio = steps[1] / steps[0]
    assert abs(ratio - 1) < 0.05
    assert ratio == pytest.approx(ADADELTA_RATIO_500, rel=1e-9)


def test_weight_decay_is_decoupled_and_skips_alpha():
    params = {"dense.weight": Tensor(np.array([2.0])), "head.alpha": Tensor(np.array([2.0]))}
    c = cfg(learning_rate=0.1, weight_decay=0.5)
    optimizer_step("adam", params, {k: np.zeros(1) for k in params}, OptimizerState("adam"), c)
    assert params["dense.weight"].data[0] == 2.0 * (1 - 0.05)
    assert params["head.alpha"].data[0] == 2.0


def test_non_finite_gradient():
    with pytest.raises(NumericError, match="x"):
        optimizer_step("adam", scalar(1.0), {"x": np.array(np.nan)}, OptimizerState("adam"), cfg())


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)


def test_lr_zero_epoch_is_evaluation():
    train, _ = toy_sets()
    model = build_model(TINY, 0)
    before = model.state()
    c = cfg(learning_rate=0.0, weight_decay=3e-3)
    w = class_weights(train, 2)
    # same (unshuffled) batch composition as evaluate: padding depends on batch mates
    batches = make_batches(train, 8, "wrapping")
    loss = train_epoch(model, batches, w, OptimizerState("adam"), c)
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])
    assert loss == pytest.approx(evaluate(model, train, w, c)[0], rel=1e-12)


def test_fit_is_pure_evaluator_without_updates():
    train, val = toy_sets()
    model = build_model(TINY, 0)
    before = model.state()
    fit(model, train, val, cfg(learning_rate=0.0, max_epochs=3))
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_fit_deterministic():
    train, val = toy_sets()
    runs = [fit(build_model(TINY, 3), train, val, cfg(seed=9))[1].rows for _ in range(2)]
    assert runs[0] == runs[1]


def test_loss_decreases_on_separable_data():
    train, val = toy_sets(32)
    _, hist = fit(build_model(TINY, 1), train, val, cfg(max_epochs=5))
    assert hist.rows[4][1] < hist.rows[0][1]


def test_patience_zero_stops_after_second_epoch():
    # validation labels are flipped, so learning the training set raises val loss every epoch
    train, val = toy_sets(flip_val=True)
    model, hist = fit(build_model(TINY, 2), train, val, cfg(max_epochs=10, patience=0))
    vals = [r[2] for r in hist.rows]
    assert len(hist) == 2 and vals[1] > vals[0]
    assert hist.best_epoch == 1
    ref, _ = fit(build_model(TINY, 2), train, val, cfg(max_epochs=1))
    for k, v in ref.state().items():
        np.testing.assert_array_equal(model.state()[k], v)


def test_stop_epoch_and_snapshot():
    train, val = toy_sets(flip_val=True)
    c = cfg(max_epochs=20, patience=3, learning_rate=3e-2)
    model, hist = fit(build_model(TINY, 4), train, val, c)
    assert len(hist) == hist.best_epoch + 3 + 1
    assert hist.best_val_loss == min(r[2] for r in hist.rows)
    again = evaluate(model, val, class_weights(train, 2), c)[0]
    assert again == pytest.approx(hist.best_val_loss, rel=1e-6)


def test_snapshot_is_bit_exact():
    train, val = toy_sets()
    c = cfg(max_epochs=8, patience=100)
    model, hist = fit(build_model(TINY, 5), train, val, c)
    ref, _ = fit(build_model(TINY, 5), train, val, cfg(max_epochs=hist.best_epoch))
    for k, v in ref.state().items():
        np.testing.assert_array_equal(model.state()[k], v)


def test_no_patience_runs_every_epoch():
    train, _ = toy_sets(8)
    c = TrainConfig(**{**SHL_TRAIN.__dict__, "batch_size": 8, "dtype": "float64"})
    assert c.max_epochs == 50 and c.patience is None
    _, hist = fit(build_model(TINY, 0), train, [], c)
    assert len(hist) == 50


def test_patience_requires_validation():
    train, _ = toy_sets(8)
    with pytest.raises(ValidationError):
        fit(build_model(TINY, 0), train, [], cfg(patience=5))


def test_early_stop_state_threshold():
    s = EarlyStopState()
    model = build_model(TINY, 0)
    assert s.update(1, 1.0, model)
    assert not s.update(2, 1.0 - 5e-7, model)
    assert s.epochs_since_improvement == 1
    assert s.update(3, 0.9, model) and s.best_epoch == 3


def test_select_single_and_ties():
    train, val = toy_sets()
    best, scores = select_hyperparameters([cfg(max_epochs=2)], train, val, TINY)
    assert len(scores) == 1 and best == cfg(max_epochs=2)
    a, b = cfg(max_epochs=2, seed=1), cfg(max_epochs=2, seed=1, batch_size=8)
    best, scores = select_hyperparameters([a, b], train, val, TINY)
    assert scores[0] == scores[1] and best is a


def test_select_rejects_divergent_candidate():
    train, val = toy_sets(32)
    sane = cfg(learning_rate=1e-3, max_epochs=30)
    wild = cfg(learning_rate=1e3, max_epochs=30)
    best, scores = select_hyperparameters([wild, sane], train, val, TINY)
    assert best is sane
    assert scores[0] == -math.inf or scores[0] < scores[1]
