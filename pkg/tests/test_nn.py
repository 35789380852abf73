import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gazeshield import nn


def _blobs(n=64, d=7, c=4, seed=0):
    r = np.random.default_rng(seed)
    y = np.arange(n) % c
    X = r.normal(size=(n, d)) * 0.3 + 3 * np.eye(c, d)[y]
    return X, y


def _hand_count(d, c, w1=256, w2=128):
    bn = 4 * (d + w1 + 3 * w2)
    dense = (d * w1 + w1) + (w1 * w2 + w2) + 2 * (w2 * w2 + w2) + (w2 * c + c)
    return bn + dense, bn // 2 + dense


def test_parameter_count_by_hand():
    total, trainable = _hand_count(7, 9)
    assert (total, trainable) == (71717, 70423)
    m = nn.build_model(7, 9)
    assert m.n_params == total and m.n_trainable == trainable


def test_layout_names_and_penalty():
    names = [n for n, _ in nn.build_model(3, 2).layout]
    assert names[:4] == ["bn_in.gamma", "bn_in.beta", "bn_in.moving_mean", "bn_in.moving_var"]
    penalized = [n for n in names if nn.is_penalized(n)]
    assert penalized == [f"dense_{i}.kernel" for i in range(1, 5)]
    assert not nn.is_trainable("bn_2.moving_var") and nn.is_trainable("bn_2.gamma")


def test_build_errors_and_determinism():
    with pytest.raises(ValueError):
        nn.build_model(7, 1)
    a, b = nn.build_model(7, 9, seed=3), nn.build_model(7, 9, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(nn.get_weights(a).arrays, nn.get_weights(b).arrays))
    c = nn.build_model(7, 9, seed=4)
    assert not np.array_equal(a.params["dense_1.kernel"], c.params["dense_1.kernel"])
    assert np.all(a.params["bn_1.moving_var"] == 1) and np.all(a.params["dense_1.bias"] == 0)


def test_forward_zero_batch_and_repeatability():
    m = nn.build_model(7, 9)
    P = nn.forward(m, np.zeros((5, 7)))
    assert P.shape == (5, 9) and np.allclose(P.sum(1), 1)
    X = np.random.default_rng(0).normal(size=(10, 7))
    assert np.array_equal(nn.forward(m, X), nn.forward(m, X))
    with pytest.raises(ValueError):
        nn.forward(m, np.zeros((2, 6)))


@settings(max_examples=30)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(5)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)), st.sampled_from(["train", "infer"]))
def test_softmax_rows_normalised(X, mode):
    m = nn.build_model(5, 4, seed=1, hidden=(8, 6))
    P = nn.forward(m, X, mode, rng=np.random.default_rng(0), update_stats=False)
    assert np.all(P >= 0) and np.all(P <= 1)
    assert np.all(np.abs(P.sum(1) - 1) <= 1e-6)


def test_train_mode_reduces_to_infer():
    m = nn.build_model(7, 3, seed=2, dropout=(0.0, 0.0, 0.0, 0.0))
    X = np.random.default_rng(1).normal(size=(12, 7))
    assert np.array_equal(nn.forward(m, X, "train", freeze_bn=True), nn.forward(m, X, "infer"))
    m2 = nn.build_model(7, 3, seed=2)
    assert np.array_equal(nn.forward(m2, X, "train", freeze_bn=True, dropout=False), nn.forward(m2, X))


def test_residual_identity():
    m = nn.build_model(7, 3, seed=5)
    for layer in ("dense_3", "dense_4"):
        m.params[f"{layer}.kernel"][:] = 0.0
        m.params[f"{layer}.bias"][:] = 0.0
    X = np.random.default_rng(2).normal(size=(16, 7))
    for mode in ("train", "infer"):
        _, cache = nn.forward(m, X, mode, dropout=False, update_stats=False, return_cache=True)
        assert np.all(cache["residual_branch"] == 0)
        assert np.array_equal(cache["residual_sum"], cache["skip"])


def test_gradient_check_tiny_net():
    X, y = _blobs(8, d=5, c=3, seed=4)
    m = nn.build_model(5, 3, seed=0, hidden=(4, 4))
    assert nn.gradient_check(m, X, y, n_checks=300) <= 1e-4


def test_gradient_check_full_net():
    X, y = _blobs(16, d=7, c=9, seed=5)
    m = nn.build_model(7, 9, seed=1)
    assert nn.gradient_check(m, X, y, n_checks=60) <= 1e-4


def test_zero_output_layer_gives_uniform_softmax():
    X, y = _blobs(10, d=4, c=3)
    m = nn.build_model(4, 3, seed=0, hidden=(6, 5))
    m.params["dense_out.kernel"][:] = 0.0
    loss, g, P = nn.loss_and_grads(m, X, y, "train", dropout=False, update_stats=False)
    assert np.allclose(P, 1 / 3)
    onehot = np.eye(3)[y]
    assert np.allclose(g["dense_out.bias"], (P - onehot).sum(0) / len(y))
    assert loss == pytest.approx(np.log(3) + nn.l2_penalty(m))


def test_l2_gradient_is_two_lambda_kernel():
    X, y = _blobs(10, d=4, c=3)
    with_l2 = nn.build_model(4, 3, seed=0, hidden=(6, 5))
    no_l2 = nn.build_model(4, 3, seed=0, hidden=(6, 5), l2=0.0)
    kw = dict(mode="train", dropout=False, update_stats=False)
    _, g1, _ = nn.loss_and_grads(with_l2, X, y, **kw)
    _, g0, _ = nn.loss_and_grads(no_l2, X, y, **kw)
    for name in g1:
        diff = g1[name] - g0[name]
        if nn.is_penalized(name):
            assert np.allclose(diff, 2 * 0.001 * with_l2.params[name], rtol=0, atol=1e-15)
        else:
            assert np.array_equal(diff, np.zeros_like(diff))


def test_weights_roundtrip(tmp_path):
    m = nn.build_model(7, 9, seed=8)
    X = np.random.default_rng(3).normal(size=(6, 7))
    m.params["bn_2.moving_mean"] += 0.25
    w = nn.get_weights(m)
    fresh = nn.build_model(7, 9, seed=99)
    nn.set_weights(fresh, w)
    assert np.array_equal(nn.predict_proba(fresh, X), nn.predict_proba(m, X))
    w.save(tmp_path / "w.gzw", meta={"round": 1})
    back = nn.ModelWeights.load(tmp_path / "w.gzw")
    assert back.layout == w.layout and all(np.array_equal(a, b) for a, b in zip(back.arrays, w.arrays))
    assert back.sha256() == w.sha256()
    with pytest.raises(nn.LayoutError):
        nn.ModelWeights.from_bytes(b"nope")


def test_layout_mismatch():
    w9 = nn.get_weights(nn.build_model(7, 9))
    with pytest.raises(nn.LayoutError):
        nn.set_weights(nn.build_model(7, 5), w9)


def test_early_stopping_patience():
    es = nn.EarlyStopping(10)
    stop_at = None
    for epoch in range(1, 30):
        if es.update(epoch, 1.0):
            stop_at = epoch
            break
    assert stop_at is not None and stop_at <= 1 + 10


def test_plateau_schedule_floor():
    s = nn.PlateauScheduler(1e-3, 5, 0.5, 1e-6)
    s.update(1.0)
    rates = [s.update(1.0) for _ in range(5 * 20)]
    assert rates[4] == 5e-4
    assert min(rates) == 1e-6 and rates[-1] == 1e-6
    assert s.update(0.5) == 1e-6


def test_overfit_small_separable_set():
    X, y = _blobs(64, d=7, c=4, seed=6)
    m = nn.build_model(7, 4, seed=0)
    cfg = nn.TrainConfig(epochs=200, early_stopping_patience=None, lr_patience=None, seed=0)
    hist = nn.train(m, X, y, X, y, cfg)
    assert len(hist.epochs) == 200 and not hist.stopped_early
    assert np.mean(nn.predict(m, X) == y) == 1.0


def test_train_restores_best_weights_and_history():
    X, y = _blobs(96, d=7, c=3, seed=7)
    vX, vy = _blobs(30, d=7, c=3, seed=8)
    m = nn.build_model(7, 3, seed=0)
    hist = nn.train(m, X, y, vX, vy, nn.TrainConfig(epochs=15, seed=1))
    vals = hist.column("val_loss")
    assert hist.best_val_loss == min(vals) and vals[hist.best_epoch - 1] == min(vals)
    assert nn.evaluate_loss(m, vX, vy)[0] == min(vals)
    assert all(e["lr"] >= 1e-6 for e in hist.epochs)
    doc = json.loads(hist.to_json())
    assert set(doc["epochs"][0]) == {"epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"}
    with pytest.raises(ValueError):
        nn.train(m, X[:0], y[:0], vX, vy)


def test_training_is_deterministic():
    X, y = _blobs(80, d=7, c=3, seed=9)
    runs = []
    for _ in range(2):
        m = nn.build_model(7, 3, seed=2)
        nn.train(m, X[:60], y[:60], X[60:], y[60:], nn.TrainConfig(epochs=4, seed=5))
        runs.append(nn.get_weights(m).sha256())
    assert runs[0] == runs[1]
