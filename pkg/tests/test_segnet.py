import numpy as np
import pytest

from fdcheck import numeric_grad, rel_err
from rpbilinear.dataio import FeatureSequence
from rpbilinear.linalg import Rng
from rpbilinear.segnet import (
    HEADS,
    Adam,
    Model,
    NetConfig,
    TrainConfig,
    TrainingDivergedError,
    bilinear_head_forward,
    conv1d_backward,
    conv1d_forward,
    cross_entropy,
    dilated_conv1d_forward,
    fit,
    load_checkpoint,
    predict,
    residual_block_backward,
    residual_block_forward,
    save_checkpoint,
    softmax,
    train_step,
)


def brute_conv(w, b, X, dilation):
    K, C_out, _ = w.shape
    T = X.shape[0]
    out = np.zeros((T, C_out))
    for t in range(T):
        for o in range(C_out):
            acc = b[o]
            for k in range(K):
                s = t + (k - K // 2) * dilation
                if 0 <= s < T:
                    acc += sum(w[k, o, i] * X[s, i] for i in range(X.shape[1]))
            out[t, o] = acc
    return out


def test_identity_kernel():
    X = Rng(0).normal((6, 3))
    w = np.zeros((3, 3, 3))
    w[1] = np.eye(3)
    np.testing.assert_array_equal(dilated_conv1d_forward(w, np.zeros(3), X, 2), X)


def test_constant_input_interior():
    X = np.ones((9, 2))
    w = np.stack([0.2 * np.eye(2), 0.5 * np.eye(2), 0.3 * np.eye(2)])
    out = dilated_conv1d_forward(w, np.zeros(2), X, 2)
    np.testing.assert_allclose(out[2:-2], 1.0, rtol=1e-15)
    assert not np.allclose(out[0], 1.0)


@pytest.mark.parametrize("dilation", [1, 2, 4, 8])
def test_conv_against_brute_force(dilation):
    rng = Rng(dilation)
    w, b, X = rng.normal((3, 4, 2)), rng.normal(4), rng.normal((5, 2))
    np.testing.assert_allclose(dilated_conv1d_forward(w, b, X, dilation), brute_conv(w, b, X, dilation),
                               rtol=1e-13, atol=1e-13)


def test_wide_kernel_against_brute_force():
    rng = Rng(9)
    w, b, X = rng.normal((25, 3, 4)), rng.normal(3), rng.normal((11, 4))
    np.testing.assert_allclose(conv1d_forward(w, b, X), brute_conv(w, b, X, 1), rtol=1e-13, atol=1e-13)


def test_conv_backward_finite_differences():
    rng = Rng(10)
    w, b, X = rng.normal((3, 3, 2)), rng.normal(3), rng.normal((7, 2))
    dY = rng.normal((7, 3))
    dX, dw, db = conv1d_backward(w, X, dY, 2)

    def loss():
        return float(np.sum(conv1d_forward(w, b, X, 2) * dY))

    assert rel_err(dX, numeric_grad(loss, X)) < 1e-6
    assert rel_err(dw, numeric_grad(loss, w)) < 1e-6
    assert rel_err(db, numeric_grad(loss, b)) < 1e-6


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        dilated_conv1d_forward(np.zeros((3, 2, 2)), np.zeros(2), np.zeros((4, 3)), 1)
    with pytest.raises(ValueError):
        dilated_conv1d_forward(np.zeros((5, 2, 2)), np.zeros(2), np.zeros((4, 2)), 1)


def _block_params(rng, H, scale=1.0):
    return {"conv.w": scale * rng.normal((3, H, H)), "conv.b": scale * rng.normal(H),
            "pw.w": scale * rng.normal((H, H)), "pw.b": scale * rng.normal(H)}


def test_residual_zero_weights_is_skip():
    X = Rng(11).normal((6, 4))
    out, _ = residual_block_forward(_block_params(Rng(0), 4, 0.0), X, 4)
    np.testing.assert_array_equal(out, X)


@pytest.mark.parametrize("T", [1, 3, 8, 20])
def test_residual_preserves_length(T):
    out, _ = residual_block_forward(_block_params(Rng(T), 3), Rng(1).normal((T, 3)), 8)
    assert out.shape == (T, 3)


def test_residual_backward_finite_differences():
    rng = Rng(12)
    p = _block_params(rng, 4)
    X = rng.normal((8, 4))
    d_out = rng.normal((8, 4))
    dX, grads = residual_block_backward(p, residual_block_forward(p, X, 2)[1], d_out, 2)

    def loss():
        return float(np.sum(residual_block_forward(p, X, 2)[0] * d_out))

    assert rel_err(dX, numeric_grad(loss, X)) < 1e-6
    for name, g in grads.items():
        assert rel_err(g, numeric_grad(loss, p[name])) < 1e-6


def test_softmax_and_cross_entropy():
    logits = Rng(13).normal((10, 4)) * 30
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-12)
    labels = np.arange(10) % 4
    loss, d = cross_entropy(logits, labels)
    ref = -np.mean(np.log(softmax(logits)[np.arange(10), labels]))
    assert loss == pytest.approx(ref, rel=1e-12)

    def f():
        return cross_entropy(logits, labels)[0]

    assert rel_err(d, numeric_grad(f, logits)) < 1e-6


def small_cfg(head, **kw):
    base = dict(D_in=4, n_classes=3, hidden=6, layers=2, head=head, rank=2, rows=3, head_kernel=5)
    base.update(kw)
    return NetConfig(**base)


@pytest.mark.parametrize("head", HEADS)
def test_network_gradient(head):
    model = Model.init(small_cfg(head, dropout=0.25), seed=1)
    assert model.n_parameters() <= 2000
    X = Rng(2).normal((8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2, 1, 0])

    def loss():
        return model.loss_and_grads(X, labels, train=True, rng=Rng(3))[0]

    _, grads = model.loss_and_grads(X, labels, train=True, rng=Rng(3))
    assert set(grads) == set(model.trainable_names)
    for name, g in grads.items():
        assert rel_err(g, numeric_grad(loss, model.params[name])) < 1e-5, name


def test_frozen_parameters_per_head():
    assert "pool.E" in Model.init(small_cfg("rpbinary")).frozen
    assert "pool.sigma" in Model.init(small_cfg("rpbinary")).frozen
    g = Model.init(small_cfg("rpgaussian"))
    assert "pool.E" in g.frozen and "pool.sigma" not in g.frozen
    lp = Model.init(small_cfg("learnable"))
    assert "pool.E" not in lp.frozen and "pool.sigma" in lp.frozen


def test_dropout_zero_train_equals_eval():
    model = Model.init(small_cfg("rpgaussian", dropout=0.0), seed=4)
    X = Rng(5).normal((10, 4))
    np.testing.assert_array_equal(model.forward(X, train=True, rng=Rng(0))[0], model.forward(X)[0])


def test_dropout_inverted_scaling():
    model = Model.init(small_cfg("rpbinary", dropout=0.5), seed=4)
    h = Rng(6).normal((12, 6))
    full, _ = bilinear_head_forward(model, h, train=False)
    dropped, cache = bilinear_head_forward(model, h, train=True, rng=Rng(7))
    kept = cache["mask"] > 0
    np.testing.assert_allclose(dropped[kept], 2.0 * full[kept], rtol=1e-14)
    assert np.all(dropped[~kept] == 0.0)


def test_zero_features_give_head_bias():
    model = Model.init(small_cfg("rpbinary"), seed=8)
    logits, _ = bilinear_head_forward(model, np.zeros((7, 6)), train=False)
    np.testing.assert_array_equal(logits, np.tile(model.params["head.b"], (7, 1)))


@pytest.mark.parametrize("head", HEADS)
def test_length_preserved(head):
    model = Model.init(small_cfg(head), seed=0)
    for T in (1, 2, 17):
        assert model.forward(Rng(T).normal((T, 4)))[0].shape == (T, 3)


def _seq(T=12, seed=0, C=3):
    rng = Rng(seed)
    labels = np.repeat(np.arange(C), -(-T // C))[:T]
    return FeatureSequence(rng.normal((T, 4)) + labels[:, None], labels, f"s{seed}", C)


def test_zero_learning_rate_keeps_params():
    model = Model.init(small_cfg("rpgaussian"), seed=1)
    before = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(model.params, model.trainable_names, TrainConfig(learning_rate=0.0))
    loss = train_step(model, opt, _seq(), Rng(0))
    assert np.isfinite(loss) and loss > 0
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_single_frame_single_class_converges():
    model = Model.init(small_cfg("rpgaussian", dropout=0.0, n_classes=2), seed=2)
    seq = FeatureSequence(Rng(3).normal((1, 4)), [1], "one", 2)
    opt = Adam(model.params, model.trainable_names, TrainConfig(learning_rate=0.01))
    losses = [train_step(model, opt, seq) for _ in range(200)]
    assert losses[-1] < 0.01
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_one_step_decreases_loss_over_seeds():
    wins = 0
    trials = 40
    for seed in range(trials):
        model = Model.init(small_cfg("rpgaussian", dropout=0.0), seed=seed)
        seq = _seq(seed=seed)
        before = model.loss_and_grads(seq.features, seq.labels, train=False)[0]
        opt = Adam(model.params, model.trainable_names, TrainConfig(learning_rate=1e-4))
        train_step(model, opt, seq)
        after = model.loss_and_grads(seq.features, seq.labels, train=False)[0]
        wins += after <= before
    assert wins >= 0.95 * trials


def test_bandwidths_are_learned_and_positive():
    model = Model.init(small_cfg("rpgaussian", dropout=0.0), seed=5)
    sigma0 = model.params["pool.sigma"].copy()
    fit(model, [_seq(seed=i) for i in range(3)], TrainConfig(learning_rate=0.01, epochs=2))
    assert not np.array_equal(model.params["pool.sigma"], sigma0)
    assert np.all(model.params["pool.sigma"] > 0)


def test_nan_raises():
    model = Model.init(small_cfg("baseline"), seed=0)
    model.params["out.w"][0, 0] = np.nan
    opt = Adam(model.params, model.trainable_names, TrainConfig())
    with pytest.raises(TrainingDivergedError):
        train_step(model, opt, _seq())


def test_bad_labels_rejected():
    model = Model.init(small_cfg("baseline"), seed=0)
    opt = Adam(model.params, model.trainable_names, TrainConfig())
    with pytest.raises(ValueError):
        train_step(model, opt, FeatureSequence(np.ones((2, 4)), [0, 5], "bad", 6))


def test_predict_ties_and_argmax():
    model = Model.init(small_cfg("baseline"), seed=0)
    model.params["out.w"][:] = 0.0
    model.params["out.b"][:] = 0.0
    assert set(predict(model, Rng(0).normal((5, 4))).frames) == {0}
    model.params["out.b"][:] = [0.0, 0.0, 1.0]
    assert set(predict(model, Rng(0).normal((5, 4))).frames) == {2}
    model = Model.init(small_cfg("rpbinary"), seed=3)
    X = Rng(4).normal((20, 4))
    logits = model.forward(X)[0]
    brute = [max(range(3), key=lambda c: (logits[t, c], -c)) for t in range(20)]
    assert list(predict(model, X).frames) == brute


def test_eval_mode_deterministic():
    model = Model.init(small_cfg("learnable"), seed=6)
    X = Rng(7).normal((9, 4))
    np.testing.assert_array_equal(model.forward(X)[0], model.forward(X)[0])
    a = model.forward(X, train=True, rng=Rng(1))[0]
    b = model.forward(X, train=True, rng=Rng(1))[0]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("head", HEADS)
def test_checkpoint_round_trip(tmp_path, head):
    model = Model.init(small_cfg(head), seed=7)
    p = tmp_path / "m.brpc"
    save_checkpoint(p, model)
    back = load_checkpoint(p)
    assert back.cfg == model.cfg and back.frozen == model.frozen
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    blob = p.read_bytes()
    (tmp_path / "t.brpc").write_bytes(blob[:-1])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.brpc")
    (tmp_path / "m2.brpc").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m2.brpc")


def test_zero_epochs_leaves_init():
    model = Model.init(small_cfg("rpgaussian"), seed=8)
    ref = Model.init(small_cfg("rpgaussian"), seed=8)
    assert fit(model, [_seq()], TrainConfig(epochs=0)) == []
    for k in ref.params:
        np.testing.assert_array_equal(model.params[k], ref.params[k])


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(4, 3, head="nope")
    with pytest.raises(ValueError):
        NetConfig(4, 3, head_kernel=4)
    with pytest.raises(ValueError):
        NetConfig(4, 3, dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
