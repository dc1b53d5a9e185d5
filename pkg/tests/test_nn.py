import math

import numpy as np
import pytest

from mmlc.encoders import EncodedImage
from mmlc.errors import ConfigError, InputFormatError
from mmlc.gradcheck import check_classifier, check_lcn, check_lcn_own_loss, central_difference, relative_error
from mmlc.nn import (
    Classifier,
    ClassifierSpec,
    LabelCorrector,
    LcnSpec,
    ParamVector,
    backward_classifier,
    backward_lcn_through_target,
    forward_classifier,
    forward_lcn,
    init_params,
    load_checkpoint,
    one_hot,
    save_checkpoint,
    soft_cross_entropy,
    softmax,
)


def _tiny_net(hidden=(3,), side=2, act="tanh"):
    return Classifier(ClassifierSpec(input_side=side, hidden_sizes=hidden, activation=act))


def test_param_vector_layout_check():
    layout = (("W0", (2, 3)), ("b0", (3,)))
    pv = ParamVector(np.arange(9.0), layout)
    parts = pv.unpack()
    np.testing.assert_array_equal(parts["W0"], [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(parts["b0"], [6, 7, 8])
    with pytest.raises(ValueError):
        ParamVector(np.zeros(8), layout)


def test_init_params():
    layout = (("W", (100, 100)), ("b", (100,)))
    assert not np.any(init_params(layout, 0, 0.0).values)
    a, b = init_params(layout, 3), init_params(layout, 3)
    assert a.values.tobytes() == b.values.tobytes()
    w = a.unpack()["W"]
    assert abs(w.std() - 0.05) < 0.005
    assert not np.any(a.unpack()["b"])


def test_softmax_sums_to_one():
    z = np.random.default_rng(0).normal(0, 30, (50, 3))
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)


@pytest.mark.parametrize(
    "target,pred,expected",
    [
        ([0, 0, 1], [0, 0, 1], 0.0),
        ([1, 0, 0], [1 / 3] * 3, math.log(3)),
        ([1 / 3] * 3, [1 / 3] * 3, math.log(3)),
    ],
)
def test_soft_cross_entropy_examples(target, pred, expected):
    assert soft_cross_entropy(target, pred) == pytest.approx(expected, abs=1e-11)


def test_soft_cross_entropy_rejects_non_distribution():
    with pytest.raises(ValueError):
        soft_cross_entropy([1, 0, 0], [0.5, 0.6, 0.1])


def test_classifier_zero_weights_uniform():
    net = _tiny_net()
    X = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_allclose(forward_classifier(net, np.zeros(net.size), X), np.full((4, 3), 1 / 3))


def test_classifier_bias_shift_invariance():
    net = _tiny_net()
    w = net.init_params(1, 0.7)
    X = np.random.default_rng(1).normal(size=(3, 4))
    shifted = ParamVector(w.values.copy(), net.layout)
    shifted.unpack()["b1"][...] += 5.0
    np.testing.assert_allclose(net.predict_proba(w, X), net.predict_proba(shifted, X), atol=1e-15)


def test_classifier_hand_forward():
    # 1-pixel input, one hidden unit
    net = Classifier(ClassifierSpec(input_side=1, hidden_sizes=(1,)))
    w = np.array([2.0, 0.5, 1.0, -1.0, 0.0, 0.1, 0.2, 0.3])  # W0, b0, W1 (1x3), b1
    h = math.tanh(2.0 * 0.25 + 0.5)
    logits = np.array([1.0 * h + 0.1, -1.0 * h + 0.2, 0.0 * h + 0.3])
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(net.predict_proba(w, [[0.25]]), [expected], rtol=1e-15)


def test_classifier_accepts_images():
    net = _tiny_net()
    img = EncodedImage(np.arange(4.0).reshape(2, 2) / 4, "sgaf")
    w = net.init_params(0)
    p1 = net.predict_proba(w, img)
    p2 = net.predict_proba(w, [img, img])
    np.testing.assert_array_equal(p2, np.vstack([p1, p1]))
    with pytest.raises(ValueError):
        net.predict_proba(w, np.zeros((1, 9)))


def test_zero_net_gradient_is_final_bias_only():
    net = _tiny_net(hidden=(4,))
    t = one_hot([2, 0])
    grad = ParamVector(backward_classifier(net, np.zeros(net.size), np.zeros((2, 4)), t), net.layout).unpack()
    np.testing.assert_allclose(grad["b1"], (np.full((2, 3), 1 / 3) - t).mean(axis=0), atol=1e-12)
    for name in ("W0", "b0", "W1"):
        assert not np.any(grad[name])


def test_batch_duplication_keeps_mean_gradient():
    net = _tiny_net()
    rng = np.random.default_rng(3)
    w = net.init_params(2, 0.5)
    X, t = rng.normal(size=(3, 4)), one_hot([0, 1, 2])
    g1 = net.gradient(w, X, t)
    g2 = net.gradient(w, np.vstack([X, X]), np.vstack([t, t]))
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(8))
def test_classifier_gradient_matches_fd(seed):
    r = check_classifier(seed)
    assert r.error <= 1e-5, r


@pytest.mark.parametrize("seed", range(8))
def test_lcn_gradients_match_fd(seed):
    assert check_lcn(seed).error <= 1e-5
    assert check_lcn_own_loss(seed).error <= 1e-5


def test_lcn_zero_alpha_uniform_and_untied():
    lcn = LabelCorrector(LcnSpec(x_dim=4, y_dim=4, branch_hidden=3, fusion_hidden=3))
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(forward_lcn(lcn, np.zeros(lcn.size), X, Y), np.full((2, 3), 1 / 3))
    a = lcn.init_params(0, 0.8)
    assert not np.allclose(lcn.predict(a, X, Y), lcn.predict(a, Y, X))


def test_lcn_hand_forward():
    lcn = LabelCorrector(LcnSpec(x_dim=1, y_dim=1, branch_hidden=1, fusion_hidden=1))
    # WA bA WB bB WF(2x1) bF WO(1x3) bO
    a = np.array([1.0, 0.0, -2.0, 0.5, 1.0, 1.0, 0.1, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0])
    ha, hb = math.tanh(0.3), math.tanh(-2.0 * 0.2 + 0.5)
    hf = max(ha + hb + 0.1, 0.0)
    logits = np.array([hf, 0.0, -hf])
    np.testing.assert_allclose(lcn.predict(a, [[0.3]], [[0.2]]), [np.exp(logits) / np.exp(logits).sum()], rtol=1e-15)


def test_through_target_uniform_prediction():
    # a zero classifier predicts 1/3 everywhere: dL/dtarget = log 3 for every class,
    # which the softmax Jacobian maps to zero
    lcn = LabelCorrector(LcnSpec(x_dim=4, y_dim=4, branch_hidden=3, fusion_hidden=3))
    net = _tiny_net()
    rng = np.random.default_rng(0)
    a = lcn.init_params(0, 0.8)
    g = backward_lcn_through_target(lcn, net, a, np.zeros(net.size), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_through_target_saturated_head():
    lcn = LabelCorrector(LcnSpec(x_dim=4, y_dim=4, branch_hidden=3, fusion_hidden=3))
    net = _tiny_net()
    rng = np.random.default_rng(1)
    a = lcn.init_params(0, 0.5)
    X, Y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = net.init_params(1, 0.8)
    g0 = backward_lcn_through_target(lcn, net, a, w, X, Y)
    a.unpack()["bO"][...] = [60.0, 0.0, 0.0]
    g1 = backward_lcn_through_target(lcn, net, a, w, X, Y)
    assert np.linalg.norm(g1) < 1e-6 * np.linalg.norm(g0)


def test_fd_helpers():
    f = lambda x: float(np.sum(np.sin(x)))
    x = np.linspace(0, 1, 5)
    assert relative_error(central_difference(f, x), np.cos(x)) < 1e-9
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_specs_validate():
    with pytest.raises(ConfigError):
        ClassifierSpec(hidden_sizes=())
    with pytest.raises(ConfigError):
        ClassifierSpec(activation="gelu")
    with pytest.raises(ConfigError):
        LcnSpec(branch_hidden=0)


def test_checkpoint_round_trip(tmp_path):
    net = _tiny_net()
    lcn = LabelCorrector(LcnSpec(x_dim=4, y_dim=8, branch_hidden=2, fusion_hidden=2))
    params = {"alpha": lcn.init_params(0, 0.3), "w_10": net.init_params(1, 0.3)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw.startswith(b"MMLCPV")
    back = load_checkpoint(path)
    assert list(back) == ["alpha", "w_10"]
    for k in params:
        assert back[k].layout == params[k].layout
        assert back[k].values.tobytes() == params[k].values.tobytes()
    save_checkpoint(tmp_path / "again.bin", back)
    assert (tmp_path / "again.bin").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(InputFormatError):
        load_checkpoint(tmp_path / "x.bin")
    net = _tiny_net()
    save_checkpoint(tmp_path / "t.bin", {"w": net.init_params(0)})
    (tmp_path / "cut.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-8])
    with pytest.raises(InputFormatError):
        load_checkpoint(tmp_path / "cut.bin")
