import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hazardfuse.nn import (
    Dropout,
    LayerSpec,
    NonFiniteGradientError,
    OptimState,
    bilinear_upsample,
    build_layer,
    conv2d,
    conv2d_backward,
    gradcheck,
    gradcheck_layer,
    maxpool,
    maxpool_backward,
    sgd_momentum_step,
    softmax,
    softmax_xent_sum,
)
from hazardfuse.nn.checkpoint import Checkpoint
from hazardfuse.nn.ops import bilinear_upsample_backward
from hazardfuse.fusion import FusionSpec, new_network


def naive_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[f, i, j] = np.sum(patch * w[f]) + b[f]
    return out


def naive_bilinear(x, factor):
    """Per-pixel align_corners=False interpolation, clamped at the borders."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor))
    for i in range(h * factor):
        sy = min(max((i + 0.5) / factor - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(w * factor):
            sx = min(max((j + 0.5) / factor - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = x[:, y0, x0] * (1 - fx) + x[:, y0, x1] * fx
            bot = x[:, y1, x0] * (1 - fx) + x[:, y1, x1] * fx
            out[:, i, j] = top * (1 - fy) + bot * fy
    return out


# -- conv ---------------------------------------------------------------------

def test_conv_hand_example():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3)
    out = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1), stride=1, pad=1)
    assert out.shape == (1, 3, 3)
    assert out[0, 1, 1] == 45
    assert out[0, 0, 0] == 12


def test_conv_identity_and_zero():
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    ident = np.zeros((3, 3, 1, 1))
    ident[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(conv2d(x, ident, np.zeros(3)), x)
    assert not conv2d(x, np.zeros((2, 3, 3, 3)), np.zeros(2), pad=1).any()


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 4, 4\).*\(1, 3, 3, 3\)|\(1, 3, 3, 3\).*\(2, 4, 4\)"):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 2), st.integers(0, 10_000))
def test_conv_matches_naive(cin, cout, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    np.testing.assert_allclose(conv2d(x, wt, b, stride, pad), naive_conv(x, wt, b, stride, pad), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, a, c):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    z = np.zeros(3)
    lhs = conv2d(a * x + c * y, w, z, 1, 1)
    rhs = a * conv2d(x, w, z, 1, 1) + c * conv2d(y, w, z, 1, 1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_conv_backward_adjoint():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal(conv2d(x, w, np.zeros(3), 2, 1).shape)
    dx, dw, db = conv2d_backward(g, x, w, 2, 1)
    # <conv(x), g> is linear in x (bias 0), so its gradient is dx
    assert np.isclose(np.sum(conv2d(x, w, np.zeros(3), 2, 1) * g), np.sum(dx * x))
    np.testing.assert_allclose(db, g.sum(axis=(1, 2)))
    assert dw.shape == w.shape


# -- maxpool -----------------------------------------------------------------

def test_maxpool_examples():
    out, arg = maxpool(np.array([[[1.0, 2], [3, 4]]]), 2, 2)
    np.testing.assert_array_equal(out, [[[4.0]]])
    ramp = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    out, _ = maxpool(ramp, 2, 2)
    brute = np.array([[max(ramp[0, i:i + 2, j:j + 2].ravel()) for j in (0, 2)] for i in (0, 2)])
    np.testing.assert_array_equal(out[0], brute)


def test_maxpool_ties_go_to_lowest_index():
    x = np.full((1, 4, 4), 2.5)
    out, arg = maxpool(x, 2, 2)
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 2.5))
    g = maxpool_backward(np.ones((1, 2, 2)), arg, x.shape)
    expect = np.zeros((1, 4, 4))
    expect[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(g, expect)


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        maxpool(np.zeros((1, 2, 2)), 3, 1)


# -- upsample ------------------------------------------------------------------

def test_upsample_examples():
    x = np.random.default_rng(0).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(bilinear_upsample(x, 1), x)
    np.testing.assert_allclose(bilinear_upsample(np.full((1, 3, 2), 1.7), 4), np.full((1, 12, 8), 1.7))
    ramp = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    np.testing.assert_allclose(bilinear_upsample(ramp, 2), naive_bilinear(ramp, 2), atol=1e-12)
    np.testing.assert_allclose(bilinear_upsample(ramp, 2)[0, 0], [0.0, 0.25, 0.75, 1.0])
    with pytest.raises(ValueError):
        bilinear_upsample(x, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_upsample_matches_oracle_and_adjoint(h, w, factor, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, h, w))
    up = bilinear_upsample(x, factor)
    np.testing.assert_allclose(up, naive_bilinear(x, factor), atol=1e-12)
    y = rng.standard_normal(up.shape)
    lhs, rhs = np.sum(up * y), np.sum(x * bilinear_upsample_backward(y, factor))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# -- loss ---------------------------------------------------------------------

def test_xent_examples():
    r = softmax_xent_sum(np.zeros((2, 1, 1)), np.array([[True]]))
    assert math.isclose(r.loss, math.log(2), rel_tol=1e-9)
    r = softmax_xent_sum(np.zeros((2, 2, 2)), np.ones((2, 2), dtype=bool))
    assert math.isclose(r.loss, 4 * math.log(2), rel_tol=1e-9)
    assert round(r.loss, 4) == 2.7726
    scores = np.array([math.log(3), 0.0]).reshape(2, 1, 1)
    np.testing.assert_allclose(softmax(scores)[:, 0, 0], [0.75, 0.25])
    r = softmax_xent_sum(scores, np.array([[True]]))
    assert math.isclose(r.loss, -math.log(0.75), rel_tol=1e-9)
    assert round(r.loss, 4) == 0.2877


def test_xent_ignore_and_all_ignored():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((2, 3, 3))
    t = rng.random((3, 3)) < 0.5
    ign = np.zeros((3, 3), dtype=bool)
    ign[0] = True
    r = softmax_xent_sum(s, t, ign)
    assert not r.grad[:, 0].any()
    assert not r.all_ignored
    r = softmax_xent_sum(s, t, np.ones((3, 3), dtype=bool))
    assert r.loss == 0.0 and not r.grad.any() and r.all_ignored


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-30, 30)), arrays(np.bool_, (3, 4)))
def test_xent_nonnegative_and_gradient_form(scores, target):
    r = softmax_xent_sum(scores, target)
    assert r.loss >= 0.0
    onehot = np.stack([target, ~target]).astype(np.float64)
    np.testing.assert_allclose(r.grad, softmax(scores) - onehot, atol=1e-12)


# -- optimiser -----------------------------------------------------------------

def test_sgd_first_step_weight_and_bias():
    params = {"a/conv.w": np.zeros(1), "a/conv.b": np.zeros(1)}
    grads = {"a/conv.w": np.ones(1), "a/conv.b": np.ones(1)}
    opt = OptimState(0.1, 0.99)
    sgd_momentum_step(params, grads, opt, {"a/conv.w": 1.0, "a/conv.b": 1.0})
    assert np.isclose(opt.velocity["a/conv.w"][0], -0.1) and np.isclose(params["a/conv.w"][0], -0.1)
    assert np.isclose(opt.velocity["a/conv.b"][0], -0.2) and np.isclose(params["a/conv.b"][0], -0.2)


def test_sgd_momentum_only_and_multiplier():
    params = {"x.w": np.array([1.0])}
    opt = OptimState(0.1, 0.5, velocity={"x.w": np.array([0.4])})
    sgd_momentum_step(params, {"x.w": np.zeros(1)}, opt)
    assert np.isclose(params["x.w"][0], 1.2)
    params = {"x.w": np.array([0.0])}
    opt = OptimState(0.1, 0.9)
    sgd_momentum_step(params, {"x.w": np.ones(1)}, opt, {"x.w": 5.0})
    assert np.isclose(params["x.w"][0], -0.5)


def test_sgd_rejects_non_finite_before_moving_anything():
    params = {"l1.w": np.zeros(2), "l2.w": np.zeros(2)}
    grads = {"l1.w": np.ones(2), "l2.w": np.array([1.0, np.nan])}
    with pytest.raises(NonFiniteGradientError, match="l2.w"):
        sgd_momentum_step(params, grads, OptimState(0.1))
    assert not params["l1.w"].any()
    with pytest.raises(ValueError):
        OptimState(0.1, momentum=1.0)


# -- layers and gradient checks ------------------------------------------------

def test_dropout_train_test_and_frozen():
    d = Dropout("d", 0.5)
    d.rng = np.random.default_rng(0)
    x = np.ones((4, 8, 8))
    np.testing.assert_array_equal(d.forward(x, train=False), x)
    y = d.forward(x, train=True)
    assert set(np.unique(y)) <= {0.0, 2.0}
    d.frozen = True
    np.testing.assert_array_equal(d.forward(x, train=True), d.forward(x, train=True))


def test_layerspec_validation():
    with pytest.raises(ValueError):
        LayerSpec("conv", "c", kernel=0, out_channels=1)
    with pytest.raises(ValueError):
        LayerSpec("dropout", "d", dropout_ratio=1.0)
    with pytest.raises(ValueError):
        LayerSpec("bogus", "x")


def test_gradcheck_single_1x1_conv_one_pixel():
    from hazardfuse.fusion.networks import Network, Sequential

    spec = FusionSpec.create("none", ["rgb"], layers=[LayerSpec("score", "score", kernel=1, out_channels=2)])

    class Net(Network):
        def __init__(self):
            super().__init__(spec)
            self.arms = [Sequential("rgb", spec.layers, 3)]

        def forward(self, inputs, train=False):
            return self.arms[0].forward(self._input(inputs, "rgb"), train)

        def backward(self, grad):
            self.arms[0].backward(grad)

    net = Net()
    net.arms[0].layers[0].init_gaussian(np.random.default_rng(0), 0.7)
    x = {"rgb": np.array([0.3, -1.2, 0.8]).reshape(3, 1, 1)}
    res = gradcheck(net, x, np.array([[True]]), epsilon=1e-4, n_samples=8)
    assert res.n_checked == 8
    assert res.max_rel_error < 1e-6


def test_gradcheck_conv_relu_net_8x8():
    layers = [LayerSpec("conv", "conv1", out_channels=4), LayerSpec("relu", "relu1"),
              LayerSpec("conv", "conv2", out_channels=4), LayerSpec("relu", "relu2"),
              LayerSpec("score", "score", kernel=1, out_channels=2)]
    spec = FusionSpec.create("none", ["rgb"], layers=layers)
    net, _ = new_network(spec)
    rng = np.random.default_rng(3)
    res = gradcheck(net, {"rgb": rng.standard_normal((3, 8, 8))}, rng.random((8, 8)) < 0.3, n_samples=200)
    assert res.n_checked >= 200
    assert res.max_rel_error < 1e-4


@pytest.mark.parametrize("kind", ["conv", "relu", "maxpool", "dropout", "bilinear_upsample", "score"])
def test_gradcheck_each_layer(kind):
    spec = {"conv": LayerSpec("conv", "c", out_channels=3), "relu": LayerSpec("relu", "r"),
            "maxpool": LayerSpec("maxpool", "p", kernel=2, stride=2),
            "dropout": LayerSpec("dropout", "d", dropout_ratio=0.3),
            "bilinear_upsample": LayerSpec("bilinear_upsample", "u", stride=2),
            "score": LayerSpec("score", "s", kernel=1, out_channels=2)}[kind]
    layer = build_layer(spec, 2)
    rng = np.random.default_rng(5)
    if layer.has_params:
        layer.init_gaussian(rng, 0.5)
    res = gradcheck_layer(layer, rng.standard_normal((2, 8, 8)), n_samples=100)
    assert res.max_rel_error < 1e-4


def test_gradcheck_skips_probes_across_kinks():
    # an input exactly at the ReLU hinge: +-eps probes switch the unit on and off
    layer = build_layer(LayerSpec("relu", "r"), 1)
    x = np.array([[[0.0, 1.0], [-1.0, 2.0]]])
    res = gradcheck_layer(layer, x, n_samples=4)
    assert res.n_skipped == 1 and res.n_checked == 3
    assert res.max_rel_error < 1e-8


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net, _ = new_network(FusionSpec.create("mid", ["rgb", "hha"]))
    ck = net.to_checkpoint(seed=4, parent_ids={"rgb": "abc"})
    path = ck.save(tmp_path / "ck")
    back = Checkpoint.load(path)
    assert back.id == ck.id
    assert back.parent_ids == {"rgb": "abc"}
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    raw = (tmp_path / "ck.bin").read_bytes()
    assert len(raw) == 4 * sum(v.size for v in ck.params.values())
