import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import check_grad
from sarcd import tensor as T
from sarcd.tensor import (
    BatchNormState,
    Tensor,
    backward,
    batch_norm,
    channel_scale,
    clip,
    concat,
    conv2d,
    fully_connected,
    global_avg_pool,
    log,
    mix_kernels,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    tmean,
    tsum,
)

RNG = np.random.default_rng(1234)


def loop_conv(x, w, b=None, stride=1, pad=0, groups=1):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for s in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[s, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[s, oc, i, j] = (patch * w[oc]).sum() + (0.0 if b is None else b[oc])
    return out


# conv2d ------------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_first_block_shape():
    out = conv2d(Tensor(np.zeros((1, 1, 28, 28), np.float32)), Tensor(np.zeros((16, 1, 3, 3), np.float32)), pad=1)
    assert out.shape == (1, 16, 28, 28)


def test_conv_matches_loop_reference():
    x = RNG.standard_normal((2, 4, 6, 6))
    w = RNG.standard_normal((8, 4, 3, 3))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data, loop_conv(x, w), rtol=0, atol=1e-12)


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [
    (4, 8, 3, 1, 1, 1),
    (16, 16, 3, 1, 1, 1),   # wide enough for the flattened path
    (16, 8, 3, 1, 1, 2),
    (3, 6, 1, 2, 0, 1),
    (8, 4, 1, 4, 0, 1),
    (6, 6, 3, 2, 1, 3),
    (1, 5, 3, 1, 1, 1),
    (32, 32, 3, 1, 1, 4),
])
def test_conv_variants_match_loop(cin, cout, k, stride, pad, groups):
    x = RNG.standard_normal((2, cin, 7, 7))
    w = RNG.standard_normal((cout, cin // groups, k, k))
    b = RNG.standard_normal(cout)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, groups=groups).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, pad, groups), rtol=0, atol=1e-11)


def test_grouped_conv_equals_slices():
    x = RNG.standard_normal((3, 12, 5, 5))
    w = RNG.standard_normal((6, 4, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), pad=1, groups=3).data
    parts = [conv2d(Tensor(x[:, 4 * g:4 * g + 4]), Tensor(w[2 * g:2 * g + 2]), pad=1).data for g in range(3)]
    np.testing.assert_allclose(got, np.concatenate(parts, axis=1), rtol=0, atol=1e-12)


def test_flat_and_im2col_paths_agree(monkeypatch):
    x = RNG.standard_normal((3, 16, 12, 12))
    w = RNG.standard_normal((16, 16, 3, 3))
    g = RNG.standard_normal((3, 16, 12, 12))

    def run():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = conv2d(xt, wt, pad=1)
        backward(tsum(out * g))
        return out.data, xt.grad, wt.grad

    fast = run()
    monkeypatch.setattr(T, "_FLAT_MIN_CHANNELS", 10 ** 9)
    slow = run()
    for a, b in zip(fast, slow):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


@pytest.mark.parametrize("xs,ws,kw,msg", [
    ((1, 3, 5, 5), (2, 2, 3, 3), {}, "C_in"),
    ((1, 4, 5, 5), (3, 2, 3, 3), {"groups": 2}, "C_out"),
    ((1, 3, 5, 5), (2, 3, 3, 3), {"groups": 2}, "groups"),
    ((1, 2, 2, 2), (1, 2, 3, 3), {}, "H/W"),
    ((2, 5, 5), (1, 2, 3, 3), {}, "4-D"),
])
def test_conv_shape_errors_name_dimension(xs, ws, kw, msg):
    with pytest.raises(ValueError, match=msg):
        conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)), **kw)


def test_conv_bias_shape_error():
    with pytest.raises(ValueError, match="bias"):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


# batch norm --------------------------------------------------------------------

def _bn(x, gamma, beta, training=True, state=None):
    c = x.shape[1]
    state = state or BatchNormState(c, np.float64)
    return batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), state, training), state


def test_bn_constant_input_gives_zeros():
    out, _ = _bn(np.full((2, 3, 4, 4), 7.0), np.ones(3), np.zeros(3))
    assert np.all(out.data == 0.0)


def test_bn_zero_gamma_gives_beta():
    out, _ = _bn(RNG.standard_normal((2, 3, 4, 4)), np.zeros(3), np.full(3, 5.0))
    assert np.all(out.data == 5.0)


def test_bn_moments_in_training():
    x = RNG.standard_normal((4, 3, 5, 5)) * 3 + 2
    out, _ = _bn(x, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-3)  # eps in the denominator
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)) * (1 + 1e-5 / x.var(axis=(0, 2, 3))), 1, atol=1e-6)


def test_bn_running_stats_update_and_eval():
    x = RNG.standard_normal((4, 2, 3, 3)) + 1.5
    _, state = _bn(x, np.ones(2), np.zeros(2))
    m = x.size // 2
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out, _ = _bn(x, np.ones(2), np.zeros(2), training=False, state=state)
    expect = (x - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_bn_rejects_single_value_per_channel():
    with pytest.raises(ValueError, match="N\\*H\\*W"):
        _bn(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2))
    _bn(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), training=False)


# elementwise ---------------------------------------------------------------------

def test_sigmoid_half_at_zero():
    assert sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_sigmoid_stable_at_extremes():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        out = sigmoid(Tensor(np.array([-1e4, -50.0, 50.0, 1e4]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[-1] == 1.0


def test_softmax_equal_logits():
    np.testing.assert_allclose(softmax(Tensor(np.full((2, 3), 4.0)), axis=1).data, 1 / 3, rtol=0, atol=1e-15)


@given(arrays(np.float64, (4, 5), elements=st.floats(-500, 500)), st.sampled_from([0, 1]))
def test_softmax_is_simplex(x, axis):
    p = softmax(Tensor(x), axis=axis).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, rtol=0, atol=1e-12)


def test_relu_values():
    assert relu(Tensor(np.array([-2.0, 0.0, 3.0]))).data.tolist() == [0.0, 0.0, 3.0]


def test_sqrt_gradient_zero_at_zero():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    backward(tsum(sqrt(x)))
    assert x.grad.tolist() == [0.0, 0.25]


# pooling / fc ----------------------------------------------------------------------

def test_gap_values():
    assert np.all(global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.7))).data == 1.7)
    assert global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data[0, 0] == 2.5
    assert global_avg_pool(Tensor(np.zeros((8, 64, 7, 7)))).shape == (8, 64)


def test_fc_examples():
    x = RNG.standard_normal((3, 5))
    np.testing.assert_array_equal(fully_connected(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
    assert fully_connected(Tensor(np.ones((1, 6))), Tensor(np.ones((1, 6)))).data[0, 0] == 6.0


def test_fc_matches_loop():
    x, w, b = RNG.standard_normal((4, 7)), RNG.standard_normal((3, 7)), RNG.standard_normal(3)
    ref = np.array([[sum(x[n, d] * w[o, d] for d in range(7)) + b[o] for o in range(3)] for n in range(4)])
    np.testing.assert_allclose(fully_connected(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_fc_shape_error():
    with pytest.raises(ValueError, match="incompatible"):
        fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


# backward ----------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(RNG.standard_normal((2, 3, 4)), requires_grad=True)
    backward(tsum(x))
    assert np.all(x.grad == 1.0)


def test_logistic_derivative_at_zero():
    w = Tensor(np.array([0.0]), requires_grad=True)
    backward(tsum(sigmoid(w * 1.0)))
    assert w.grad[0] == 0.25


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_backward_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(tsum(x * x))
    backward(tsum(x * x))
    np.testing.assert_array_equal(x.grad, 2 * 2 * x.data)


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * 2.0
    z = y * y + y  # y feeds two consumers
    backward(tsum(z))
    # dz/dx = (2y + 1) * 2 = 26
    assert x.grad[0] == 26.0


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = relu(x) * 2.0
    assert y._parents == ()
    assert T.is_grad_enabled()


def test_forward_is_deterministic():
    x = RNG.standard_normal((2, 16, 8, 8)).astype(np.float32)
    w = RNG.standard_normal((16, 16, 3, 3)).astype(np.float32)
    a = conv2d(Tensor(x), Tensor(w), pad=1).data
    b = conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()


# finite-difference suite ---------------------------------------------------------------

def _away_from_zero(shape, rng):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + 0.05, x)


def _away_from_bounds(shape, rng):
    x = rng.standard_normal(shape)
    return np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.0, x)


def _bn_fn(training):
    def fn(ts):
        x, g, b = ts
        return batch_norm(x, g, b, BatchNormState(x.shape[1], np.float64), training)
    return fn


def _bn_eval_state(c, rng):
    s = BatchNormState(c, np.float64)
    s.running_mean = rng.standard_normal(c)
    s.running_var = rng.uniform(0.5, 2.0, c)
    return s


OPS = {
    "add": (lambda ts: ts[0] + ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "sub": (lambda ts: ts[0] - ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "mul": (lambda ts: ts[0] * ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "div": (lambda ts: ts[0] / 1.7, lambda r: [r.standard_normal((3, 4))]),
    "rsub": (lambda ts: 2.0 - ts[0], lambda r: [r.standard_normal((5,))]),
    "neg": (lambda ts: -ts[0], lambda r: [r.standard_normal((5,))]),
    "getitem": (lambda ts: ts[0][:, 1], lambda r: [r.standard_normal((4, 3))]),
    "relu": (lambda ts: relu(ts[0]), lambda r: [_away_from_zero((3, 5), r)]),
    "sigmoid": (lambda ts: sigmoid(ts[0]), lambda r: [3 * r.standard_normal((3, 5))]),
    "softmax0": (lambda ts: softmax(ts[0], axis=0), lambda r: [r.standard_normal((3, 4))]),
    "softmax1": (lambda ts: softmax(ts[0], axis=1), lambda r: [r.standard_normal((2, 3, 4))]),
    "log": (lambda ts: log(ts[0]), lambda r: [r.uniform(0.5, 3.0, (3, 4))]),
    "sqrt": (lambda ts: sqrt(ts[0]), lambda r: [r.uniform(0.5, 3.0, (3, 4))]),
    "clip": (lambda ts: clip(ts[0], -0.5, 0.5), lambda r: [_away_from_bounds((4, 4), r)]),
    "sum_all": (lambda ts: tsum(ts[0]), lambda r: [r.standard_normal((3, 4))]),
    "sum_axis": (lambda ts: tsum(ts[0], axis=(1, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
    "mean": (lambda ts: tmean(ts[0], axis=1), lambda r: [r.standard_normal((3, 4))]),
    "reshape": (lambda ts: reshape(ts[0], (4, -1)), lambda r: [r.standard_normal((2, 3, 2))]),
    "concat": (lambda ts: concat(ts, axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "conv_flat": (lambda ts: conv2d(ts[0], ts[1], ts[2], pad=1),
                  lambda r: [r.standard_normal((2, 8, 4, 4)), r.standard_normal((3, 8, 3, 3)), r.standard_normal(3)]),
    "conv_grouped": (lambda ts: conv2d(ts[0], ts[1], pad=1, groups=2),
                     lambda r: [r.standard_normal((1, 16, 4, 4)), r.standard_normal((4, 8, 3, 3))]),
    "conv_im2col": (lambda ts: conv2d(ts[0], ts[1], ts[2], pad=1),
                    lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv_stride": (lambda ts: conv2d(ts[0], ts[1], ts[2], stride=2),
                    lambda r: [r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 1, 1)), r.standard_normal(4)]),
    "conv_stride3x3": (lambda ts: conv2d(ts[0], ts[1], stride=2, pad=1),
                       lambda r: [r.standard_normal((2, 3, 5, 5)), r.standard_normal((2, 3, 3, 3))]),
    "batch_norm_train": (_bn_fn(True), lambda r: [r.standard_normal((3, 2, 3, 3)), r.standard_normal(2), r.standard_normal(2)]),
    "batch_norm_eval": (lambda ts: batch_norm(ts[0], ts[1], ts[2], _bn_eval_state(2, np.random.default_rng(9)), False),
                        lambda r: [r.standard_normal((3, 2, 3, 3)), r.standard_normal(2), r.standard_normal(2)]),
    "gap": (lambda ts: global_avg_pool(ts[0]), lambda r: [r.standard_normal((2, 3, 4, 5))]),
    "fc": (lambda ts: fully_connected(ts[0], ts[1], ts[2]),
           lambda r: [r.standard_normal((3, 5)), r.standard_normal((4, 5)), r.standard_normal(4)]),
    "channel_scale": (lambda ts: channel_scale(ts[0], ts[1]), lambda r: [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3))]),
    "mix_kernels": (lambda ts: mix_kernels(ts[0], ts[1]), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2, 2, 3, 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name):
    fn, make = OPS[name]
    for instance in range(5):
        rng = np.random.default_rng(100 * instance + 7)
        err = check_grad(fn, make(rng), seed=instance)
        assert err < 1e-4, f"{name} instance {instance}: relative error {err:.2e}"
