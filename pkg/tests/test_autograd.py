import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csslkit import autograd as ag
from csslkit.autograd import ShapeError, Tensor

from oracles import conv_loops, conv_taps


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# --- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c] = 1.0
    out = ag.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv_all_ones_sums():
    out = ag.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv_matches_loop_nest():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, conv_loops(x, w, b, stride, pad), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3),
    h=st.integers(3, 7), w=st.integers(3, 7), k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 2**31),
)
def test_conv_loop_nest_property(n, cin, cout, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, kern, b = rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
    got = ag.conv2d(Tensor(x), Tensor(kern), Tensor(b), stride, pad).data
    assert got.shape == (n, cout, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    np.testing.assert_allclose(got, conv_loops(x, kern, b, stride, pad), rtol=0, atol=1e-12)


def test_tap_oracle_agrees_with_loop_nest():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(conv_taps(x, w, b, 2, 1), conv_loops(x, w, b, 2, 1), atol=1e-12)


@pytest.mark.parametrize(
    "xs, ws, bs, stride, pad, needle",
    [
        ((1, 3, 5, 5), (2, 4, 3, 3), (2,), 1, 1, "Cin"),
        ((1, 3, 2, 5), (2, 3, 3, 3), (2,), 1, 0, "height"),
        ((1, 3, 5, 2), (2, 3, 3, 3), (2,), 1, 0, "width"),
        ((1, 3, 5, 5), (2, 3, 3, 3), (3,), 1, 1, "bias"),
        ((1, 3, 5, 5), (2, 3, 3, 3), (2,), 0, 1, "stride"),
        ((3, 5, 5), (2, 3, 3, 3), (2,), 1, 1, "input"),
    ],
)
def test_conv_shape_errors_name_dimension(xs, ws, bs, stride, pad, needle):
    with pytest.raises(ShapeError, match=needle):
        ag.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)), Tensor(np.zeros(bs)), stride, pad)


# --- elementwise ---------------------------------------------------------------


def test_elementwise_examples():
    assert ag.elementwise("sigmoid", Tensor(np.array(0.0))).item() == 0.5
    assert ag.elementwise("tanh", Tensor(np.array(0.0))).item() == 0.0
    assert ag.elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8.0, 15.0]
    assert ag.elementwise("add", Tensor([2.0]), Tensor([4.0])).data.tolist() == [6.0]
    assert ag.elementwise("sub", Tensor([2.0]), Tensor([4.0])).data.tolist() == [-2.0]


def test_elementwise_rejects_mismatch_and_bad_kind():
    with pytest.raises(ShapeError):
        ag.elementwise("add", Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ag.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        ag.elementwise("pow", Tensor(np.zeros(3)), Tensor(np.zeros(3)))


@given(st.lists(st.floats(-800, 800), min_size=1, max_size=30))
def test_sigmoid_tanh_ranges(vals):
    x = Tensor(np.array(vals))
    s = ag.sigmoid(x).data
    t = ag.tanh(x).data
    assert np.all(np.isfinite(s))
    assert np.all((s >= 0) & (s <= 1))
    assert np.all((t >= -1) & (t <= 1))
    small = np.abs(np.array(vals)) < 30
    assert np.all((s[small] > 0) & (s[small] < 1))


# --- heaviside ---------------------------------------------------------------


def test_heaviside_forward_is_strict():
    assert ag.heaviside(Tensor([-0.2, 0.0, 0.7])).data.tolist() == [0.0, 0.0, 1.0]


def test_heaviside_surrogate_values():
    u = leaf([0.0, 0.5, 2.0, -0.5])
    ag.sum_(ag.heaviside(u, 1.0)).backward()
    assert u.grad.tolist() == [1.0, 0.5, 0.0, 0.5]


def test_heaviside_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        ag.heaviside(Tensor([1.0]), 0.0)


def test_heaviside_fd_on_smoothed_forward():
    u = leaf([0.6])
    f = lambda: ag.sum_(ag.heaviside(u - 0.5, 1.0) * u)  # noqa: E731
    with ag.smoothed_heaviside():
        err = ag.finite_difference_check(f, [u], eps=1e-6)
    assert err < 1e-6


def test_smoothed_step_is_antiderivative_of_surrogate():
    u = np.linspace(-2.5, 2.5, 2001)
    h = 1e-6
    for alpha in (0.5, 1.0, 2.0):
        num = (ag.smoothed_step(u + h, alpha) - ag.smoothed_step(u - h, alpha)) / (2 * h)
        np.testing.assert_allclose(num, ag.surrogate_grad(u, alpha), atol=1e-5)
        assert ag.smoothed_step(np.array([-alpha - 1, alpha + 1]), alpha).tolist() == [0.0, 1.0]


# --- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    ag.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = leaf([1.0, -2.0])
    ag.sum_(x * x).backward()
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, -2.0])
    ag.sum_(x * x).backward()
    ag.sum_(x * x).backward()
    assert x.grad.tolist() == [4.0, -8.0]
    x.zero_grad()
    ag.sum_(x).backward()
    assert x.grad.tolist() == [1.0, 1.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        leaf([1.0, 2.0]).backward()


def test_backward_visits_in_reverse_recording_order():
    visited = []

    def tagged(name, parents):
        return ag._record(np.array(1.0), parents, lambda g, n=name: (visited.append(n) or g,) * len(parents))

    x = leaf(1.0)
    a = tagged("a", (x,))
    b = tagged("b", (x,))
    c = tagged("c", (a,))
    d = tagged("d", (b, c))
    d.backward()
    assert visited == ["d", "c", "b", "a"]


def test_conv_sigmoid_fd():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(1, 1, 4, 4)))
    w = leaf(rng.normal(size=(2, 1, 3, 3)))
    b = leaf(rng.normal(size=2))
    f = lambda: ag.sum_(ag.sigmoid(ag.conv2d(x, w, b, 1, 1)))  # noqa: E731
    assert ag.finite_difference_check(f, [x, w, b]) < 1e-4


def test_fd_check_trivial_and_eps_domain():
    p = leaf(np.random.default_rng(4).normal(size=5))
    assert ag.finite_difference_check(lambda: ag.sum_(p), [p], eps=1e-5) < 1e-10
    for bad in (1e-8, 1e-2):
        with pytest.raises(ValueError):
            ag.finite_difference_check(lambda: ag.sum_(p), [p], eps=bad)


def test_fd_conv_tanh_eight_params():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    w = leaf(rng.normal(size=(1, 2, 2, 2)))
    f = lambda: ag.sum_(ag.tanh(ag.conv2d(x, w, None, 1, 0)))  # noqa: E731
    assert w.size == 8
    assert ag.finite_difference_check(f, [w]) < 1e-4


UNARY = {
    "sigmoid": ag.sigmoid, "tanh": ag.tanh, "exp": ag.exp, "square": ag.square,
    "relu": ag.relu, "abs": ag.abs_, "upsample": ag.upsample_nearest,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(6)
    data = rng.normal(size=(1, 2, 3, 3))
    data[np.abs(data) < 0.05] += 0.2  # keep kinks of relu/abs away from the probes
    x = leaf(data)
    wts = Tensor(rng.normal(size=UNARY[name](Tensor(data)).shape))
    f = lambda: ag.sum_(UNARY[name](x) * wts)  # noqa: E731
    assert ag.finite_difference_check(f, [x]) < 1e-4


def test_structural_primitive_gradients():
    rng = np.random.default_rng(7)
    a, b = leaf(rng.normal(size=(2, 3, 2, 2))), leaf(rng.normal(size=(2, 1, 2, 2)))
    bias = leaf(rng.normal(size=3))
    wts = Tensor(rng.normal(size=(2, 4, 2, 2)))

    def f():
        cat = ag.concat_channels([a + ag.expand_channels(bias, a.shape), b])
        lo, hi = ag.split_channels(cat, 2)
        return ag.sum_(ag.concat_channels([hi, lo]) * wts) + ag.mean(ag.sqrt(ag.square(a) + 1.0))

    assert ag.finite_difference_check(f, [a, b, bias]) < 1e-4


def test_loss_primitive_gradients():
    rng = np.random.default_rng(8)
    z = leaf(rng.normal(size=(2, 1, 3, 3)) * 2)
    t = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)
    wts = rng.random((2, 1, 3, 3)) + 0.5
    tgt = rng.normal(size=(2, 1, 3, 3)) * 2
    m = (rng.random((2, 1, 3, 3)) > 0.3).astype(float)
    f = lambda: ag.bce_with_logits(z, t, wts) + ag.smooth_l1(z, tgt, m, 1.0)  # noqa: E731
    assert ag.finite_difference_check(f, [z]) < 1e-4


def test_bce_matches_direct_formula():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    t = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    p = 1 / (1 + np.exp(-z))
    with np.errstate(divide="ignore"):
        direct = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    direct[-1] = 40.0  # log(1 - sigmoid(40)) underflows; the exact value is 40 + log1p(e^-40)
    assert abs(ag.bce_with_logits(Tensor(z), t).item() - direct.sum()) < 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_tape_replay_is_bitwise_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(1, 2, 5, 5)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        y = ag.conv2d(x, w, None, 2, 1)
        loss = ag.sum_(ag.heaviside(y) * ag.tanh(y))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()
