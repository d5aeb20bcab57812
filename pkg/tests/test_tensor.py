import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c5ed.tensor import (
    BatchNormStats,
    GradientTape,
    ShapeError,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_transpose,
    l1_loss,
    no_grad,
    relu,
)
from oracles import finite_difference_check, naive_conv2d


def rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def weighted_sum(out, rng):
    """Scalar ``sum(out * R)`` with a fixed random R, so every output entry matters."""
    return (out * Tensor(rng.normal(size=out.shape))).sum()


# -- conv2d -----------------------------------------------------------------

def test_conv2d_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    out = conv2d(Tensor(np.zeros((1, 1, 5, 5))), rand(rng, 1, 1, 3, 3), Tensor(np.zeros(1)), dilation=1, padding=1)
    assert out.shape == (1, 1, 5, 5)
    assert np.all(out.data == 0)


def test_conv2d_dilated_impulse_taps():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), dilation=2, padding=2)
    expected = {(3 + a, 3 + b) for a in (-2, 0, 2) for b in (-2, 0, 2)}
    assert set(zip(*np.nonzero(out.data[0, 0]))) == expected


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_conv2d_impulse_pattern_matches_enumerated_offsets(d):
    rng = np.random.default_rng(d)
    w = rng.uniform(0.5, 1.5, size=(1, 1, 3, 3))
    n = 4 * d + 9
    x = np.zeros((1, 1, n, n))
    c = n // 2
    x[0, 0, c, c] = 1.0
    out = conv2d(Tensor(x), Tensor(w), dilation=d, padding=d).data[0, 0]
    expected = np.zeros((n, n))
    for a in range(3):
        for b in range(3):
            # cross-correlation: tap (a, b) reads input at out + (a-1)d, so the impulse lands at c - (a-1)d
            expected[c - (a - 1) * d, c - (b - 1) * d] = w[0, 0, a, b]
    np.testing.assert_array_equal(out, expected)


def test_single_layer_gradient_footprint_is_3x3():
    x = Tensor(np.ones((1, 1, 9, 9)), requires_grad=True)
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), dilation=1, padding=1)
    backward(out[0, 0, 4, 4])
    nz = np.argwhere(x.grad[0, 0] != 0)
    assert nz.min(axis=0).tolist() == [3, 3] and nz.max(axis=0).tolist() == [5, 5]
    assert len(nz) == 9


@pytest.mark.parametrize("dilation,padding,stride", [(1, 0, 1), (2, 2, 1), (1, 1, 2), (3, 1, 1)])
def test_conv2d_matches_loop_oracle(dilation, padding, stride):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation, padding=padding, stride=stride)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, dilation, padding, stride), atol=1e-12)


def test_conv2d_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_non_integer_extent_rejected():
    with pytest.raises(ShapeError, match="integer"):
        conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


# -- conv2d_transpose ---------------------------------------------------------

def test_conv_transpose_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    out = conv2d_transpose(Tensor(x), Tensor(eye), Tensor(np.zeros(3)), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_transpose_zero_input():
    rng = np.random.default_rng(2)
    out = conv2d_transpose(Tensor(np.zeros((1, 2, 4, 4))), rand(rng, 2, 3, 3, 3), padding=1)
    assert np.all(out.data == 0) and out.shape == (1, 3, 4, 4)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)])
def test_conv_transpose_is_adjoint_of_conv(seed, stride, padding, dilation):
    rng = np.random.default_rng(seed)
    k = 3
    h = stride * 3 + dilation * (k - 1) + 1 - 2 * padding
    x = rng.normal(size=(2, 3, h, h))
    w = rng.normal(size=(4, 3, k, k))
    y_shape = conv2d(Tensor(x), Tensor(w), dilation=dilation, padding=padding, stride=stride).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(conv2d(Tensor(x), Tensor(w), dilation=dilation, padding=padding, stride=stride).data * y)
    xt = conv2d_transpose(Tensor(y), Tensor(w), stride=stride, padding=padding, dilation=dilation)
    assert xt.shape == x.shape
    rhs = np.sum(x * xt.data)
    assert abs(lhs - rhs) < 1e-10


def test_conv_transpose_stride1_same_padding_preserves_extent():
    out = conv2d_transpose(Tensor(np.ones((1, 2, 7, 9))), Tensor(np.ones((2, 1, 3, 3))), padding=1)
    assert out.shape == (1, 1, 7, 9)


def test_conv_transpose_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d_transpose(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))


# -- batchnorm ------------------------------------------------------------------

def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
    out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormStats.fresh(3), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batchnorm_constant_channel_is_zero():
    x = Tensor(np.full((2, 1, 3, 3), 4.2))
    out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormStats.fresh(1))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batchnorm_updates_running_stats_and_eval_uses_them():
    rng = np.random.default_rng(4)
    stats = BatchNormStats.fresh(2)
    x = rng.normal(1.0, 2.0, size=(3, 2, 4, 4))
    batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True, momentum=0.1)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    m = 3 * 16
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=False)
    expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected)


def test_batchnorm_empty_batch_rejected():
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.zeros((0, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormStats.fresh(1))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient_2x3x4x4(training):
    rng = np.random.default_rng(5)
    x, g, b = rand(rng, 2, 3, 4, 4), rand(rng, 3), rand(rng, 3)
    stats = BatchNormStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3))
    r = rng.normal(size=(2, 3, 4, 4))

    def loss():
        s = BatchNormStats(stats.mean.copy(), stats.var.copy())
        return (batchnorm2d(x, g, b, s, training=training) * Tensor(r)).sum()

    assert finite_difference_check(loss, [x, g, b]) < 1e-5


# -- relu, concat, l1 -------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert np.all(relu(Tensor(-np.arange(1.0, 5.0))).data == 0)


def test_relu_gradient_is_positive_indicator():
    rng = np.random.default_rng(6)
    data = rng.normal(size=50)
    data[np.abs(data) < 1e-2] = 0.5  # keep away from the kink
    x = Tensor(data, requires_grad=True)
    backward(relu(x).sum())
    np.testing.assert_array_equal(x.grad, (data > 0).astype(float))
    assert finite_difference_check(lambda: relu(x).sum(), [x]) < 1e-8


def test_concat_channels():
    rng = np.random.default_rng(8)
    a, b = rand(rng, 1, 2, 4, 4), rand(rng, 1, 2, 4, 4)
    out = concat_channels([a, b])
    assert out.shape == (1, 4, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    assert concat_channels([a]) is a
    backward(out.sum())
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5)))])


def test_l1_loss_values():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    assert l1_loss(Tensor(a), Tensor(a)).item() == 0.0
    assert l1_loss(Tensor(a + 1.0), Tensor(a)).item() == pytest.approx(1.0, abs=1e-15)
    brute = sum(abs(p - q) for p, q in zip(a.ravel(), b.ravel())) / a.size
    assert l1_loss(Tensor(a), Tensor(b)).item() == pytest.approx(brute, rel=1e-14)
    with pytest.raises(ShapeError):
        l1_loss(Tensor(a), Tensor(b[:1]))


# -- backward / tape --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.full(3, 4.0))


def test_backward_on_detached_leaves_grads_absent():
    x = Tensor(np.ones((2, 2)))
    w = Tensor(np.ones((2, 2)))
    loss = (x * w).sum()
    backward(loss)
    assert x.grad is None and w.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_tape_visits_each_op_once_and_resets():
    x = Tensor(np.ones(3), requires_grad=True)
    a = x * 2.0
    b = a + x  # diamond: x feeds both a and b
    loss = (a * b).sum()
    tape = GradientTape.record(loss)
    ids = [id(t) for t in tape.ops]
    assert len(ids) == len(set(ids))
    assert tape.ops[-1] is loss and tape.ops.index(a) < tape.ops.index(b)
    tape.replay(np.ones(()))
    # d/dx sum(2x * 3x) = 12x
    np.testing.assert_allclose(x.grad, 12.0)
    tape.reset()
    assert len(tape) == 0


def test_two_layer_conv_net_gradients():
    rng = np.random.default_rng(11)
    x = rand(rng, 2, 2, 6, 6, grad=False)
    target = Tensor(rng.normal(size=(2, 1, 6, 6)))
    w1, b1 = rand(rng, 3, 2, 3, 3), rand(rng, 3)
    w2, b2 = rand(rng, 1, 3, 3, 3), rand(rng, 1)

    def loss():
        hdn = relu(conv2d(x, w1, b1, dilation=1, padding=1))
        return l1_loss(conv2d(hdn, w2, b2, dilation=2, padding=2), target)

    assert finite_difference_check(loss, [w1, b1, w2, b2]) < 1e-4


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x, w = rand(rng, 2, 2, 8, 8), rand(rng, 3, 2, 3, 3)
        out = conv2d(x, w, dilation=2, padding=2)
        backward(weighted_sum(out, rng))
        return out.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# -- generic elementwise ops used by the complex layers ------------------------------

@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "sqrt", "square", "abs", "mean", "getitem", "reshape"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(12)
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 1, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(1, 3, 5, 1)), requires_grad=True)
    fns = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b,
        "sqrt": lambda: a.sqrt(), "square": lambda: a.square(), "abs": lambda: (a - 1.2).abs(),
        "mean": lambda: (a * b).mean(axis=(0, 2), keepdims=True), "getitem": lambda: a[:, 1:3],
        "reshape": lambda: a.reshape(6, 4),
    }
    r = {}

    def loss():
        out = fns[op]()
        if op not in r:
            r[op] = Tensor(rng.normal(size=out.shape))
        return (out * r[op]).sum()

    assert finite_difference_check(loss, [a, b]) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 3), st.integers(0, 2 ** 16))
def test_conv2d_gradient_property(cin, cout, k, d, seed):
    rng = np.random.default_rng(seed)
    pad = d * (k - 1) // 2
    x, w, b = rand(rng, 1, cin, 5, 5), rand(rng, cout, cin, k, k), rand(rng, cout)
    r = Tensor(rng.normal(size=(1, cout, 5, 5)))
    assert finite_difference_check(lambda: (conv2d(x, w, b, dilation=d, padding=pad) * r).sum(), [x, w, b]) < 1e-4
