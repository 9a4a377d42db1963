import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccgan import autodiff as ad
from conftest import check_grads


def brute_conv2d(x, w, b, pad, stride):
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for k in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, k, i, j] = (patch * w[k]).sum() + (0.0 if b is None else b[k])
    return out


def brute_conv_transpose2d(x, w, pad, stride, output_pad):
    bsz, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    hc, wc = (h - 1) * stride + kh + output_pad, (wd - 1) * stride + kw + output_pad
    canvas = np.zeros((bsz, cout, hc, wc))
    for n in range(bsz):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    canvas[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[n, ci, i, j] * w[ci]
    ho = (h - 1) * stride - 2 * pad + kh + output_pad
    wo = (wd - 1) * stride - 2 * pad + kw + output_pad
    return canvas[:, :, pad : pad + ho, pad : pad + wo]


# --------------------------------------------------------------------------
# forward values


def test_conv2d_window_sums_example():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(x, np.ones((1, 1, 3, 3)), pad=1, stride=2).data
    np.testing.assert_array_equal(out[0, 0], [[12.0, 16.0], [24.0, 28.0]])


@pytest.mark.parametrize("pad,stride", [(0, 1), (1, 1), (1, 2), (2, 2), (0, 3)])
def test_conv2d_matches_brute_force(rng, pad, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ad.conv2d(x, w, b, pad, stride).data, brute_conv2d(x, w, b, pad, stride), atol=1e-12)


@pytest.mark.parametrize("pad,stride,output_pad", [(0, 1, 0), (1, 2, 1), (2, 2, 1), (1, 3, 2), (0, 2, 0)])
def test_conv_transpose2d_matches_brute_force(rng, pad, stride, output_pad):
    x = rng.normal(size=(2, 3, 4, 3))
    w = rng.normal(size=(3, 2, 5, 5))
    got = ad.conv_transpose2d(x, w, pad=pad, stride=stride, output_pad=output_pad).data
    np.testing.assert_allclose(got, brute_conv_transpose2d(x, w, pad, stride, output_pad), atol=1e-12)


@pytest.mark.parametrize("pad,stride", [(2, 2), (1, 1), (0, 2)])
def test_conv_transpose_is_adjoint_of_conv(rng, pad, stride):
    # <conv(x), y> == <x, conv_T(y)> when conv_T's output size matches x
    w = rng.normal(size=(4, 3, 5, 5))
    x = rng.normal(size=(2, 3, 8, 8))
    y_shape = ad.conv2d(x, w, pad=pad, stride=stride).shape
    out_pad = (8 + 2 * pad - 5) % stride
    y = rng.normal(size=y_shape)
    back = ad.conv_transpose2d(y, w, pad=pad, stride=stride, output_pad=out_pad).data
    assert back.shape == x.shape
    lhs = (ad.conv2d(x, w, pad=pad, stride=stride).data * y).sum()
    assert lhs == pytest.approx((x * back).sum(), rel=1e-12)


def test_generator_deconv_doubles_size(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    out = ad.conv_transpose2d(x, rng.normal(size=(2, 3, 5, 5)), pad=2, stride=2, output_pad=1)
    assert out.shape == (1, 3, 8, 8)


def test_softmax_stable_for_large_logits():
    out = ad.softmax(np.array([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])
    ls = ad.log_softmax(np.array([[1000.0, 0.0]])).data
    assert np.isfinite(ls).all()


def test_sigmoid_extremes():
    out = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_weight_norm_output_has_unit_direction(rng):
    v = rng.normal(size=(5, 3))
    g = np.array([1.0, 2.0, 3.0])
    w = ad.weight_norm(v, g, axis=1).data
    np.testing.assert_allclose(np.linalg.norm(w, axis=0), g)


# --------------------------------------------------------------------------
# gradients against central differences


UNARY = {
    "neg": ad.neg,
    "exp": ad.exp,
    "square": ad.square,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.2),
    "softmax": lambda x: ad.softmax(x, axis=1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=1),
    "transpose": lambda x: ad.transpose(x),
    "reshape": lambda x: ad.reshape(x, (2, 6)),
    "index": lambda x: ad.index(x, (np.array([0, 2, 0]), np.array([1, 1, 1]))),
    "sum_axis": lambda x: ad.sum(x, axis=0),
    "mean_keepdims": lambda x: ad.mean(x, axis=1, keepdims=True),
    "clip": lambda x: ad.clip(x, -0.5, 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.3  # keep kinks away from the differencing stencil
    x[np.abs(np.abs(x) - 0.5) < 1e-3] = 0.3
    weights = rng.normal(size=UNARY[name](x).shape)
    check_grads(lambda t: ad.sum(UNARY[name](t) * weights), x)


def test_positive_domain_gradients(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    check_grads(lambda t: ad.sum(ad.log(t)), x)
    check_grads(lambda t: ad.sum(ad.sqrt(t) * 1.7), x)


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
@pytest.mark.parametrize("sb", [(3, 4), (4,), (1, 4), (3, 1), ()])
def test_binary_broadcast_gradients(rng, op, sb):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=sb)
    w = rng.normal(size=(3, 4))
    check_grads(lambda x, y: ad.sum(ad.tensor_binary(op, x, y) * w), a, b)


def test_div_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(4,))
    check_grads(lambda x, y: ad.sum(ad.div(x, y)), a, b)


def test_matmul_gradient(rng):
    check_grads(lambda x, y: ad.sum(ad.square(ad.matmul(x, y))), rng.normal(size=(3, 5)), rng.normal(size=(5, 2)))


def test_conv2d_gradient(rng):
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    check_grads(lambda x_, w_, b_: ad.sum(ad.square(ad.conv2d(x_, w_, b_, pad=1, stride=2))), x, w, b)


def test_conv_transpose2d_gradient(rng):
    x, w, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 5, 5)), rng.normal(size=3)
    check_grads(lambda x_, w_, b_: ad.sum(ad.square(ad.conv_transpose2d(x_, w_, b_, 2, 2, 1))), x, w, b)


def test_global_average_pool_gradient(rng):
    check_grads(lambda x: ad.sum(ad.square(ad.global_average_pool(x))), rng.normal(size=(2, 3, 4, 4)))


@pytest.mark.parametrize("shape,axis", [((4, 3), 1), ((3, 2, 3, 3), 0), ((2, 3, 3, 3), 1)])
def test_weight_norm_gradient(rng, shape, axis):
    v, g = rng.normal(size=shape), rng.normal(size=shape[axis])
    w = rng.normal(size=shape)
    check_grads(lambda v_, g_: ad.sum(ad.weight_norm(v_, g_, axis) * w), v, g)


def test_dropout_gradient_with_fixed_seed(rng):
    x = rng.normal(size=(4, 5))
    check_grads(lambda t: ad.sum(ad.square(ad.dropout(t, 0.5, seed=[7, 1]))), x)


def test_dropout_eval_and_determinism(rng):
    x = rng.normal(size=(50, 50))
    assert ad.dropout(x, 0.5, seed=3, training=False).data is not None
    np.testing.assert_array_equal(ad.dropout(x, 0.5, seed=3, training=False).data, x)
    a, b = ad.dropout(x, 0.5, seed=3).data, ad.dropout(x, 0.5, seed=3).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, ad.dropout(x, 0.5, seed=4).data)
    kept = a != 0
    np.testing.assert_allclose(a[kept], 2 * x[kept])
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, seed=0)


# --------------------------------------------------------------------------
# engine behaviour


def test_shared_subexpression_accumulates():
    x = ad.tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y + y))  # d/dx 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_grads_accumulate_across_backward_calls():
    x = ad.tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum(x * 3.0))
    ad.backward(ad.sum(x * 3.0))
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * 2.0)
    assert not y.requires_grad and y._parents == ()
    assert ad.is_grad_enabled()


def test_deep_chain_does_not_recurse():
    x = ad.tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    tape = ad.backward(ad.sum(y))
    assert len(tape) == 5002
    np.testing.assert_allclose(x.grad, [1.0])


def test_backward_requires_scalar():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_shape_and_domain_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="channel"):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ad.DomainError):
        ad.log(np.array([0.0, 1.0]))
    with pytest.raises(ad.DomainError):
        ad.sqrt(np.array([-1.0]))
    with pytest.raises(ad.DomainError):
        ad.div(np.ones(2), np.array([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.weight_norm(np.zeros((2, 2)), np.ones(2), axis=1)
    with pytest.raises(ValueError):
        ad.conv_transpose2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), stride=2, output_pad=2)


def test_finite_difference_check_detects_wrong_gradient():
    x = ad.tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    assert ad.finite_difference_check(lambda p: ad.sum(ad.square(p[0]) * 3.0), [x]) < 1e-8

    def broken(p):
        t = p[0]
        out = ad._make(t.data ** 2, (t,), lambda g: (g * t.data,), "half_square")  # missing factor 2
        return ad.sum(out)

    assert ad.finite_difference_check(broken, [x]) > 0.3
    assert x.grad is None


def test_finite_difference_check_samples_large_params(rng):
    x = ad.tensor(rng.normal(size=1000), requires_grad=True)
    err = ad.finite_difference_check(lambda p: ad.sum(ad.tanh(p[0])), [x], n_coords=50)
    assert err < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(x, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(1, 3), st.integers(1, 3)), st.sampled_from([(), (1,), (3,), (1, 3), (2, 1, 3)]))
def test_unbroadcast_inverts_broadcast(lead, shape):
    try:
        full = np.broadcast_shapes(lead + (3,), shape)
    except ValueError:
        assume(False)
    g = np.ones(full)
    red = ad._unbroadcast(g, shape)
    assert red.shape == shape
    assert red.sum() == pytest.approx(g.sum())
