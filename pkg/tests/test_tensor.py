import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irisusformer import tensor as T
from irisusformer.tensor import ShapeError, Tensor


def grad_of(fn, *leaves):
    for x in leaves:
        x.grad = None
    T.backward(fn())
    return [x.grad for x in leaves]


# -- forward values ---------------------------------------------------------------

def test_elementwise_examples():
    np.testing.assert_array_equal(T.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(T.elementwise("mul", x, Tensor(np.ones((3, 4)))).data, x.data)
    assert T.log(Tensor([1e-20])).data[0] == pytest.approx(np.log(1e-12))
    assert T.log(Tensor([1e-20])).data[0] == pytest.approx(-27.631, abs=1e-3)


def test_log_clamp_blocks_gradient_below_floor():
    x = Tensor([1e-20, 2.0], requires_grad=True)
    (g,) = grad_of(lambda: T.tsum(T.log(x)), x)
    assert g[0] == 0.0 and g[1] == pytest.approx(0.5)


def test_matmul_examples():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1., 2], [3, 4]]), Tensor([[5.], [6]])).data, [[17], [39]])
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_gradcheck_tight(rng):
    a, b = Tensor(rng.normal(size=(3, 4)), True), Tensor(rng.normal(size=(4, 2)), True)
    w = rng.normal(size=(3, 2))
    assert T.parameters_grad_check(lambda: T.tsum(T.matmul(a, b) * w), [a, b]) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0., 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(T.softmax(Tensor([1000., 1000])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([0., np.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((2, 3), 7.0)), one, zero).data, 0.0)
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[-1, 1]], atol=1e-5)


def _naive_conv(x, w, b, stride, pad, groups):
    nb, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((nb, co, ho, wo))
    per = co // groups
    for n in range(nb):
        for o in range(co):
            g = o // per
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0)
    return out


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [(2, 3, 3, 1, 1, 1), (4, 4, 3, 2, 1, 2),
                                                         (3, 3, 3, 1, 1, 3), (4, 5, 1, 1, 0, 1)])
def test_conv2d_matches_loop_oracle(rng, cin, cout, k, stride, pad, groups):
    x = rng.normal(size=(2, cin, 6, 5))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    np.testing.assert_allclose(got, _naive_conv(x, w, b, stride, pad, groups), atol=1e-12)


def test_conv2d_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(x, Tensor(eye)).data, x.data)
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    assert out[0, 0, 1, 1] == 9.0


def test_pixel_shuffle_examples(rng):
    x = Tensor(rng.normal(size=(1, 8, 2, 2)))
    assert T.pixel_shuffle(x, 2).shape == (1, 2, 4, 4)
    np.testing.assert_array_equal(T.pixel_shuffle(x, 1).data, x.data)
    np.testing.assert_array_equal(T.pixel_unshuffle(x, 1).data, x.data)
    y = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert T.pixel_unshuffle(y, 2).shape == (1, 8, 2, 2)
    # sub-pixel layout: channel c*r*r + i*r + j feeds output pixel (h*r+i, w*r+j)
    s = T.pixel_shuffle(x, 2).data
    assert s[0, 1, 3, 2] == x.data[0, 1 * 4 + 1 * 2 + 0, 1, 1]


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_pixel_shuffle_inverse_property(b, c, h, w, r):
    x = np.random.default_rng(b * 100 + c * 10 + h).normal(size=(b, c, h * r, w * r))
    np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(x), r), r).data, x)
    y = np.random.default_rng(7).normal(size=(b, c * r * r, h, w))
    np.testing.assert_array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(y), r), r).data, y)


def test_pixel_shuffle_rejects_bad_channels():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(Tensor(np.ones((1, 3, 2, 2))), 2)
    with pytest.raises(ShapeError):
        T.pixel_unshuffle(Tensor(np.ones((1, 1, 3, 4))), 2)


def test_batch_norm_running_stats(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    n = x.size / 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    frozen = rm.copy()
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_array_equal(rm, frozen)


# -- backward -------------------------------------------------------------------

def test_backward_examples(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    (g,) = grad_of(lambda: T.tsum(x), x)
    np.testing.assert_array_equal(g, np.ones((3, 2)))
    (g,) = grad_of(lambda: T.tsum(x * x), x)
    np.testing.assert_array_equal(g, 2 * x.data)


def test_broadcast_gradient_is_reduced(rng):
    a, b = Tensor(rng.normal(size=(2, 3)), True), Tensor(rng.normal(size=(3,)), True)
    ga, gb = grad_of(lambda: T.tsum(a * b), a, b)
    np.testing.assert_allclose(gb, a.data.sum(axis=0))
    np.testing.assert_allclose(ga, np.broadcast_to(b.data, (2, 3)))


def test_detach_blocks_gradient(rng):
    x = Tensor(rng.normal(size=4), True)
    y = Tensor(rng.normal(size=4), True)
    d = T.detach(x)
    np.testing.assert_array_equal(d.data, x.data)
    gx, gy = grad_of(lambda: T.tsum(T.detach(x) * y), x, y)
    assert gx is None or not np.any(gx)
    np.testing.assert_array_equal(gy, x.data)


def test_gradients_accumulate_across_calls(rng):
    x = Tensor(rng.normal(size=3), True)
    T.backward(T.tsum(x))
    T.backward(T.tsum(x * 2.0))
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_diamond_graph_sums_paths(rng):
    x = Tensor(rng.normal(size=3), True)
    (g,) = grad_of(lambda: (lambda y: T.tsum(y * y + y))(x * 3.0), x)
    np.testing.assert_allclose(g, 18 * x.data + 3)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(2), True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_debug_mode_catches_non_finite():
    with T.debug_mode():
        with pytest.raises(FloatingPointError):
            T.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_requires_scalar(rng):
    with pytest.raises(ShapeError):
        T.backward(Tensor(rng.normal(size=3), True) * 2.0)


def test_intermediate_grad_only_when_retained(rng):
    x = Tensor(rng.normal(size=3), True)
    y = T.exp(x)
    z = T.exp(x).retain_grad()
    T.backward(T.tsum(y) + T.tsum(z))
    assert y.grad is None
    np.testing.assert_array_equal(z.grad, np.ones(3))


def test_take_backward_accumulates_repeats():
    x = Tensor(np.arange(4.0).reshape(4, 1), True)
    (g,) = grad_of(lambda: T.tsum(T.take(x, np.array([0, 0, 3]))), x)
    np.testing.assert_array_equal(g.ravel(), [2, 0, 0, 1])


def test_grad_check_detects_wrong_rule(monkeypatch, rng):
    x = Tensor(rng.normal(size=5), True)
    fn = lambda: T.tsum(T.exp(x) * np.arange(5.0))  # noqa: E731
    assert T.parameters_grad_check(fn, [x]) < 1e-8
    real = T.exp

    def bad_exp(a):
        out = real(a)
        inner = out._backward
        out._backward = lambda g: [-v for v in inner(g)]
        return out

    monkeypatch.setattr(T, "exp", bad_exp)
    assert T.parameters_grad_check(fn, [x]) > 1.0
