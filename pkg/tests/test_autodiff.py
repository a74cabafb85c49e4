import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from smogup import autodiff as ad


def t64(a, grad=True):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(ad.tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_matmul_matches_loops(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((t64(a) @ t64(b)).data, ref, rtol=1e-12)


def test_sum_of_squares_grad():
    x = t64([1.0, 2.0])
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_disconnected_gets_zero():
    x, y = t64([1.0, 2.0]), t64([3.0])
    gx, gy = ad.backward(ad.sum(x * 3.0), [x, y])
    np.testing.assert_array_equal(gx, [3.0, 3.0])
    np.testing.assert_array_equal(gy, [0.0])


def test_non_scalar_backward_rejected():
    with pytest.raises(ad.ShapeError):
        ad.backward(t64([1.0, 2.0]) * 2.0)


def test_nan_names_op():
    with pytest.raises(ad.NumericalError, match="exp"):
        ad.exp(t64([1000.0]))
    with pytest.raises(ad.NumericalError, match="sqrt"):
        ad.sqrt(t64([-1.0]))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError) as err:
        t64(np.ones((2, 3))) + t64(np.ones((4, 5)))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)
    with pytest.raises(ad.ShapeError) as err:
        t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))
    assert "(2, 3)" in str(err.value)


def test_clamp_gradient_zero_outside():
    x = t64([-2.0, 0.5, 3.0])
    ad.backward(ad.sum(ad.clamp(x, -1.0, 1.0) * t64([1.0, 2.0, 3.0], grad=False)))
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0])


def test_clamp_tensor_bound_receives_gradient():
    x, hi = t64([2.0, 0.0]), t64([1.0, 1.0])
    ad.backward(ad.sum(ad.clamp(x, -1.0 * hi, hi)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    np.testing.assert_array_equal(hi.grad, [1.0, 0.0])


def test_precision_toggle():
    assert ad.tensor([1.0]).dtype == np.float32
    with ad.use_dtype(np.float64):
        assert ad.tensor([1.0]).dtype == np.float64
    assert ad.tensor([1.0]).dtype == np.float32


def test_no_grad_builds_no_tape():
    x = t64([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradcheck_sum_of_squares(rng):
    assert ad.gradcheck(lambda x: ad.sum(x * x), t64(rng.normal(size=5))) < 1e-8


def test_gradcheck_rejects_nonfinite():
    with pytest.raises(ad.NumericalError):
        ad.gradcheck(lambda x: ad.sum(ad.sqrt(x)), t64([1e-7]))


def test_composite_softmax_cross(rng):
    w = t64(rng.normal(size=(4, 3)))
    x = t64(rng.normal(size=(5, 4)), grad=False)
    onehot = np.eye(3)[rng.integers(0, 3, 5)]

    def f(w):
        p = ad.softmax(x @ w, axis=1)
        return ad.sum(p * ad.tensor(onehot)) * -1.0

    with ad.use_dtype(np.float64):
        assert ad.gradcheck(f, w) < 1e-8


def _pos(shape):
    return lambda rng: rng.uniform(0.5, 2.0, shape)


def _any(shape):
    return lambda rng: rng.normal(size=shape)


UNARY = {
    "relu": (lambda x: ad.relu(x), _any((3, 4))),
    "softplus": (ad.softplus, _any((3, 4))),
    "exp": (ad.exp, _any((3, 4))),
    "sin": (ad.sin, _any((3, 4))),
    "cos": (ad.cos, _any((3, 4))),
    "sqrt": (ad.sqrt, _pos((3, 4))),
    "softmax0": (lambda x: ad.softmax(x, axis=0), _any((3, 4))),
    "softmax1": (lambda x: ad.softmax(x, axis=1), _any((3, 4))),
    "layer_norm": (ad.layer_norm, _any((3, 4))),
    "sum_axis": (lambda x: ad.sum(x, axis=1), _any((3, 4))),
    "mean_axis": (lambda x: ad.mean(x, axis=0, keepdims=True), _any((3, 4))),
    "reshape": (lambda x: x.reshape(4, 3), _any((3, 4))),
    "transpose": (lambda x: x.transpose(1, 0), _any((3, 4))),
    "gather": (lambda x: ad.gather(x, np.array([[0, 2], [2, 2]])), _any((3, 4))),
    "gather_axis1": (lambda x: ad.gather(x, np.array([3, 0, 3]), axis=1), _any((3, 4))),
    "index": (lambda x: x[1:, ::2], _any((3, 4))),
    "clamp": (lambda x: ad.clamp(x, -0.5, 0.5), _any((3, 4))),
}

BINARY = {
    "add": (ad.add, _any((3, 4)), _any((4,))),
    "sub": (ad.sub, _any((3, 1)), _any((3, 4))),
    "mul": (ad.mul, _any((3, 4)), _any((3, 4))),
    "div": (ad.div, _any((3, 4)), _pos((3, 4))),
    "matmul": (ad.matmul, _any((3, 4)), _any((4, 2))),
    "matmul_batched": (ad.matmul, _any((2, 3, 4)), _any((4, 2))),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), _any((3, 4)), _any((3, 2))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(name):
    fn, gen = UNARY[name]
    rng = np.random.default_rng(7)
    with ad.use_dtype(np.float64):
        for _ in range(10):
            x = t64(gen(rng))
            if name == "clamp":
                # stay off the kinks
                x.data[np.abs(np.abs(x.data) - 0.5) < 1e-3] += 0.01
            if name == "relu":
                x.data[np.abs(x.data) < 1e-3] = 0.1
            weights = rng.normal(size=fn(x).shape)
            err = ad.gradcheck(lambda x: ad.sum(fn(x) * ad.tensor(weights)), x)
            assert err < 1e-6, (name, err)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradcheck(name):
    fn, ga, gb = BINARY[name]
    rng = np.random.default_rng(11)
    with ad.use_dtype(np.float64):
        for _ in range(10):
            a, b = t64(ga(rng)), t64(gb(rng))
            weights = rng.normal(size=fn(a, b).shape)
            err = ad.gradcheck(lambda a, b: ad.sum(fn(a, b) * ad.tensor(weights)), [a, b])
            assert err < 1e-6, (name, err)


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(6, 5))

    def grads():
        t = t64(x)
        ad.backward(ad.sum(ad.softmax(t @ t.transpose(1, 0), axis=1) * ad.gather(t, [0, 0, 1, 2, 3, 5]).sum(axis=1).reshape(-1, 1)))
        return t.grad

    assert np.array_equal(grads(), grads())


def test_gather_concat_roundtrip(rng):
    x = t64(rng.normal(size=(7, 2)))
    perm = rng.permutation(7)
    a, b = perm[:3], perm[3:]
    joined = ad.concat([ad.gather(x, a), ad.gather(x, b)])
    np.testing.assert_array_equal(joined.data, x.data[perm])


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather(t64(np.ones((3, 2))), [3])


def test_div_by_zero():
    with pytest.raises(ad.NumericalError):
        t64([1.0]) / t64([0.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(t64(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(p >= 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-10, 10)))
def test_layer_norm_statistics(x):
    y = ad.layer_norm(t64(x)).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    var = x.var(axis=1)
    np.testing.assert_allclose(y.var(axis=1), var / (var + 1e-5), rtol=1e-9, atol=1e-12)
