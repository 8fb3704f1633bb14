import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safe_fl import tensor as T
from safe_fl.tensor import GraphError, NonFiniteError, Tensor

from helpers import check_op, numeric_grad

rng = np.random.default_rng(0)


def randn(*shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("name,build,shapes", [
    ("add_broadcast", lambda a, b: T.add(a, b), [(3, 4), (1, 4)]),
    ("mul_broadcast", lambda a, b: T.mul(a, b), [(2, 3, 4), (3, 1)]),
    ("matmul", T.matmul, [(3, 5), (5, 2)]),
    ("linear", T.linear, [(4, 3), (2, 3), (2,)]),
    ("sigmoid", T.sigmoid, [(5, 3)]),
    ("exp", T.exp, [(4,)]),
    ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    ("softmax", T.softmax, [(3, 5)]),
    ("log_softmax", T.log_softmax, [(3, 5)]),
    ("global_avg_pool", T.global_avg_pool, [(2, 3, 4, 4)]),
    ("stack", lambda a, b: T.stack([a, b]), [(3,), (3,)]),
    ("concat_channels", lambda a, b: T.concat_channels([a, b]), [(2, 1, 3, 3), (2, 2, 3, 3)]),
])
def test_op_gradients_match_finite_differences(name, build, shapes):
    check_op(build, *[randn(*s) for s in shapes])


def test_log_gradient():
    check_op(T.log, rng.uniform(0.5, 2.0, size=(3, 4)))


def test_relu_gradient_away_from_kink():
    x = randn(4, 5)
    x[np.abs(x) < 0.05] = 0.3
    check_op(T.relu, x)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True, name="x")
    assert np.all(T.backward(T.sum_all(T.relu(x)))["x"] == 0)


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 5), (1, 1, 5), (2, 1, 6), (2, 1, 5), (2, 0, 7)])
def test_conv2d_gradient(stride, padding, size):
    check_op(lambda x, k: T.conv2d(x, k, stride, padding), randn(2, 3, size, size), randn(4, 3, 3, 3))


def test_conv2d_matches_direct_loop():
    x, k = randn(2, 3, 6, 6), randn(4, 3, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(randn(1, 1, 2, 2)), Tensor(randn(1, 1, 3, 3)))


def test_group_norm_gradient_and_statistics():
    check_op(lambda x, g, b: T.group_norm(x, 2, g, b), randn(2, 4, 3, 3), randn(4), randn(4))
    y = T.group_norm(Tensor(randn(3, 4, 5, 5) * 7 + 2), 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    groups = y.reshape(3, 2, -1)
    np.testing.assert_allclose(groups.mean(axis=2), 0, atol=1e-10)
    np.testing.assert_allclose(groups.var(axis=2), 1, atol=1e-3)


def test_cross_entropy_matches_formula():
    logits = randn(5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = -np.log(p[np.arange(5), labels]).mean()
    assert T.cross_entropy_logits(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-12)
    assert T.cross_entropy(T.softmax(Tensor(logits)), labels).item() == pytest.approx(expected, abs=1e-12)
    check_op(lambda z: T.cross_entropy_logits(z, labels), logits)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(IndexError):
        T.cross_entropy_logits(Tensor(randn(2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        T.cross_entropy_logits(Tensor(randn(2, 3)), np.array([0]))


def test_straight_through_forward_hard_backward_soft():
    z = Tensor(randn(6), requires_grad=True, name="z")
    soft = T.sigmoid(z)
    hard = (soft.data >= 0.5).astype(float)
    out = T.straight_through(soft, hard)
    np.testing.assert_array_equal(out.data, hard)
    g = T.backward(T.sum_all(out))["z"]
    s = 1 / (1 + np.exp(-z.data))
    np.testing.assert_allclose(g, s * (1 - s), atol=1e-14)


def test_detach_blocks_gradient():
    x = Tensor(randn(3), requires_grad=True, name="x")
    g = T.backward(T.sum_all(T.add(T.mul(x, 2.0), T.detach(T.mul(x, x)))))["x"]
    np.testing.assert_allclose(g, 2.0)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True, name="x")
    y = T.mul(x, x)
    g = T.backward(T.sum_all(T.add(y, y)))["x"]
    np.testing.assert_allclose(g, 4 * x.data)


def test_backward_errors():
    x = Tensor(randn(3), requires_grad=True, name="x")
    with pytest.raises(GraphError):
        T.backward(T.mul(x, 2.0))
    loss = T.sum_all(x)
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(T.sum_all(Tensor(randn(3))))


def test_graph_released_after_backward():
    x = Tensor(randn(3), requires_grad=True, name="x")
    mid = T.mul(x, 3.0)
    T.backward(T.sum_all(mid))
    assert mid._parents == () and not mid.requires_grad


def test_non_finite_detected_with_op_name():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_unnamed_leaf_gets_id_key():
    x = Tensor(randn(2), requires_grad=True)
    grads = T.backward(T.sum_all(x))
    assert list(grads) == [f"tensor_{id(x)}"]


def test_backward_is_deterministic():
    a = randn(3, 4)

    def run():
        x = Tensor(a.copy(), requires_grad=True, name="x")
        return T.backward(T.sum_all(T.softmax(T.matmul(x, Tensor(a.T)))))["x"]

    np.testing.assert_array_equal(run(), run())


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite))
def test_softmax_rows_are_distributions(z):
    p = T.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(z)).data), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_sigmoid_is_stable_and_bounded(z):
    s = T.sigmoid(Tensor(z * 20)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + T.sigmoid(Tensor(-z * 20)).data, 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(3, 6))
def test_add_mul_linearity_of_gradients(seed, rows, cols):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(rows, cols)), r.normal(size=(rows, cols))
    x = Tensor(a, requires_grad=True, name="x")
    g = T.backward(T.sum_all(T.add(T.mul(x, b), T.scale(x, 3.0))))["x"]
    np.testing.assert_allclose(g, b + 3.0, atol=1e-14)


def test_numeric_grad_helper_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(numeric_grad(lambda: float((x ** 2).sum()), x), 2 * x, atol=1e-8)
