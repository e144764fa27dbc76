import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqprog import tensor as T
from seqprog.errors import DimensionError, GraphError, NonFiniteError
from seqprog.tensor import Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() == np.float32


def test_matmul_examples(f64):
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_backward_formula(f64, rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    ((a @ b) * Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_conv1d_examples(f64):
    x = Tensor([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(T.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0])).data, [[1, 2, 3]])
    np.testing.assert_array_equal(T.conv1d(x, Tensor([[[1.0, 1.0, 1.0]]]), Tensor([0.0])).data, [[3, 6, 5]])


def test_conv1d_matches_naive_loop(f64, rng):
    x = rng.standard_normal((2, 3, 7))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    out = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    pad = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 7))
    for n in range(2):
        for o in range(4):
            for t in range(7):
                ref[n, o, t] = b[o] + np.sum(w[o] * pad[n, :, t:t + 5])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv1d(Tensor(np.ones((2, 5))), Tensor(np.ones((1, 3, 3))))


def test_outer_accumulate_examples(f64, rng):
    out = T.outer_accumulate(Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[0, 1], [0, 0]])
    for m in range(1, 9):
        k, c = rng.standard_normal((4, m)), rng.standard_normal((4, m))
        out = T.outer_accumulate(Tensor(k), Tensor(c)).data
        assert out.shape == (4, 4)
        brute = sum(np.outer(k[:, i], c[:, i]) for i in range(m))
        np.testing.assert_allclose(out, brute, rtol=0, atol=1e-12)
        perm = rng.permutation(m)
        np.testing.assert_allclose(T.outer_accumulate(Tensor(k[:, perm]), Tensor(c[:, perm])).data, out, atol=1e-12)


def test_cross_entropy_examples(f64):
    assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert T.cross_entropy(Tensor([100.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor([0.0, 0.0]), 2)


def test_cross_entropy_gradient_is_softmax_minus_onehot(f64, rng):
    z = leaf(rng.standard_normal(5))
    T.cross_entropy(z, 3).backward()
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    np.testing.assert_allclose(z.grad, p - np.eye(5)[3], atol=1e-14)


def test_backward_examples(f64, rng):
    x = leaf(rng.standard_normal((2, 3)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = leaf(rng.standard_normal(4))
    T.scale(T.square(y).sum(), 0.5).backward()
    np.testing.assert_allclose(y.grad, y.data)


def test_second_backward_is_an_error(f64):
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_is_an_error(f64):
    with pytest.raises(GraphError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_nonfinite_forward_names_op():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor([0.0]))


def test_no_grad_builds_no_graph(f64):
    x = leaf([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_normalises(f64, rng):
    x = Tensor(rng.standard_normal((3, 8)) * 5 + 2)
    y = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-6)


def test_getitem_repeated_indices_accumulate(f64):
    x = leaf([1.0, 2.0, 3.0])
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1])


def _doubled_sum(x):
    out = T.sum_(x)
    true_backward = out._backward
    out._backward = lambda g: tuple(2.0 * p for p in true_backward(g))
    return out


def test_grad_check_detects_a_wrong_gradient(f64, rng):
    x = leaf(rng.standard_normal(3))
    assert T.grad_check(lambda: T.sum_(x), [x]) < 1e-6
    with pytest.raises(AssertionError):
        T.grad_check(lambda: _doubled_sum(x), [x])


def test_forward_is_deterministic(rng):
    a = rng.standard_normal((64, 64)).astype(np.float32)
    with T.deterministic_mode():
        r1 = (Tensor(a) @ Tensor(a)).data
        r2 = (Tensor(a) @ Tensor(a)).data
    assert r1.tobytes() == r2.tobytes()
