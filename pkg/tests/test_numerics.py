import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvis import numerics as nx
from polyvis.numerics import NonFiniteError, ParamTensor, ShapeError, TraceError


def P(a, name="p", group="fusion", frozen=False):
    return ParamTensor(np.asarray(a, dtype=np.float64), name, group, frozen)


def numeric_grad(f, p, h=1e-6):
    g = np.zeros_like(p.data)
    flat, gf = p.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        up = float(f().data)
        flat[i] = o - h
        down = float(f().data)
        flat[i] = o
        gf[i] = (up - down) / (2 * h)
    return g


def check(f, *params, tol=1e-6):
    for p in params:
        p.zero_grad()
    nx.backward(f())
    for p in params:
        np.testing.assert_allclose(p.grad, numeric_grad(f, p), rtol=tol, atol=tol)


# linear_forward


def test_linear_identity():
    out = nx.linear_forward(np.array([[1.0, 2.0]]), P(np.eye(2)), P(np.zeros((1, 2))))
    assert out.data.tolist() == [[1.0, 2.0]]


def test_linear_hand_oracle():
    out = nx.linear_forward(np.eye(2), P([[3.0], [5.0]]), P([[1.0]]))
    assert out.data.tolist() == [[4.0], [6.0]]


def test_linear_rejects_nan_and_bad_shapes():
    with pytest.raises(NonFiniteError):
        nx.linear_forward(np.array([[np.nan, 1.0]]), P(np.eye(2)), P(np.zeros((1, 2))))
    with pytest.raises(ShapeError):
        nx.linear_forward(np.ones((1, 3)), P(np.eye(2)), P(np.zeros((1, 2))))


# attention


def test_attention_single_key():
    v = np.array([[2.0, -1.0]])
    out, w = nx.attention_forward(np.ones((1, 2)), np.ones((1, 2)), v, np.ones((1, 1), bool))
    assert w.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(out.data, v)


def test_attention_equal_logits_uniform():
    _, w = nx.attention_forward(np.zeros((1, 3)), np.ones((4, 3)), np.eye(4, 3), np.ones((1, 4), bool))
    np.testing.assert_allclose(w.data, 0.25)


def test_attention_masked_key_is_exact_zero():
    _, w = nx.attention_forward(np.ones((1, 2)), np.array([[1.0, 0], [5.0, 5.0]]), np.eye(2), np.array([[True, False]]))
    assert w.data.tolist() == [[1.0, 0.0]]


def test_attention_empty_row_is_an_error():
    with pytest.raises(ValueError):
        nx.attention_forward(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.array([[True, True], [False, False]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_rows_stochastic(q, k, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((q, k)) < 0.6
    mask[np.arange(q), rng.integers(0, k, q)] = True
    _, w = nx.attention_forward(rng.standard_normal((q, 3)) * 4, rng.standard_normal((k, 3)) * 4, rng.standard_normal((k, 3)), mask)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    assert np.all(w.data[~mask] == 0.0)


# cross entropy


def test_cross_entropy_uniform():
    loss = nx.cross_entropy(np.zeros((1, 4)), np.array([2]))
    assert math.isclose(float(loss.data), math.log(4), rel_tol=1e-12)


def test_cross_entropy_saturates():
    logits = np.zeros((1, 5))
    logits[0, 3] = 20.0
    assert float(nx.cross_entropy(logits, np.array([3])).data) < 1e-8


def test_cross_entropy_ignore():
    logits = np.array([[0.0, 1.0, 2.0], [3.0, 0.0, 0.0]])
    both = nx.cross_entropy(logits, np.array([1, 9]), ignore=9)
    one = nx.cross_entropy(logits[:1], np.array([1]))
    assert float(both.data) == pytest.approx(float(one.data), rel=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        nx.cross_entropy(np.zeros((2, 3)), np.array([1, 1]), ignore=1)
    with pytest.raises(ValueError):
        nx.cross_entropy(np.zeros((1, 3)), np.array([3]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_cross_entropy_nonnegative(n, V, seed):
    rng = np.random.default_rng(seed)
    loss = nx.cross_entropy(rng.standard_normal((n, V)) * 10, rng.integers(0, V, n))
    assert float(loss.data) >= 0.0


# backward


def test_backward_constant_loss_leaves_zero_grads():
    W = P(np.ones((2, 2)))
    nx.backward(nx.sum_all(nx.as_tensor(np.ones((2, 2)))))
    assert np.all(W.grad == 0)


def test_backward_sum_gives_ones():
    W = P(np.arange(4.0).reshape(2, 2))
    nx.backward(nx.sum_all(W))
    np.testing.assert_array_equal(W.grad, np.ones((2, 2)))


def test_backward_contract_errors():
    W = P(np.ones((2, 2)))
    with pytest.raises(TraceError):
        nx.backward(np.ones(1))
    with pytest.raises(TraceError):
        nx.backward(nx.mul(W, 2.0))
    with pytest.raises(TraceError):
        nx.backward(nx.as_tensor(3.0))


def test_frozen_params_still_get_grads():
    W = P(np.ones((2, 2)), frozen=True)
    nx.backward(nx.sum_all(nx.mul(W, 3.0)))
    np.testing.assert_array_equal(W.grad, 3 * np.ones((2, 2)))


def test_skip_frozen_prunes_frozen_branches():
    W, U = P(np.ones((2, 2)), "w", frozen=True), P(np.ones((2, 2)), "u")
    with nx.skip_frozen():
        nx.backward(nx.sum_all(nx.mul(W, U)))
    assert np.all(W.grad == 0)
    np.testing.assert_array_equal(U.grad, np.ones((2, 2)))


def test_no_grad_records_nothing():
    W = P(np.ones((2, 2)))
    with nx.no_grad():
        out = nx.matmul(W, W)
    assert out._parents == () and out._backward is None


def test_grads_accumulate_until_zeroed():
    W = P(np.ones(3))
    nx.backward(nx.sum_all(W))
    nx.backward(nx.sum_all(W))
    np.testing.assert_array_equal(W.grad, 2 * np.ones(3))
    W.zero_grad()
    assert np.all(W.grad == 0)


def test_float32_stays_float32():
    x = ParamTensor(np.ones((2, 3), np.float32), "x", "fusion")
    for out in (x * 0.5, x + np.float64(1.0), nx.silu(x), nx.matmul(x, x.T)):
        assert out.dtype == np.float32


def test_nonfinite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        nx.mul(P([1e308]), 1e10)


def test_take_rows_bounds():
    with pytest.raises(IndexError):
        nx.take_rows(P(np.ones((3, 2))), np.array([3]))


def test_param_group_validated():
    with pytest.raises(ValueError):
        ParamTensor(np.ones(2), "x", "bogus")


# finite differences on every op


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a = P(rng.standard_normal((2, 3, 4)), "a")
    w = P(rng.standard_normal((4, 5)), "w")
    b = P(rng.standard_normal((1, 5)), "b")
    g = P(1 + 0.1 * rng.standard_normal((1, 4)), "g")
    t = P(rng.integers(0, 4, (2, 3)).astype(float), "unused")
    targets = rng.integers(0, 5, (2, 3))
    mask = np.tril(np.ones((3, 3), bool))

    def f():
        h = nx.layer_norm(a, g, nx.as_tensor(np.zeros((1, 4))))
        h = nx.silu(nx.linear_forward(h, w, b))  # [2,3,5]
        s = nx.matmul(h, nx.swapaxes(h, -1, -2))
        p = nx.masked_softmax(s, mask)
        z = nx.matmul(p, h)
        z = nx.concat([z, nx.slice_axis(z, 0, 1)], axis=-2)
        z = nx.reshape(nx.transpose(z, (0, 2, 1)), (2, 4, 5))
        return nx.add(nx.cross_entropy(nx.slice_axis(z, 0, 3), targets), nx.mean_all(nx.mul(z, z)))

    check(f, a, w, b, g)


def test_take_rows_gradient_hits_only_referenced_rows():
    table = P(np.random.default_rng(0).standard_normal((5, 3)))
    idx = np.array([1, 1, 3])
    nx.backward(nx.sum_all(nx.take_rows(table, idx)))
    np.testing.assert_array_equal(table.grad[[0, 2, 4]], 0)
    np.testing.assert_array_equal(table.grad[1], 2 * np.ones(3))


def test_multihead_attention_gradients():
    rng = np.random.default_rng(1)
    x = P(rng.standard_normal((3, 4)), "x")
    ws = [P(rng.standard_normal((4, 4)) * 0.5, f"w{i}") for i in range(4)]
    mask = np.tril(np.ones((3, 3), bool))
    check(lambda: nx.sum_all(nx.mul(nx.multihead_attention(x, x, *ws, 2, mask)[0], 0.3)), x, *ws)


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((3, 4)), P(rng.standard_normal((4, 4)))
    a = nx.silu(nx.linear_forward(x, w)).data
    b = nx.silu(nx.linear_forward(x, w)).data
    assert a.tobytes() == b.tobytes()
