import numpy as np
import pytest

from helpers import check_op_grad

from terrasparse import tensor as T
from terrasparse.errors import ContractError, DimensionError
from terrasparse.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_scalar_tensor_keeps_zero_dims():
    assert Tensor(2.0).shape == ()
    assert Tensor(np.float64(3.0)).shape == ()


def test_int_data_is_promoted_to_default_float():
    assert Tensor([1, 2]).dtype == np.float64


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_ops_grad_with_bias_broadcast(op, rng):
    check_op_grad(op, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    check_op_grad(op, rng.normal(size=(2, 3, 4)), rng.normal(size=(4,)))


def test_non_suffix_broadcast_is_rejected():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


@pytest.mark.parametrize("op", [T.relu, T.sigmoid, T.tanh, T.exp, T.softmax_lastdim])
def test_unary_grads(op, rng):
    x = rng.normal(size=(3, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    check_op_grad(op, x)


def test_log_grad(rng):
    check_op_grad(T.log, rng.uniform(0.5, 2.0, size=(4, 3)))


def test_matmul_grads_plain_and_batched(rng):
    check_op_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    check_op_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 2))))


def test_einsum_matches_numpy_and_grads(rng):
    a, b, c = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    y = T.einsum("bi,is,im->bsm", Tensor(a), Tensor(b), Tensor(c))
    np.testing.assert_allclose(y.data, np.einsum("bi,is,im->bsm", a, b, c), atol=1e-12)
    check_op_grad(lambda x, y_, z: T.einsum("bi,is,im->bsm", x, y_, z), a, b, c)


def test_einsum_summed_out_index_grad(rng):
    check_op_grad(lambda x: T.einsum("ij->i", x), rng.normal(size=(3, 4)))


def test_einsum_extent_mismatch():
    with pytest.raises(DimensionError):
        T.einsum("ij,jk->ik", Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_reshape_transpose_take_concat_grads(rng):
    x = rng.normal(size=(2, 3, 4))
    check_op_grad(lambda t: T.reshape(t, (6, 4)), x)
    check_op_grad(lambda t: T.transpose(t, (2, 0, 1)), x)
    check_op_grad(lambda t: T.take(t, (slice(None), 1)), x)
    check_op_grad(lambda a, b: T.concat([a, b], axis=1), x, rng.normal(size=(2, 2, 4)))


def test_sum_and_mean_grads(rng):
    x = rng.normal(size=(3, 4))
    check_op_grad(lambda t: T.sum_(t, axis=0), x)
    check_op_grad(lambda t: T.mean(t, axis=-1), x)


def test_gather_rows_accumulates_repeats(rng):
    w = rng.normal(size=(5, 3))
    idx = np.array([[0, 2], [2, 4]])
    check_op_grad(lambda t: T.gather_rows(t, idx), w)
    with pytest.raises(DimensionError):
        T.gather_rows(Tensor(w), np.array([5]))


def test_gather_columns_grad(rng):
    check_op_grad(lambda t: T.gather_columns(t, np.array([1, 1, 3])), rng.normal(size=(3, 4)))


def test_layernorm_grads_and_normalisation(rng):
    x, g, b = rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)
    check_op_grad(T.layernorm, x, g, b, tol=1e-5)
    y = T.layernorm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-5)


def test_cross_entropy_value_and_grad(rng):
    logits = rng.normal(size=(2, 3, 5))
    tgt = rng.integers(0, 5, size=(2, 3))
    w = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    ce = T.cross_entropy(Tensor(logits), tgt, w).item()
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ref = -sum(lp[i, j, tgt[i, j]] * w[i, j] for i in range(2) for j in range(3)) / w.sum()
    assert ce == pytest.approx(ref, abs=1e-12)
    check_op_grad(lambda t: T.cross_entropy(t, tgt, w), logits)
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(logits), tgt, np.zeros((2, 3)))


def _conv_loops(x, k):
    F = k.shape[0]
    L, S = x.shape[-3], x.shape[-2]
    left = (F - 1) // 2
    out = np.zeros(x.shape[:-1] + (k.shape[3],))
    for l in range(L):
        for s in range(S):
            for a in range(F):
                for b in range(F):
                    li, si = l - (F - 1) + a, s - left + b
                    if 0 <= li < L and 0 <= si < S:
                        out[..., l, s, :] += x[..., li, si, :] @ k[a, b]
    return out


@pytest.mark.parametrize("F", [1, 2, 3])
def test_conv2d_matches_loops_and_grads(F, rng):
    x, k = rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(F, F, 3, 2))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, _conv_loops(x, k), atol=1e-12)
    check_op_grad(T.conv2d, x, k)


def test_conv2d_is_causal_in_length(rng):
    x, k = rng.normal(size=(6, 4, 2)), rng.normal(size=(3, 3, 2, 2))
    y = T.conv2d(Tensor(x), Tensor(k)).data
    x2 = x.copy()
    x2[4:] += 10.0
    y2 = T.conv2d(Tensor(x2), Tensor(k)).data
    np.testing.assert_array_equal(y[:4], y2[:4])


def test_linear_scan_loop_and_grad(rng):
    f, c = rng.uniform(0.1, 0.9, size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    c0 = rng.normal(size=(2, 3))
    y = T.linear_scan(Tensor(f), Tensor(c), c0).data
    prev = c0
    for t in range(5):
        prev = f[:, t] * prev + (1 - f[:, t]) * c[:, t]
        np.testing.assert_allclose(y[:, t], prev, atol=1e-14)
    check_op_grad(lambda a, b: T.linear_scan(a, b, c0), f, c)


def test_straight_through_value_and_surrogate_grad(rng):
    s = Tensor(rng.normal(size=(3,)), requires_grad=True)
    v = np.array([1.0, 0.0, 0.0])
    y = T.straight_through(v, s)
    np.testing.assert_array_equal(y.data, v)
    g = T.backward(T.sum_(T.mul(y, Tensor(np.array([1.0, 2.0, 3.0])))))
    np.testing.assert_array_equal(g[s], [1.0, 2.0, 3.0])


def test_dropout_mask_replay(rng):
    x = Tensor(np.ones((100,)))
    y, mask = T.dropout(x, 0.5, rng)
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    y2, _ = T.dropout(x, 0.5, None, mask=mask)
    np.testing.assert_array_equal(y.data, y2.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.sum_(T.mul(x, 2.0))
    assert not y.requires_grad
    assert T.grad_enabled()


def test_shared_subexpression_grads_accumulate():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.mul(x, x)
    z = T.sum_(T.add(y, y))
    assert T.backward(z)[x][0] == pytest.approx(8.0)


def test_deep_chain_backward_is_iterative():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.add(y, 0.0)
    assert T.backward(T.sum_(y))[x][0] == 1.0
