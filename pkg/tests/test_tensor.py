"""Engine tests: op semantics, gradient checks, numerical properties."""

import numpy as np
import pytest

from fastinject import tensor as T
from fastinject.errors import NumericError, ShapeError
from fastinject.tensor import (NEG_INF, Tensor, attention_readout, backward,
                               check_gradients, conv1d, dropout, embedding,
                               ffn_block, layer_norm, linear, log_softmax_rows,
                               matmul, mean, mse, mul, no_grad, relu, scale,
                               self_attention, softmax_rows, take_per_row,
                               transpose, tsum)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2))
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_expansion(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        expected = naive_matmul(np.array([[1.0, 2.0], [3.0, 4.0]]),
                                np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])
        np.testing.assert_array_equal(out.data, expected)

    def test_zeros_annihilate(self, rng):
        out = matmul(Tensor(np.zeros((3, 4))), Tensor(rng.standard_normal((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_matches_naive_oracle(self, rng):
        for _ in range(20):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data,
                                       naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


class TestSoftmax:
    def test_uniform_under_equal_logits(self):
        out = softmax_rows(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((6, 9)) * 10
        out = softmax_rows(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 5))
        a = softmax_rows(Tensor(x)).data
        b = softmax_rows(Tensor(x + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_nan_rejected(self):
        bad = np.zeros((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(NumericError):
            softmax_rows(Tensor(bad))


class TestMse:
    def test_identical_inputs(self, rng):
        x = rng.standard_normal((3, 4))
        assert mse(Tensor(x), Tensor(x)).item() == 0.0

    def test_constant_offset(self):
        assert mse(Tensor([0.0, 0.0]), Tensor([2.0, 2.0])).item() == 4.0

    def test_hand_value(self):
        out = mse(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.item(), 5.0 / 3.0, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError) as err:
            mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        assert "same" in str(err.value)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_squared_error_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        backward(mse(x, Tensor([0.0])))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_root_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(mul(x, x))

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        root = tsum(x)
        backward(root)
        first = x.grad.copy()
        backward(root)
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_reachable_grads_populated(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        y = relu(x)
        z = mean(y)
        backward(z)
        assert x.grad is not None and y.grad is not None


def _op_cases(rng):
    w = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal(3))
    g = Tensor(rng.standard_normal(4))
    bias = Tensor(rng.standard_normal(4))
    other = Tensor(rng.standard_normal((5, 4)))
    cw = Tensor(rng.standard_normal((3, 4, 6)))
    cb = Tensor(rng.standard_normal(6))
    heads = [tuple(Tensor(rng.standard_normal(s) / 2) for s in
                   [(4, 2), (4, 2), (4, 2), (2, 4)]) for _ in range(2)]
    ids = [0, 2, 1, 3, 2]
    return [
        ("add", lambda x: tsum(T.add(x, other))),
        ("sub", lambda x: tsum(T.sub(x, other))),
        ("mul", lambda x: tsum(mul(x, other))),
        ("scale", lambda x: tsum(scale(x, -1.7))),
        ("matmul", lambda x: tsum(matmul(x, w))),
        ("transpose", lambda x: tsum(matmul(transpose(x), other))),
        ("linear", lambda x: tsum(linear(x, w, b))),
        ("sum", tsum),
        ("mean", mean),
        ("mse", lambda x: mse(x, other)),
        ("softmax", lambda x: tsum(matmul(softmax_rows(x), w))),
        ("log_softmax", lambda x: tsum(matmul(log_softmax_rows(x), w))),
        ("relu", lambda x: tsum(relu(x))),
        ("layer_norm", lambda x: tsum(layer_norm(x, g, bias))),
        ("conv1d_s1", lambda x: tsum(conv1d(x, cw, cb, 1))),
        ("conv1d_s2", lambda x: tsum(conv1d(x, cw, cb, 2))),
        ("take_per_row", lambda x: tsum(take_per_row(x, [1, 0, 3, 2, 1]))),
        ("self_attention", lambda x: mean(self_attention(x, heads))),
        ("attention_readout", lambda x: mean(attention_readout(x, other))),
        ("ffn", lambda x: mean(ffn_block(x, w, b, transpose(w), bias))),
        ("embedding", None, ids),
    ]


def test_gradient_checks_all_ops():
    """Every differentiable op agrees with central differences on random
    inputs (10 draws each, double precision)."""
    for trial in range(10):
        rng = np.random.default_rng(1000 + trial)
        cases = _op_cases(rng)
        x = Tensor(rng.standard_normal((5, 4)))
        for case in cases:
            name, f = case[0], case[1]
            if name == "embedding":
                table = Tensor(rng.standard_normal((6, 3)))
                err = check_gradients(lambda t: tsum(embedding(t, case[2])), table)
            else:
                err = check_gradients(f, x)
            assert err < 1e-4, f"{name} gradient error {err} on trial {trial}"


class TestDropout:
    def test_eval_mode_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 4)))
        out = dropout(x, 0.5, rng, train=False)
        assert out is x

    def test_zero_rate_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 4)))
        assert dropout(x, 0.0, rng, train=True) is x

    def test_seeded_determinism(self, rng):
        x = Tensor(rng.standard_normal((8, 8)))
        a = dropout(x, 0.3, np.random.default_rng(7), train=True).data
        b = dropout(x, 0.3, np.random.default_rng(7), train=True).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_uses_mask(self):
        x = Tensor(np.ones((6, 6)), requires_grad=True)
        out = dropout(x, 0.4, np.random.default_rng(3), train=True)
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad, (out.data != 0) / 0.6)


class TestConv:
    @pytest.mark.parametrize("stride", [1, 2, 4])
    def test_output_length_is_ceil(self, rng, stride):
        w = Tensor(rng.standard_normal((3, 2, 2)))
        b = Tensor(np.zeros(2))
        for t in range(1, 65):
            out = conv1d(Tensor(rng.standard_normal((t, 2))), w, b, stride)
            assert out.shape[0] == -(-t // stride)


class TestEmbedding:
    def test_one_hot_table_propagates_rows(self):
        table = Tensor(np.eye(4))
        out = embedding(table, [2, 0, 2])
        np.testing.assert_array_equal(out.data, np.eye(4)[[2, 0, 2]])

    def test_scatter_add_gradient(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        out = embedding(table, [1, 1, 0])
        backward(tsum(out))
        np.testing.assert_array_equal(table.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            embedding(Tensor(np.zeros((3, 2))), [3])


def test_no_grad_skips_graph(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with no_grad():
        out = mul(x, x)
    assert not out.requires_grad and out._backward is None


def test_check_gradients_known_failure():
    """A deliberately wrong gradient is caught by the checker."""
    def bad(x):
        out = T.custom_op(x.data.sum(), (x,),
                          lambda o: lambda: x._accumulate(np.zeros_like(x.data)))
        return out
    err = check_gradients(bad, Tensor(np.ones(3)))
    assert err > 0.5


def test_neg_inf_sentinel_behaves():
    assert np.exp(NEG_INF) == 0.0
    assert T.logaddexp(NEG_INF, -1.5) == -1.5
    assert T.logsumexp([NEG_INF, NEG_INF]) == NEG_INF
