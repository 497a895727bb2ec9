import math

import numpy as np
import pytest

from distilkit import tensor as T
from distilkit.tensor import ShapeError, Tensor, backward, grad_check, no_grad


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    proj = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(proj.data, [[5, 6], [0, 0]])
    prod = T.matmul(a, Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(prod.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(T.softmax(Tensor([1000.0, 1000.0, 1000.0])).data, [1 / 3] * 3)
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = np.random.default_rng(0).normal(size=(5, 7)) * 10
    p = T.softmax(Tensor(x)).data
    assert np.abs(p.sum(axis=-1) - 1).max() <= 1e-9
    assert np.abs(T.softmax(Tensor(x + 123.4)).data - p).max() <= 1e-9


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(T.layer_norm(Tensor([1.0, 1.0, 1.0]), ones, zeros, 1e-12).data, 0)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.allclose(T.layer_norm(Tensor([-1.0, 1.0]), g, b, 1e-12).data, [-1, 1])
    assert np.allclose(T.layer_norm(Tensor([0.0, 2.0]), g, Tensor([5.0, 5.0]), 1e-12).data,
                       [4, 6])


def test_gelu_examples():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(1.0)).item() - 0.841345) <= 1e-5
    assert abs(T.gelu(Tensor(20.0)).item() - 20.0) < 1e-9


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
    backward(T.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_dot():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_cross_entropy_matches_p_minus_onehot():
    z = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    backward(T.neg(T.pick(T.log_softmax(z.reshape(1, 3)), [2]).reshape(())))
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(z.grad, p - np.array([0, 0, 1.0]), atol=1e-12)
    rep = grad_check(lambda x: T.neg(T.sum(T.pick(T.log_softmax(x.reshape(1, 3)), [2]))),
                     Tensor(z.data.copy(), requires_grad=True), 1e-6, 1e-4)
    assert rep.passed


def test_shared_subexpression_accumulates():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = T.mul(x, x)
    backward(T.add(T.sum(y), T.sum(y)))
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, x))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.sum(T.mul(x, x))
    assert not y.requires_grad


def test_grad_check_linear():
    # exact where x +- step is representable; otherwise only rounding remains
    assert grad_check(T.sum, Tensor(np.zeros((3, 4)), True)).max_rel_error == 0.0
    rep = grad_check(T.sum, Tensor(np.random.default_rng(2).normal(size=(3, 4)), True))
    assert rep.max_rel_error < 1e-9 and rep.passed


def test_grad_check_catches_wrong_gradient():
    def bad(x):
        # forward is x*x but the recorded gradient is that of 3x
        return T.sum(T.add(T.scale(x, 3.0), T.sub(T.mul(x, x), T.scale(x, 3.0)).detach()))
    assert not grad_check(bad, Tensor(np.array([1.0, 2.0]), True)).passed


def test_masked_softmax_row_all_masked_is_zero_not_nan():
    x = T.masked_fill(Tensor(np.zeros((1, 3))), np.zeros((1, 3), bool), -np.inf)
    p = T.softmax(x).data
    assert np.array_equal(p, np.zeros((1, 3)))


def test_cosine_similarity_zero_norm_is_zero():
    s = T.cosine_similarity(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))))
    assert s.data.tolist() == [0.0]
