"""Autodiff engine: gradients against the finite-difference oracle, graph
semantics, and shape contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grad
from moqe import tensor as T
from moqe.errors import ContractError, DataError, ShapeError
from moqe.tensor import Tensor, allocation_meter, no_grad

RNG = np.random.default_rng(7)

# fixed mixing constants so every build is a deterministic function of x
C34 = Tensor(RNG.normal(size=(3, 4)))
C43 = Tensor(RNG.normal(size=(4, 3)))
C42 = Tensor(RNG.normal(size=(4, 2)))


# -- gradient checks ------------------------------------------------------------


@pytest.mark.parametrize("build", [
    lambda x: T.tsum(x + C34),
    lambda x: T.tsum(x - C34),
    lambda x: T.tsum(x * C34),
    lambda x: T.tsum(-x),
    lambda x: T.tsum(x * x * x),
    lambda x: T.tsum(T.relu(x)),
    lambda x: T.tsum(T.sigmoid(x)),
    lambda x: T.tmean(x),
    lambda x: T.tsum(T.tmean(x, axis=1)),
    lambda x: T.tsum(T.tsum(x, axis=0, keepdims=True) * 2.0),
    lambda x: T.tsum(T.reshape(x, (4, 3)) * C43),
    lambda x: T.tsum(T.transpose(x, (1, 0)) * C43),
    lambda x: T.tsum(T.softmax(x) * C34),
    lambda x: T.tsum(T.log_softmax(x) * C34),
])
def test_elementwise_and_reduction_grads(build):
    check_grad(build, RNG.normal(size=(3, 4)))


def test_pow_grad():
    check_grad(lambda x: T.tsum(x ** 2.0), RNG.normal(size=(3, 3)))
    check_grad(lambda x: T.tsum(x ** 0.5), RNG.uniform(0.5, 2.0, size=(3, 3)))


def test_broadcast_add_grad():
    b = Tensor(RNG.normal(size=(4,)))
    check_grad(lambda x: T.tsum((x + b) * (x + b)), RNG.normal(size=(3, 4)))


def test_matmul_grads_both_sides():
    a0 = RNG.normal(size=(3, 5))
    b0 = RNG.normal(size=(5, 2))
    check_grad(lambda a: T.tsum(T.matmul(a, Tensor(b0))), a0)
    check_grad(lambda b: T.tsum(T.matmul(Tensor(a0), b)), b0)


def test_batched_matmul_grad():
    b0 = RNG.normal(size=(4, 2))
    check_grad(lambda a: T.tsum(T.matmul(a, Tensor(b0)) ** 2.0),
               RNG.normal(size=(2, 3, 4)))


def test_cross_entropy_grad():
    labels = np.array([0, 2, 1, 2])
    check_grad(lambda x: T.cross_entropy(x, labels), RNG.normal(size=(4, 3)))


def test_embedding_grad():
    ids = np.array([1, 0, 1, 2])
    w = Tensor(RNG.normal(size=(4, 2)))
    check_grad(lambda t: T.tsum(T.embedding(t, ids) * C42),
               RNG.normal(size=(4, 2)))


def test_conv2d_grads():
    x0 = RNG.normal(size=(2, 2, 5, 5))
    w0 = RNG.normal(size=(3, 2, 3, 3))
    b0 = RNG.normal(size=(3,))
    check_grad(lambda x: T.tsum(T.conv2d(x, Tensor(w0), bias=Tensor(b0),
                                         stride=2, padding=1) ** 2.0), x0)
    check_grad(lambda w: T.tsum(T.conv2d(Tensor(x0), w, bias=Tensor(b0),
                                         stride=1, padding=1) ** 2.0), w0)
    check_grad(lambda b: T.tsum(T.conv2d(Tensor(x0), Tensor(w0), bias=b) ** 2.0), b0)


# -- graph semantics ------------------------------------------------------------


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (t * 2.0).backward()


def test_backward_accumulates_until_zeroed():
    t = Tensor(np.ones(3), requires_grad=True)
    T.tsum(t * 2.0).backward()
    first = t.grad.copy()
    T.tsum(t * 2.0).backward()
    assert np.allclose(t.grad, 2 * first)
    t.zero_grad()
    assert t.grad is None


def test_no_grad_blocks_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = T.tsum(t * 3.0)
    assert not out.requires_grad and out._prev == ()


def test_detach_breaks_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    d = (t * 2.0).detach()
    assert not d.requires_grad
    T.tsum(d * t).backward()
    assert np.allclose(t.grad, 2.0)


def test_diamond_graph_grad_counts_both_paths():
    t = Tensor(np.array([3.0]), requires_grad=True)
    y = t * t + t * 2.0  # dy/dt = 2t + 2
    T.tsum(y).backward()
    assert np.allclose(t.grad, [8.0])


# -- contracts -----------------------------------------------------------------


def test_elementwise_strict_shapes():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.elementwise("add", a, Tensor(np.ones((3, 2))))
    with pytest.raises(ContractError):
        T.elementwise("frobnicate", a, a)
    out = T.elementwise("scale", a, 2.5)
    assert np.allclose(out.data, 2.5)
    with pytest.raises(ShapeError):
        T.elementwise("scale", a, Tensor(np.ones(1)))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_cross_entropy_contracts():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        T.cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ShapeError):
        T.cross_entropy(logits, np.array([0]))


def test_embedding_index_check():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((4, 2))), np.array([4]))


def test_assert_finite():
    with pytest.raises(DataError):
        Tensor(np.array([np.nan])).assert_finite()


def test_allocation_meter_counts_bytes():
    with allocation_meter() as m:
        Tensor(np.zeros((10, 10)))
    assert m.bytes == 800


# -- softmax / cross-entropy values -----------------------------------------------


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.normal(size=(5, 7))
    p = T.softmax(Tensor(x)).data
    assert np.allclose(p.sum(axis=-1), 1.0)
    p2 = T.softmax(Tensor(x + 100.0)).data
    assert np.allclose(p, p2)


def test_cross_entropy_matches_manual():
    x = RNG.normal(size=(4, 3))
    labels = np.array([2, 0, 1, 1])
    got = T.cross_entropy(Tensor(x), labels).item()
    p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(4), labels]).mean()
    assert abs(got - want) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 10 ** 6))
def test_unbroadcast_row_vector_grad(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cols))
    other = rng.normal(size=(rows, cols))
    t = Tensor(x, requires_grad=True)
    T.tsum((t + Tensor(other)) * Tensor(other)).backward()
    assert t.grad.shape == (1, cols)
    assert np.allclose(t.grad, other.sum(axis=0, keepdims=True))
