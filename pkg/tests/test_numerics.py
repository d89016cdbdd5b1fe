import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mimmt import numerics as nx
from mimmt.numerics import Tensor


# one scalar-valued probe per op; a random weighting keeps every output element in play
def _weighted(out, w):
    return nx.tensor_sum(nx.mul(out, Tensor(w)))


RNG = np.random.default_rng(1234)
W2 = RNG.normal(size=(3, 4))
W3 = RNG.normal(size=(2, 3, 4))
OTHER2 = RNG.normal(size=(3, 4))
MAT45 = RNG.normal(size=(4, 5))
MASK = (RNG.random((3, 4)) > 0.4).astype(float)
IDS = np.array([[0, 2, 2], [1, 0, 3]])
W_3x5 = RNG.normal(size=(3, 5))
W_2x3x3 = RNG.normal(size=(2, 3, 3))
W_3x8 = RNG.normal(size=(3, 8))
W_2x3x4 = RNG.normal(size=(2, 3, 4))
W_2x4 = RNG.normal(size=(2, 4))
W_3 = RNG.normal(size=3)
W_3x2x2 = RNG.normal(size=(3, 2, 2))

OP_PROBES = {
    "matmul_left": (lambda x: nx.tensor_sum(nx.matmul(x, Tensor(MAT45))), (3, 4)),
    "matmul_right": (lambda x: nx.tensor_sum(nx.mul(nx.matmul(Tensor(W2), x), Tensor(W_3x5))), (4, 5)),
    "matmul_batched": (lambda x: _weighted(nx.matmul(x, nx.swap_axes(x, 1, 2)), W_2x3x3), (2, 3, 4)),
    "add": (lambda x: _weighted(nx.add(x, Tensor(OTHER2)), W2), (3, 4)),
    "add_bias": (lambda x: _weighted(nx.add(Tensor(OTHER2), x), W2), (4,)),
    "sub": (lambda x: _weighted(nx.sub(Tensor(OTHER2), x), W2), (3, 4)),
    "multiply": (lambda x: _weighted(nx.mul(x, x), W2), (3, 4)),
    "multiply_row": (lambda x: _weighted(nx.mul(Tensor(OTHER2), x), W2), (4,)),
    "concat": (lambda x: _weighted(nx.concat([x, nx.scale(x, 2.0)]), W_3x8), (3, 4)),
    "sigmoid": (lambda x: _weighted(nx.sigmoid(x), W2), (3, 4)),
    "relu": (lambda x: _weighted(nx.relu(x), W2), (3, 4)),
    "softmax": (lambda x: _weighted(nx.softmax(x), W2), (3, 4)),
    "log_softmax": (lambda x: _weighted(nx.log_softmax(x), W2), (3, 4)),
    "layer_norm": (lambda x: _weighted(nx.layer_norm(x), W3), (2, 3, 4)),
    "embedding": (lambda x: _weighted(nx.embedding(x, IDS), W_2x3x4), (4, 4)),
    "masked_mean": (lambda x: _weighted(nx.masked_mean(x, np.array([[1, 1, 0], [1, 0, 0]])), W_2x4), (2, 3, 4)),
    "l2_normalize": (lambda x: _weighted(nx.l2_normalize(x), W2), (3, 4)),
    "cosine_similarity": (lambda x: _weighted(nx.cosine_similarity(x, Tensor(OTHER2)), W_3), (3, 4)),
    "mask": (lambda x: _weighted(nx.apply_mask(x, MASK), W2), (3, 4)),
    "sum_axis": (lambda x: _weighted(nx.tensor_sum(x, axis=1), W_2x4), (2, 3, 4)),
    "mean": (lambda x: nx.tensor_mean(nx.mul(x, Tensor(W2))), (3, 4)),
    "reshape_swap": (lambda x: _weighted(nx.swap_axes(nx.reshape(x, (2, 2, 3)), 0, 2), W_3x2x2), (3, 4)),
    "expand": (lambda x: _weighted(nx.expand(x, 1, 3), W_2x3x4), (2, 4)),
    "pick": (lambda x: _weighted(nx.pick(x, np.array([0, 3, 1])), W_3), (3, 4)),
    "add_constant": (lambda x: _weighted(nx.add_constant(x, np.ones(4)), W2), (3, 4)),
}


@pytest.mark.parametrize("op", sorted(OP_PROBES))
def test_op_gradient_matches_finite_differences(op):
    fn, shape = OP_PROBES[op]
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=shape))
    if op == "relu":
        # keep clear of the kink
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
    assert nx.grad_check(fn, x, h=1e-5) < 1e-4


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_cosine_self_similarity_is_one():
    v = Tensor([[0.3, -2.0, 5.0]])
    assert nx.cosine_similarity(v, v).data[0] == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_zero():
    assert nx.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_sigmoid_extreme_inputs_are_finite():
    out = nx.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_backward_of_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.backward(nx.tensor_sum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        nx.backward(nx.scale(x, 2.0))


def test_grad_check_of_sum_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    assert nx.grad_check(nx.tensor_sum, x) < 1e-10


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    targets = np.array([1, 0, 4])

    def f(logits):
        return nx.scale(nx.tensor_sum(nx.pick(nx.log_softmax(logits), targets)), -1 / 3)

    assert nx.grad_check(f, Tensor(rng.normal(size=(3, 5)))) < 1e-4


def test_grad_check_rejects_nan():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError, match="NaN"):
        nx.grad_check(lambda t: nx.tensor_sum(nx.mul(t, Tensor([np.nan, 1.0]))), x)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(nx.ShapeError) as err:
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert err.value.op == "add"
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)
    with pytest.raises(nx.ShapeError, match="matmul"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_no_broadcasting_beyond_row_vectors():
    with pytest.raises(nx.ShapeError):
        nx.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        nx.embedding(Tensor(np.zeros((3, 2))), np.array([[0, 3]]))


def test_zero_norm_cosine_is_an_error():
    with pytest.raises(ValueError, match="zero-norm"):
        nx.cosine_similarity(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_every_reachable_leaf_and_node_gets_grad():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    h = nx.sigmoid(nx.matmul(a, b))
    out = nx.tensor_sum(nx.mul(h, h))
    nx.backward(out)
    for t in (a, b, h, out):
        assert t.grad is not None and t.grad.shape == t.shape


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    nx.backward(nx.tensor_sum(nx.add(x, nx.add(x, x))))
    assert x.grad[0] == 3.0


def test_repeated_backward_is_bitwise_identical():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    out = nx.tensor_mean(nx.log_softmax(nx.layer_norm(nx.matmul(x, w))))
    nx.backward(out)
    first = (x.grad.copy(), w.grad.copy())
    x.zero_grad()
    w.zero_grad()
    nx.backward(out)
    assert np.array_equal(first[0], x.grad) and np.array_equal(first[1], w.grad)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = nx.scale(x, 2.0)
    assert not y.requires_grad


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
def test_softmax_is_a_distribution(x):
    p = nx.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_standardizes_rows(x):
    # eps shrinks the variance by eps/var, so the bound holds for var >= 1
    out = nx.layer_norm(Tensor(x)).data
    for row, var in zip(out, x.var(axis=-1)):
        if var < 1.0:
            continue
        assert abs(row.mean()) < 1e-7
        assert abs(row.var() - 1.0) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)))
    v = rng.normal(size=(2, 3))

    def f(x):
        h = nx.layer_norm(nx.matmul(x, w))
        return nx.tensor_sum(nx.mul(nx.softmax(h), Tensor(v)))

    assert nx.grad_check(f, Tensor(rng.normal(size=(2, 4)))) < 1e-4
