import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rnada import tensor as T
from rnada.tensor import Graph, Tensor, backward, gradcheck


def grad_of(f, x):
    with Graph() as g:
        leaf = Tensor(x, requires_grad=True)
        backward(f(leaf), g)
    return leaf.grad


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_l2_norm_of_3_4_is_5():
    assert T.l2_norm_rows(Tensor([[3.0, 4.0]])).data.tolist() == [5.0]


def test_grad_reverse_forward_is_identity():
    x = np.array([1.5, -2.0])
    out = T.grad_reverse(Tensor(x), 0.75)
    assert out.data.tobytes() == x.tobytes()


def test_square_gradient():
    assert grad_of(lambda x: (x * x).sum(), [3.0]).tolist() == [6.0]


def test_grad_reverse_backward_scales_by_minus_beta():
    g = grad_of(lambda x: (T.grad_reverse(x, 0.75) * 2.0).sum(), [1.0])
    assert g.tolist() == [-1.5]


def test_relu_subgradient():
    assert grad_of(lambda x: T.relu(x).sum(), [-1.0, 2.0]).tolist() == [0.0, 1.0]
    assert grad_of(lambda x: T.relu(x).sum(), [0.0]).tolist() == [0.0]


def test_gradcheck_sum_of_squares():
    assert gradcheck(lambda x: (x * x).sum(), [1.0, 2.0, 3.0], 1e-5) < 1e-7


def test_gradcheck_rejects_bad_eps_and_nonfinite():
    with pytest.raises(ValueError):
        gradcheck(lambda x: x.sum(), [1.0], eps=0.1)
    with pytest.raises(ValueError, match="not finite"):
        gradcheck(lambda x: (x / x - 1.0 + np.inf).sum(), [1.0])


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_add_broadcast_error():
    with pytest.raises(T.ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_log_is_clamped():
    out = T.log(Tensor([0.0, -1.0, 1.0]))
    np.testing.assert_allclose(out.data, [np.log(1e-12), np.log(1e-12), 0.0])
    assert np.all(np.isfinite(grad_of(lambda x: T.log(x).sum(), [0.0, 2.0])))


def test_max_ties_pick_lowest_index():
    g = grad_of(lambda x: T.max_(x, axis=1).sum(), [[1.0, 3.0, 3.0]])
    assert g.tolist() == [[0.0, 1.0, 0.0]]


def test_backward_requires_scalar_root():
    with Graph() as g:
        y = Tensor([1.0, 2.0], requires_grad=True) * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y, g)


def test_backward_rejects_root_from_other_graph():
    with Graph():
        y = (Tensor([1.0], requires_grad=True) * 2.0).sum()
    with pytest.raises(ValueError, match="not produced"):
        backward(y, Graph())


def test_graph_is_topologically_ordered():
    with Graph() as g:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.relu(x @ x) + x
        T.mean(T.softmax(y))
    for i, node in enumerate(g.nodes):
        assert all(j is None or j < i for j in node.input_ids)


def test_forward_dispatch():
    out = T.forward("add", Tensor([1.0]), Tensor([2.0]))
    assert out.data.tolist() == [3.0]
    assert T.forward("concat", Tensor([1.0]), Tensor([2.0])).data.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError, match="unknown op"):
        T.forward("conv", Tensor([1.0]))


def test_default_graph_works_without_context():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [4.0]


def test_graphs_on_separate_threads():
    results = {}

    def work(i):
        with Graph() as g:
            x = Tensor([float(i)], requires_grad=True)
            backward((x * x).sum(), g)
        results[i] = x.grad[0]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {i: 2.0 * i for i in range(4)}


# every differentiable op at N(0, 1) inputs; grad_reverse is checked exactly below
def _op_cases():
    w = np.random.default_rng(99).standard_normal((4, 3))
    grid = lambda x: T.reshape(x, (3, 4))
    return {
        "add": lambda x: (x + 1.5 * x).sum(),
        "add_broadcast": lambda x: ((grid(x) + Tensor(np.arange(4.0))) * grid(x)).sum(),
        "sub": lambda x: (x - x * x).sum(),
        "mul": lambda x: (x * x * 0.5).sum(),
        "div": lambda x: (x / (x * x + 1.0)).sum(),
        "neg": lambda x: (-(x * x)).sum(),
        "matmul": lambda x: ((grid(x) @ Tensor(w)) * (grid(x) @ Tensor(w))).sum(),
        "relu": lambda x: (T.relu(x) * x).sum(),
        "log": lambda x: T.log(x * x + 0.5).sum(),
        "exp": lambda x: T.exp(x * 0.5).sum(),
        "softmax": lambda x: (T.softmax(grid(x)) * Tensor(w.T)).sum(),
        "log_softmax": lambda x: (T.log_softmax(grid(x)) * Tensor(w.T)).sum(),
        "l2_norm_rows": lambda x: (T.l2_norm_rows(grid(x)) * Tensor([1.0, -2.0, 0.5])).sum(),
        "sum_axis": lambda x: (T.sum_(grid(x), axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(),
        "mean_axis": lambda x: (T.mean(grid(x), axis=1) * Tensor([1.0, -1.0, 2.0])).sum(),
        "max": lambda x: (T.max_(grid(x), axis=1) * Tensor([1.0, 2.0, 3.0])).sum(),
        "concat": lambda x: (T.concat([x, x * x]) * Tensor(np.arange(24.0))).sum(),
        "take_rows": lambda x: (T.take_rows(grid(x), [2, 0, 2]) * grid(x)).sum(),
        "pick": lambda x: (T.pick(grid(x), [1, 3, 0]) * Tensor([1.0, 2.0, 3.0])).sum(),
    }


OP_CASES = _op_cases()


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_op_gradcheck(name, seed):
    x = np.random.default_rng(seed).standard_normal(12)
    assert gradcheck(OP_CASES[name], x, 1e-5) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), st.floats(0, 10))
def test_grad_reverse_exact(x, beta):
    upstream = np.linspace(-2, 3, 6)
    with Graph() as g:
        leaf = Tensor(x, requires_grad=True)
        out = T.grad_reverse(leaf, beta)
        assert out.data.tobytes() == x.tobytes()
        backward((out * Tensor(upstream)).sum(), g)
    assert leaf.grad.tobytes() == (-beta * upstream).tobytes()


def test_determinism_bitwise():
    def run():
        x = Tensor(np.random.default_rng(5).standard_normal((4, 4)), requires_grad=True)
        with Graph() as g:
            y = T.mean(T.log_softmax(T.relu(x @ x)) * T.l2_norm_rows(x).reshape(4, 1))
            backward(y, g)
        return y.data.tobytes() + x.grad.tobytes()
    assert run() == run()
