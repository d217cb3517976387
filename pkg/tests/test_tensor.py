import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adp.tensor import (
    DomainError,
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    elementwise_apply,
    finite_difference_gradient,
    gradient_relative_error,
    matmul,
    maximum,
    no_grad,
    reduce_stats,
    stack,
)


class TestElementwise:
    def test_add(self):
        assert elementwise_apply("add", [1, 2], Tensor([3, 4])).tolist() == [4, 6]

    def test_div_by_scalar(self):
        assert elementwise_apply("div", Tensor([2, 4]), 2).tolist() == [1, 2]

    def test_channel_broadcast(self):
        x = Tensor([[[1, 2], [3, 4]]])
        assert (x + Tensor([10, 20])).tolist() == [[[11, 22], [13, 24]]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1, 2]) + Tensor([1, 2, 3])

    @pytest.mark.parametrize(
        "op, arg",
        [("sqrt", [-1.0, 1.0]), ("log", [0.0, 1.0]), ("log", [-2.0])],
    )
    def test_domain_errors(self, op, arg):
        with pytest.raises(DomainError):
            elementwise_apply(op, Tensor(arg))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise_apply("tanh", Tensor([1.0]))

    @pytest.mark.parametrize("op", ["exp", "abs", "relu", "sqrt"])
    def test_unary_matches_numpy(self, op):
        x = np.array([0.25, 1.5, 4.0])
        ref = {"exp": np.exp, "abs": np.abs, "relu": lambda v: np.maximum(v, 0), "sqrt": np.sqrt}[op]
        np.testing.assert_array_equal(elementwise_apply(op, Tensor(x)).data, ref(x))

    def test_scale_and_max_pairwise(self):
        assert elementwise_apply("scale_by_constant", Tensor([1, -2]), 3).tolist() == [3, -6]
        assert elementwise_apply("max_pairwise", Tensor([1, 5]), Tensor([3, 2])).tolist() == [3, 5]

    def test_results_are_float64(self):
        assert (Tensor([1, 2]) * 3).data.dtype == np.float64


class TestReduceStats:
    def test_two_point(self):
        mean, var = reduce_stats(Tensor([[[1], [3]]]))
        assert mean.tolist() == [[2]] and var.tolist() == [[1]]

    def test_constant_input_has_exact_zero_variance(self):
        _, var = reduce_stats(Tensor(np.full((2, 5, 3), 5.0)))
        assert np.all(var.data == 0.0)

    def test_hand_summation(self):
        mean, var = reduce_stats(Tensor([[[1, 10], [2, 20], [3, 30]]]))
        np.testing.assert_allclose(mean.data, [[2, 20]])
        np.testing.assert_allclose(var.data, [[2 / 3, 200 / 3]], rtol=1e-14)

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            reduce_stats(Tensor(np.zeros((1, 0, 2))))

    def test_differentiable(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3)), requires_grad=True)

        def f(t):
            mean, var = reduce_stats(t)
            return (var * mean).sum()

        backward(f(x))
        fd = finite_difference_gradient(f, x)
        assert gradient_relative_error(x.grad, fd.data) < 1e-7


class TestMatmul:
    def test_identity(self):
        assert matmul(np.eye(2), Tensor([[1, 2], [3, 4]])).tolist() == [[1, 2], [3, 4]]

    def test_dot(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).tolist() == [[11]]

    def test_hand_product(self):
        assert matmul(Tensor([[1, 0], [0, 2]]), Tensor([[5, 6], [7, 8]])).tolist() == [[5, 6], [14, 16]]

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_rows_gradient(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        backward((a @ b).square().sum())
        for t in (a, b):
            fd = finite_difference_gradient(lambda _: (a @ b).square().sum(), t)
            assert gradient_relative_error(t.grad, fd.data) < 1e-8


class TestBackward:
    def test_sum_of_leaf_gives_exact_ones(self):
        x = Tensor([0.3, -7.0, 2.5], requires_grad=True)
        backward(x.sum())
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_mean_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).mean())
        np.testing.assert_allclose(x.grad, [1.0, 2.0], rtol=1e-15)

    def test_max_component_subgradient(self):
        x = Tensor([1.0, 5.0], requires_grad=True)
        y = Tensor([0.0, 0.0])
        backward((x - y).abs().max())
        assert x.grad.tolist() == [0.0, 1.0]

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(x * 2)

    def test_no_tape(self):
        with pytest.raises(GradientError):
            backward(Tensor(3.0))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        backward(y + y)
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2
        assert y.node is None and not y.requires_grad

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        h = x * x
        loss = (h + h.exp()).sum()
        tape = Tape.from_output(loss)
        seqs = [n.seq for n in tape.nodes]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        position = {id(t): i for i, t in enumerate(tape.tensors)}
        for t in tape.tensors:
            for inp in t.node.inputs:
                if inp.node is not None:
                    assert position[id(inp)] < position[id(t)]

    def test_getitem_concat_stack_gradients(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2)), requires_grad=True)

        def f(_):
            c = concat([a, b], axis=0)
            s = stack([c[0], c[3], c[np.array([1, 1])].sum(axis=0)])
            return (s * s).sum() + maximum(a, 0.1).sum()

        backward(f(None))
        for t in (a, b):
            fd = finite_difference_gradient(f, t)
            assert gradient_relative_error(t.grad, fd.data) < 1e-8

    def test_independent_tapes_in_threads(self):
        results = {}

        def work(seed):
            x = Tensor(np.full(4, float(seed)), requires_grad=True)
            backward((x * x).sum())
            results[seed] = x.grad.copy()

        threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for s in range(4):
            np.testing.assert_array_equal(results[s], np.full(4, 2.0 * s))


class TestFiniteDifferences:
    def test_quadratic(self):
        g = finite_difference_gradient(lambda t: (t * t).sum(), Tensor([3.0]))
        assert g.data[0] == pytest.approx(6.0, abs=1e-9)

    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=30)
    def test_linear_is_all_ones(self, x):
        g = finite_difference_gradient(lambda t: t.sum(), Tensor(x))
        np.testing.assert_allclose(g.data, 1.0, atol=1e-6)

    def test_restores_input(self):
        x = Tensor([1.0, 2.0])
        finite_difference_gradient(lambda t: (t * t).sum(), x)
        assert x.tolist() == [1.0, 2.0]

    def test_non_finite(self):
        with pytest.raises(GradientError):
            finite_difference_gradient(lambda t: float("nan"), Tensor([1.0]))
