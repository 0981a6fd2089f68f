import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from hprn_errors import ContractError, DimensionError
from tensor_engine import (
    DIV_GUARD,
    Shape,
    Tensor,
    abs_,
    batched_matmul,
    concat,
    diagnostics,
    div,
    elementwise,
    matmul,
    permute,
    record_kinks,
    reduce,
    reduce_mean,
    reduce_sum,
    reshape,
    resolve_dtype,
    take,
    transpose,
)


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        plus = fn()
        x.flat[i] = orig - eps
        minus = fn()
        x.flat[i] = orig
        grad.flat[i] = (plus - minus) / (2 * eps)
    return grad


class TestTensorBasics(unittest.TestCase):
    def test_integer_input_becomes_float(self):
        t = Tensor([1, 2, 3])
        self.assertTrue(np.issubdtype(t.dtype, np.floating))

    def test_precision_names(self):
        self.assertIs(resolve_dtype("float64"), np.float64)
        self.assertIs(resolve_dtype("float32"), np.float32)
        with self.assertRaises(ContractError):
            resolve_dtype("float16")

    def test_shape_check(self):
        shape = Shape((2, 3), ("channel", "width"))
        shape.check(Tensor(np.zeros((2, 3))))
        with self.assertRaises(DimensionError):
            shape.check(Tensor(np.zeros((3, 2))))
        with self.assertRaises(DimensionError):
            Shape((0, 3))

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(ContractError):
            (x * 2.0).backward()

    def test_gradients_accumulate_on_leaves(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        reduce_sum(x * 3.0).backward()
        reduce_sum(x * 3.0).backward()
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_reused_node_sums_gradients(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        reduce_sum(y + y).backward()
        np.testing.assert_allclose(x.grad, [8.0])


class TestElementwise(unittest.TestCase):
    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        reduce_sum(a * b).backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0))
        np.testing.assert_allclose(a.grad, np.tile(b.data, (2, 1)))

    def test_incompatible_shapes(self):
        with self.assertRaises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_division_guard_counts(self):
        diagnostics.reset()
        out = div(Tensor(np.array([1.0, 1.0])), Tensor(np.array([0.0, 2.0])))
        self.assertEqual(diagnostics.div_clamped, 1)
        self.assertAlmostEqual(out.data[0], 1.0 / DIV_GUARD)
        self.assertAlmostEqual(out.data[1], 0.5)

    def test_division_gradient(self):
        a_data = np.array([1.5, -2.0, 0.7])
        b_data = np.array([0.5, 3.0, -1.2])
        a = Tensor(a_data.copy(), requires_grad=True)
        b = Tensor(b_data.copy(), requires_grad=True)
        reduce_sum(div(a, b)).backward()
        np.testing.assert_allclose(a.grad, 1.0 / b_data)
        np.testing.assert_allclose(b.grad, -a_data / b_data ** 2)

    def test_dispatch_by_name(self):
        a = Tensor(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(elementwise("abs", a).data, [1.0, 2.0])
        np.testing.assert_allclose(elementwise("scale", a, 3).data, [-3.0, 6.0])
        with self.assertRaises(ContractError):
            elementwise("pow", a, a)

    def test_abs_records_kinks(self):
        with record_kinks() as rec:
            abs_(Tensor(np.array([-1.0, 2.0])))
        self.assertEqual(len(rec.signatures), 1)
        np.testing.assert_array_equal(rec.signatures[0], [False, True])


class TestProductsAndLayout(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_matmul_gradient_matches_finite_differences(self):
        a_data = self.rng.normal(size=(3, 4))
        b_data = self.rng.normal(size=(4, 2))
        a = Tensor(a_data, requires_grad=True)
        b = Tensor(b_data, requires_grad=True)
        reduce_sum(matmul(a, b) * matmul(a, b)).backward()

        def value():
            return float(((a_data @ b_data) ** 2).sum())

        np.testing.assert_allclose(a.grad, numeric_grad(value, a_data), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(b.grad, numeric_grad(value, b_data), rtol=1e-6, atol=1e-8)

    def test_matmul_dimension_error(self):
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matmul(self):
        a = Tensor(self.rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(self.rng.normal(size=(2, 4, 5)), requires_grad=True)
        out = a @ b
        np.testing.assert_allclose(out.data, np.matmul(a.data, b.data))
        reduce_sum(out).backward()
        np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(axis=2)[:, None, :], (2, 3, 4)))
        with self.assertRaises(DimensionError):
            batched_matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))

    def test_reshape_permute_transpose(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        y = permute(reshape(x, (6, 4)), (1, 0))
        self.assertEqual(y.shape, (4, 6))
        self.assertEqual(transpose(x).shape, (2, 4, 3))
        reduce_sum(y * Tensor(np.arange(24.0).reshape(4, 6))).backward()
        np.testing.assert_allclose(x.grad.reshape(6, 4), np.arange(24.0).reshape(4, 6).T)
        with self.assertRaises(DimensionError):
            reshape(x, (5, 5))
        with self.assertRaises(DimensionError):
            permute(x, (0, 0, 1))

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        out = concat([a, b], axis=0)
        reduce_sum(out * Tensor(np.arange(6.0).reshape(3, 2))).backward()
        np.testing.assert_allclose(a.grad, [[0.0, 1.0]])
        np.testing.assert_allclose(b.grad, [[2.0, 3.0], [4.0, 5.0]])

    def test_take_accumulates_repeats(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        out = take(x, np.array([0, 2, 2]), axis=1)
        np.testing.assert_allclose(out.data, [[1.0, 3.0, 3.0]])
        reduce_sum(out).backward()
        np.testing.assert_allclose(x.grad, [[1.0, 0.0, 2.0]])
        with self.assertRaises(DimensionError):
            take(x, np.array([3]), axis=1)


class TestReductions(unittest.TestCase):
    def test_mean_gradient(self):
        x = Tensor(np.ones((2, 4)), requires_grad=True)
        reduce_sum(reduce_mean(x, axes=1)).backward()
        np.testing.assert_allclose(x.grad, np.full((2, 4), 0.25))

    def test_keepdims_and_dispatch(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        self.assertEqual(reduce("sum", x, axes=1, keepdims=True).shape, (2, 1))
        self.assertAlmostEqual(reduce("mean", x).item(), 2.5)
        with self.assertRaises(ContractError):
            reduce("max", x)
        with self.assertRaises(DimensionError):
            reduce_sum(x, axes=2)


class TestWorkedExamples(unittest.TestCase):
    def test_matmul_by_hand(self):
        eye = Tensor(np.eye(2))
        x = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(matmul(eye, x).data, x.data)
        out = matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[0.0], [1.0]])))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_matmul_sum_gradient_by_hand(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        reduce_sum(matmul(a, Tensor(np.ones((2, 2))))).backward()
        np.testing.assert_allclose(a.grad, np.full((2, 2), 2.0))

    def test_batched_matmul_identity_and_loop(self):
        x = np.random.default_rng(4).normal(size=(2, 2, 3))
        eyes = Tensor(np.stack([np.eye(2), np.eye(2)]))
        np.testing.assert_array_equal(batched_matmul(eyes, Tensor(x)).data, x)

        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
        out = batched_matmul(Tensor(a), Tensor(b)).data
        for g in range(3):
            np.testing.assert_allclose(out[g], a[g] @ b[g], atol=1e-12)

    def test_layout_round_trips_are_exact(self):
        data = np.random.default_rng(6).normal(size=(3, 4, 4))
        x = Tensor(data)
        np.testing.assert_array_equal(reshape(reshape(x, (3, 16)), (3, 4, 4)).data, data)
        y = Tensor(np.random.default_rng(7).normal(size=(2, 3, 5)))
        back = permute(permute(y, (1, 2, 0)), (2, 0, 1))
        np.testing.assert_array_equal(back.data, y.data)

    def test_elementwise_by_hand(self):
        x = Tensor(np.array([0.5, -2.0]))
        np.testing.assert_array_equal((x * 1.0).data, x.data)
        np.testing.assert_array_equal(abs_(Tensor(np.array([-1.0, 2.0]))).data, [1.0, 2.0])

    def test_mean_of_product_gradient(self):
        b_data = np.array([[1.0, -2.0], [3.0, 0.5]])
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        reduce_mean(a * Tensor(b_data)).backward()
        np.testing.assert_allclose(a.grad, b_data / 4)

    def test_reductions_by_hand(self):
        ones = Tensor(np.ones((3, 16)))
        np.testing.assert_array_equal(reduce_mean(ones, axes=1).data, np.ones(3))
        np.testing.assert_array_equal(reduce_sum(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), axes=0).data, [4.0, 6.0])

    def test_linear_and_quadratic_losses(self):
        w_data = np.array([0.3, -1.2, 2.0])
        w = Tensor(w_data, requires_grad=True)
        reduce_sum(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones(3))

        w = Tensor(w_data, requires_grad=True)
        reduce_sum(w * w * 0.5).backward()
        np.testing.assert_allclose(w.grad, w_data)

    def test_backward_of_sum_equals_sum_of_backwards(self):
        rng = np.random.default_rng(8)
        w_data = rng.normal(size=(2, 3))
        m = Tensor(rng.normal(size=(3, 2)))

        def first(w):
            return reduce_sum(matmul(w, m))

        def second(w):
            return reduce_mean(w * w)

        w = Tensor(w_data, requires_grad=True)
        (first(w) + second(w)).backward()
        combined = w.grad

        w = Tensor(w_data, requires_grad=True)
        first(w).backward()
        second(w).backward()
        np.testing.assert_allclose(combined, w.grad, atol=1e-12)

    def test_finite_differences_on_random_inputs(self):
        rng = np.random.default_rng(9)
        eps = 1e-4
        ops = {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / (b + 3.0),
            "abs": lambda a, b: abs_(a) * b,
            "matmul": lambda a, b: matmul(a, transpose(b)),
        }
        for name, fn in ops.items():
            a_data = rng.uniform(-1, 1, size=(3, 3))
            b_data = rng.uniform(-1, 1, size=(3, 3))
            if name == "abs":
                a_data = np.where(np.abs(a_data) < 1e-3, 0.5, a_data)
            weights = rng.normal(size=(3, 3))
            a = Tensor(a_data, requires_grad=True)
            b = Tensor(b_data, requires_grad=True)
            reduce_sum(fn(a, b) * Tensor(weights)).backward()

            def value():
                return float((fn(Tensor(a_data), Tensor(b_data)).data * weights).sum())

            for leaf, data in ((a, a_data), (b, b_data)):
                numeric = numeric_grad(value, data, eps=eps)
                rel = np.abs(leaf.grad - numeric) / np.maximum(np.maximum(np.abs(leaf.grad), np.abs(numeric)), 1e-6)
                self.assertLess(float(rel.max()), 1e-4, name)


if __name__ == '__main__':
    unittest.main()
