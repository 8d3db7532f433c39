"""
    Test core
    functions:
        Norm.parse - YES
        as_tensor - YES
        input_bounds - YES
        concretize - YES
        check_robust - YES
        sample_ball - YES
        LinearBounds.evaluate / reshape_tail / transpose_tail - YES

    python -m unittest test/test_LinearBounds.py

"""


import unittest
from parameterized import parameterized
import numpy as np

from boundcraft.core import (
    ConcreteBounds,
    LinearBounds,
    PerturbationSpec,
    as_tensor,
    check_robust,
    concretize,
    input_bounds,
    sample_ball,
)
from boundcraft.primitives import Norm, Precision
from boundcraft.utils import ShapeMismatchError


class TestNorm(unittest.TestCase):
    """
        test Norm and PerturbationSpec
    """

    test_parse_arr = [
        ("l1", Norm.L1),
        ("L2", Norm.L2),
        ("linf", Norm.LINF),
        ("inf", Norm.LINF),
        (1, Norm.L1),
        (2, Norm.L2),
        (np.inf, Norm.LINF),
    ]

    @parameterized.expand(test_parse_arr)
    def test_parse(self, value, expected):
        self.assertIs(Norm.parse(value), expected)

    def test_parse_unknown(self):
        with self.assertRaises(ValueError):
            Norm.parse("l3")

    test_dual_arr = [
        (Norm.LINF, Norm.L1),
        (Norm.L2, Norm.L2),
        (Norm.L1, Norm.LINF),
    ]

    @parameterized.expand(test_dual_arr)
    def test_dual(self, norm, dual):
        self.assertIs(norm.dual, dual)

    def test_precision(self):
        self.assertEqual(Precision.F32.elem_size, 4)
        self.assertEqual(Precision.F64.elem_size, 8)
        t = as_tensor([1.0, 2.0], Precision.F32)
        self.assertEqual(t.dtype, np.float32)
        self.assertFalse(t.flags.writeable)

    def test_as_tensor_rejects_nan(self):
        with self.assertRaises(AssertionError):
            as_tensor([1.0, np.nan])

    def test_spec_negative_epsilon(self):
        with self.assertRaises(AssertionError):
            PerturbationSpec("linf", -0.1, 3)


class TestLinearBounds(unittest.TestCase):
    """
        test LinearBounds, input_bounds, concretize
    """

    def test_shape_validation(self):
        with self.assertRaises(ShapeMismatchError):
            LinearBounds(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4)), np.zeros(2))
        with self.assertRaises(ShapeMismatchError):
            LinearBounds(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(3))

    def test_input_bounds_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        spec = PerturbationSpec("linf", 0.1, 6)
        b = input_bounds(x, spec)
        self.assertEqual(b.neuron_shape, (2, 3))
        self.assertEqual(b.dim, 6)
        np.testing.assert_array_equal(b.lw.reshape(6, 6), np.eye(6))
        np.testing.assert_array_equal(b.lb, x)

    def test_input_bounds_batch(self):
        x = np.ones((4, 2, 3))
        b = input_bounds(x, PerturbationSpec("l2", 0.1, 6))
        self.assertEqual(b.lw.shape, (4, 2, 3, 6))
        np.testing.assert_array_equal(b.lw[2].reshape(6, 6), np.eye(6))

    @parameterized.expand([((2, 3), 5), ((2,), 1), ((6,), 3), ((4, 2), 1)])
    def test_input_bounds_mismatch(self, shape, dim):
        with self.assertRaises(ShapeMismatchError):
            input_bounds(np.ones(shape), PerturbationSpec("linf", 0.1, dim))

    @parameterized.expand([((2, 3), 3, (2, 3, 3)), ((1, 6), 6, (1, 6, 6)), ((3, 1), 1, (3, 1, 1))])
    def test_input_bounds_tail(self, shape, dim, weight_shape):
        b = input_bounds(np.ones(shape), PerturbationSpec("linf", 0.1, dim))
        self.assertEqual(b.lw.shape, weight_shape)

    test_concretize_arr = [
        ("linf", 0.5, [-1.0 - 0.5 * 3.0], [1.0 + 0.5 * 3.0]),
        ("l2", 0.5, [-1.0 - 0.5 * np.sqrt(5.0)], [1.0 + 0.5 * np.sqrt(5.0)]),
        ("l1", 0.5, [-1.0 - 0.5 * 2.0], [1.0 + 0.5 * 2.0]),
    ]

    @parameterized.expand(test_concretize_arr)
    def test_concretize_dual_norm(self, p, eps, lo, hi):
        w = np.array([[1.0, -2.0]])
        b = LinearBounds(w, np.array([-1.0]), w, np.array([1.0]))
        c = concretize(b, PerturbationSpec(p, eps, 2))
        np.testing.assert_allclose(c.lo, lo)
        np.testing.assert_allclose(c.hi, hi)

    def test_concretize_zero_radius(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 4))
        b = LinearBounds(w, np.array([0.0, 1.0, 2.0]), w, np.array([0.5, 1.0, 2.5]))
        c = concretize(b, PerturbationSpec("l2", 0.0, 4))
        np.testing.assert_array_equal(c.lo, b.lb)
        np.testing.assert_array_equal(c.hi, b.ub)

    def test_concretize_dim_mismatch(self):
        b = input_bounds(np.zeros(3), PerturbationSpec("linf", 0.1, 3))
        with self.assertRaises(ShapeMismatchError):
            concretize(b, PerturbationSpec("linf", 0.1, 4))

    @parameterized.expand([("linf",), ("l2",), ("l1",)])
    def test_concretize_contains_samples(self, p):
        rng = np.random.default_rng(1)
        lw, uw = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        lb = rng.standard_normal(5)
        b = LinearBounds(lw, lb - 1.0, uw, lb + 1.0)
        spec = PerturbationSpec(p, 0.3, 7)
        c = concretize(b, spec)
        lower, upper = b.evaluate(sample_ball(spec, 500, rng))
        self.assertTrue(np.all(lower >= c.lo - 1e-12))
        self.assertTrue(np.all(upper <= c.hi + 1e-12))

    def test_evaluate_single_and_stack(self):
        w = np.array([[1.0, 2.0], [0.0, -1.0]])
        b = LinearBounds(w, np.zeros(2), w, np.ones(2))
        lower, upper = b.evaluate(np.array([1.0, 1.0]))
        np.testing.assert_allclose(lower, [3.0, -1.0])
        np.testing.assert_allclose(upper, [4.0, 0.0])
        lower, _ = b.evaluate(np.array([[1.0, 1.0], [0.0, 0.0]]))
        self.assertEqual(lower.shape, (2, 2))
        np.testing.assert_allclose(lower[1], [0.0, 0.0])

    def test_reshape_and_transpose_tail(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        b = input_bounds(x, PerturbationSpec("linf", 0.1, 24))
        r = b.reshape_tail(1, (2, 2))
        self.assertEqual(r.neuron_shape, (2, 3, 2, 2))
        t = b.transpose_tail([1, 0])
        self.assertEqual(t.neuron_shape, (2, 4, 3))
        np.testing.assert_array_equal(t.lb, x.transpose(0, 2, 1))
        np.testing.assert_array_equal(t.lw[1, 2, 0], b.lw[1, 0, 2])
        with self.assertRaises(ShapeMismatchError):
            b.reshape_tail(1, (5,))


class TestCheckRobust(unittest.TestCase):
    """
        test check_robust
    """

    test_check_arr = [
        ([2.0, 0.0, -1.0], [3.0, 1.0, 0.5], 0, 0.0, True),
        ([2.0, 0.0, -1.0], [3.0, 2.0, 0.5], 0, 0.0, False),
        ([2.0, 0.0, -1.0], [3.0, 1.0, 0.5], 0, 1.0, False),
        ([2.0, 0.0, -1.0], [3.0, 1.5, 0.5], 0, 0.25, True),
        ([0.0, 0.0], [1.0, 1.0], 1, 0.0, False),
    ]

    @parameterized.expand(test_check_arr)
    def test_check(self, lo, hi, true_class, margin, expected):
        c = ConcreteBounds(np.array(lo), np.array(hi))
        self.assertEqual(check_robust(c, true_class, margin), expected)

    def test_strict_inequality(self):
        c = ConcreteBounds(np.array([1.0, 0.0]), np.array([2.0, 1.0]))
        self.assertFalse(check_robust(c, 0))

    def test_errors(self):
        c = ConcreteBounds(np.zeros(3), np.ones(3))
        with self.assertRaises(IndexError):
            check_robust(c, 3)
        with self.assertRaises(ShapeMismatchError):
            check_robust(ConcreteBounds(np.zeros((2, 2)), np.ones((2, 2))), 0)


class TestSampleBall(unittest.TestCase):
    """
        test sample_ball
    """

    @parameterized.expand([("linf",), ("l2",), ("l1",)])
    def test_inside_ball(self, p):
        spec = PerturbationSpec(p, 0.2, 9)
        samples = sample_ball(spec, 400, np.random.default_rng(3))
        self.assertEqual(samples.shape, (400, 9))
        norms = np.linalg.norm(samples, ord=spec.norm.order, axis=1)
        self.assertTrue(np.all(norms <= 0.2 + 1e-12))
        # boundary share
        self.assertTrue(np.sum(np.isclose(norms, 0.2)) >= 100)


if __name__ == "__main__":
    unittest.main()
