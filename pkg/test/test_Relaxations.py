"""
    Test relax
    functions:
        forward - YES
        propagate_affine - YES
        relax_relu / relax_leaky_relu / relax_tanh / relax_silu / relax_exp / relax_recip - YES
        relaxation_producer - YES
        compose_elementwise - YES
        relax_bilinear / propagate_mul / propagate_dot_product - YES
        propagate_softmax - YES

    python -m unittest test/test_Relaxations.py

"""


import unittest
from parameterized import parameterized
import numpy as np

from boundcraft import relax
from boundcraft.core import ConcreteBounds, LinearBounds, PerturbationSpec, concretize, input_bounds, sample_ball
from boundcraft.primitives import OpKind
from boundcraft.relax import ElementwiseLinearRelaxation
from boundcraft.utils import DomainError, ShapeMismatchError, UnknownOpError


GRID_POINTS = 1000
GRID_TOL = 1e-9


def random_intervals(rng, n, low, high):
    a = rng.uniform(low, high, size=n)
    b = rng.uniform(low, high, size=n)
    return ConcreteBounds(np.minimum(a, b), np.maximum(a, b))


def assert_grid_sound(case, f, r, c):
    t = np.linspace(0.0, 1.0, GRID_POINTS)
    x = c.lo[:, None] + (c.hi - c.lo)[:, None] * t[None, :]
    fx = f(x)
    tol = GRID_TOL * (1.0 + np.abs(fx))
    lower = r.a_low[:, None] * x + r.b_low[:, None]
    upper = r.a_up[:, None] * x + r.b_up[:, None]
    case.assertTrue(np.all(lower <= fx + tol), f"lower violation {np.max(lower - fx)}")
    case.assertTrue(np.all(fx <= upper + tol), f"upper violation {np.max(fx - upper)}")


def silu_interval(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    Interval relaxation of SiLU built from the public interface only.
    SiLU decreases up to its minimum point and increases after it.
    """
    x_min = -1.2784645427610738
    f_lo, f_hi = relax.silu(c.lo), relax.silu(c.hi)
    inside = (c.lo <= x_min) & (x_min <= c.hi)
    low = np.where(inside, relax.silu(x_min), np.minimum(f_lo, f_hi))
    return ElementwiseLinearRelaxation.constant(low, np.maximum(f_lo, f_hi))


class TestForward(unittest.TestCase):
    """
        test exact forward
    """

    def test_relu(self):
        np.testing.assert_array_equal(relax.forward(OpKind.RELU, np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_tanh(self):
        self.assertEqual(float(relax.forward("tanh", np.array(0.0))), 0.0)

    def test_dot_product_gram(self):
        q = np.eye(3)
        np.testing.assert_array_equal(relax.forward(OpKind.DOT_PRODUCT, q, q), np.eye(3))
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(relax.forward(OpKind.DOT_PRODUCT, x, x), x @ x.T)

    def test_affine_and_bound_matmul_agree(self):
        rng = np.random.default_rng(0)
        W, b, x = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal((2, 3))
        y = relax.forward(OpKind.AFFINE, x, weight=W, bias=b)
        np.testing.assert_allclose(y, x @ W.T + b)
        np.testing.assert_allclose(relax.forward(OpKind.BOUND_MATMUL, x, weight=W, bias=b), y)

    def test_errors(self):
        with self.assertRaises(ShapeMismatchError):
            relax.forward(OpKind.AFFINE, np.ones(3), weight=np.ones((2, 4)))
        with self.assertRaises(ShapeMismatchError):
            relax.forward(OpKind.ADD, np.ones(3), np.ones(4))
        with self.assertRaises(UnknownOpError):
            relax.forward("conv2d", np.ones(3))


class TestAffine(unittest.TestCase):
    """
        test propagate_affine
    """

    def test_interval_corners(self):
        x = LinearBounds(np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)), np.ones(2))
        y = relax.propagate_affine(x, np.array([[2.0, -3.0]]))
        self.assertEqual(float(y.ub[0]), 2.0)
        self.assertEqual(float(y.lb[0]), -3.0)

    def test_non_negative_weight(self):
        rng = np.random.default_rng(1)
        x = LinearBounds(rng.standard_normal((3, 4)), np.zeros(3), rng.standard_normal((3, 4)), np.ones(3))
        W = np.abs(rng.standard_normal((2, 3)))
        y = relax.propagate_affine(x, W)
        np.testing.assert_allclose(y.uw, W @ x.uw)
        np.testing.assert_allclose(y.lw, W @ x.lw)
        np.testing.assert_allclose(y.ub, W @ x.ub)

    def test_split_reconstructs(self):
        W = np.random.default_rng(2).standard_normal((5, 6))
        w_pos, w_neg = relax.split_weight(W)
        np.testing.assert_array_equal(w_pos + w_neg, W)

    def test_four_multiplications(self):
        rng = np.random.default_rng(3)
        x = LinearBounds(
            rng.standard_normal((2, 5, 7)), rng.standard_normal((2, 5)),
            rng.standard_normal((2, 5, 7)), rng.standard_normal((2, 5)) + 3.0,
        )
        W, bias = rng.standard_normal((4, 5)), rng.standard_normal(4)
        y = relax.propagate_affine(x, W, bias)

        w_pos, w_neg = np.maximum(W, 0), np.minimum(W, 0)
        np.testing.assert_array_equal(y.lw, w_pos @ x.lw + w_neg @ x.uw)
        np.testing.assert_array_equal(y.uw, w_pos @ x.uw + w_neg @ x.lw)
        np.testing.assert_array_equal(y.lb, (x.lb @ w_pos.T + x.ub @ w_neg.T) + bias)
        np.testing.assert_array_equal(y.ub, (x.ub @ w_pos.T + x.lb @ w_neg.T) + bias)

    def test_shape_mismatch(self):
        x = input_bounds(np.zeros(3), PerturbationSpec("linf", 0.1, 3))
        with self.assertRaises(ShapeMismatchError):
            relax.propagate_affine(x, np.ones((2, 4)))


class TestElementwiseRelaxations(unittest.TestCase):
    """
        test elementwise line pairs
    """

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_relu_cases(self):
        r = relax.relax_relu(ConcreteBounds(np.array([2.0, -3.0, -1.0, -2.0]), np.array([3.0, -1.0, 1.0, 1.0])))
        np.testing.assert_allclose(r.a_low, [1.0, 0.0, 1.0, 0.0])
        np.testing.assert_allclose(r.b_low, [0.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(r.a_up, [1.0, 0.0, 0.5, 1.0 / 3.0])
        np.testing.assert_allclose(r.b_up, [0.0, 0.0, 0.5, 2.0 / 3.0])

    def test_tanh_point_interval(self):
        r = relax.relax_tanh(ConcreteBounds(np.zeros(1), np.zeros(1)))
        np.testing.assert_allclose([r.a_low[0], r.b_low[0], r.a_up[0], r.b_up[0]], [1.0, 0.0, 1.0, 0.0], atol=1e-12)

    def test_tanh_positive_chord(self):
        r = relax.relax_tanh(ConcreteBounds(np.array([1.0]), np.array([2.0])))
        slope = np.tanh(2.0) - np.tanh(1.0)
        self.assertAlmostEqual(float(r.a_low[0]), slope, places=12)
        self.assertAlmostEqual(float(r.b_low[0]), np.tanh(1.0) - slope, places=12)

    def test_tanh_symmetric(self):
        r = relax.relax_tanh(ConcreteBounds(np.array([-2.0]), np.array([2.0])))
        self.assertAlmostEqual(float(r.a_low[0]), float(r.a_up[0]), places=12)
        self.assertAlmostEqual(float(r.b_low[0]), -float(r.b_up[0]), places=12)
        # the upper tangent passes through the left end
        residual = float(r.a_up[0] * -2.0 + r.b_up[0] - np.tanh(-2.0))
        self.assertGreaterEqual(residual, 0.0)
        self.assertLess(residual, 1e-5)

    def test_tanh_slopes_non_negative(self):
        r = relax.relax_tanh(random_intervals(self.rng, 1000, -6.0, 6.0))
        self.assertTrue(np.all(r.a_low >= 0))
        self.assertTrue(np.all(r.a_up >= 0))

    def test_exp_examples(self):
        r = relax.relax_exp(ConcreteBounds(np.zeros(1), np.zeros(1)))
        np.testing.assert_allclose([r.a_low[0], r.b_low[0]], [1.0, 1.0])
        r = relax.relax_exp(ConcreteBounds(np.zeros(1), np.ones(1)))
        self.assertAlmostEqual(float(r.a_up[0]), np.e - 1.0, places=12)
        self.assertAlmostEqual(float(r.b_up[0]), 1.0, places=12)

    def test_recip_example(self):
        r = relax.relax_recip(ConcreteBounds(np.ones(1), 2.0 * np.ones(1)))
        self.assertAlmostEqual(float(r.a_up[0]), -0.5, places=12)
        self.assertAlmostEqual(float(r.b_up[0]), 1.5, places=12)
        self.assertLess(float(r.a_low[0]), 0.0)

    def test_recip_domain(self):
        with self.assertRaises(DomainError):
            relax.relax_recip(ConcreteBounds(np.array([0.0]), np.array([1.0])))
        with self.assertRaises(DomainError):
            relax.relax_recip(ConcreteBounds(np.array([-1.0]), np.array([1.0])))

    test_grid_arr = [
        ("relu", relax.relax_relu, lambda x: np.maximum(x, 0), -5.0, 5.0),
        ("leaky_relu", lambda c: relax.relax_leaky_relu(c, 0.1), lambda x: np.where(x >= 0, x, 0.1 * x), -5.0, 5.0),
        ("tanh", relax.relax_tanh, np.tanh, -6.0, 6.0),
        ("tanh_narrow", relax.relax_tanh, np.tanh, -0.5, 0.5),
        ("sigmoid", relax.relax_sigmoid, relax.sigmoid, -6.0, 6.0),
        ("silu", relax.relax_silu, relax.silu, -6.0, 6.0),
        ("exp", relax.relax_exp, np.exp, -5.0, 5.0),
        ("recip", relax.relax_recip, lambda x: 1.0 / x, 0.1, 5.0),
        ("silu_interval", silu_interval, relax.silu, -6.0, 6.0),
    ]

    @parameterized.expand(test_grid_arr)
    def test_grid_soundness(self, _, producer, f, low, high):
        c = random_intervals(self.rng, 1000, low, high)
        assert_grid_sound(self, f, producer(c), c)

    def test_producer(self):
        self.assertIs(relax.relaxation_producer("tanh"), relax.relax_tanh)
        leaky = relax.relaxation_producer(OpKind.LEAKY_RELU, slope=0.2)
        r = leaky(ConcreteBounds(np.array([-2.0]), np.array([-1.0])))
        self.assertAlmostEqual(float(r.a_up[0]), 0.2)
        with self.assertRaises(UnknownOpError):
            relax.relaxation_producer(OpKind.SOFTMAX)


class TestCompose(unittest.TestCase):
    """
        test compose_elementwise
    """

    def setUp(self):
        rng = np.random.default_rng(11)
        self.x = LinearBounds(rng.standard_normal((4, 3)), -np.ones(4), rng.standard_normal((4, 3)), np.ones(4))

    def test_identity(self):
        y = relax.compose_elementwise(self.x, ElementwiseLinearRelaxation.identity((4,)))
        np.testing.assert_array_equal(y.lw, self.x.lw)
        np.testing.assert_array_equal(y.ub, self.x.ub)

    def test_chord_on_interval(self):
        x = LinearBounds(np.zeros((1, 2)), -np.ones(1), np.zeros((1, 2)), np.ones(1))
        y = relax.compose_elementwise(x, ElementwiseLinearRelaxation(1.0 * np.ones(1), 0.0, 0.5 * np.ones(1), 0.5))
        self.assertAlmostEqual(float(y.ub[0]), 1.0)

    def test_negative_slope_swaps_side(self):
        r = ElementwiseLinearRelaxation(np.zeros(4), 0.0, -0.5 * np.ones(4), 0.0)
        y = relax.compose_elementwise(self.x, r)
        np.testing.assert_allclose(y.uw, -0.5 * self.x.lw)
        np.testing.assert_allclose(y.ub, -0.5 * self.x.lb)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            relax.compose_elementwise(self.x, ElementwiseLinearRelaxation.identity((5,)))

    @parameterized.expand([("silu_interval", silu_interval), ("silu", relax.relax_silu)])
    def test_new_producer_is_sound(self, _, producer):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((3, 4))
        spec = PerturbationSpec("linf", 0.2, 12)
        W = rng.standard_normal((5, 4))
        h = relax.propagate_affine(input_bounds(x0, spec), W)
        y = relax.compose_elementwise(h, producer(concretize(h, spec)))
        c = concretize(y, spec)

        deltas = sample_ball(spec, 2000, rng)
        outputs = relax.silu((x0[None] + deltas.reshape(-1, 3, 4)) @ W.T)
        self.assertTrue(c.contains(outputs, slack=1e-9))


class TestBilinear(unittest.TestCase):
    """
        test relax_bilinear, propagate_mul, propagate_dot_product
    """

    def test_unit_box(self):
        p = relax.relax_bilinear(ConcreteBounds(np.zeros(1), np.ones(1)), ConcreteBounds(np.zeros(1), np.ones(1)))
        np.testing.assert_allclose([p.alpha_x[0], p.alpha_y[0], p.beta[0]], [0.0, 0.0, 0.0])
        np.testing.assert_allclose([p.gamma_x[0], p.gamma_y[0], p.delta[0]], [1.0, 0.0, 0.0])

    def test_plane_grid(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            lx, ux = np.sort(rng.uniform(-3, 3, size=2))
            ly, uy = np.sort(rng.uniform(-3, 3, size=2))
            p = relax.relax_bilinear(ConcreteBounds([lx], [ux]), ConcreteBounds([ly], [uy]))
            gx, gy = np.meshgrid(np.linspace(lx, ux, 32), np.linspace(ly, uy, 32))
            z = gx * gy
            self.assertTrue(np.all(p.lower(gx, gy) <= z + 1e-9))
            self.assertTrue(np.all(z <= p.upper(gx, gy) + 1e-9))

    def test_dot_product_zero_radius(self):
        rng = np.random.default_rng(17)
        q0, k0 = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        spec = PerturbationSpec("linf", 0.0, 2)
        q = LinearBounds(np.zeros((3, 4, 2)), q0, np.zeros((3, 4, 2)), q0)
        k = LinearBounds(np.zeros((5, 4, 2)), k0, np.zeros((5, 4, 2)), k0)
        c = concretize(relax.propagate_dot_product(q, k, spec), spec)
        np.testing.assert_allclose(c.lo, q0 @ k0.T, atol=1e-12)
        np.testing.assert_allclose(c.hi, q0 @ k0.T, atol=1e-12)

    def test_dot_product_errors(self):
        spec = PerturbationSpec("linf", 0.1, 2)
        q = LinearBounds(np.zeros((3, 4, 2)), np.zeros((3, 4)), np.zeros((3, 4, 2)), np.zeros((3, 4)))
        k = LinearBounds(np.zeros((3, 5, 2)), np.zeros((3, 5)), np.zeros((3, 5, 2)), np.zeros((3, 5)))
        with self.assertRaises(ShapeMismatchError):
            relax.propagate_dot_product(q, k, spec)

    @parameterized.expand([("linf",), ("l2",)])
    def test_dot_product_monte_carlo(self, p):
        rng = np.random.default_rng(19)
        length, embed, head = 3, 4, 2
        x0 = rng.standard_normal((length, embed))
        spec = PerturbationSpec(p, 0.1, length * embed)
        Wq, Wk = rng.standard_normal((head, embed)), rng.standard_normal((head, embed))
        x = input_bounds(x0, spec)
        z = relax.propagate_dot_product(relax.propagate_affine(x, Wq), relax.propagate_affine(x, Wk), spec)
        self.assertEqual(z.neuron_shape, (length, length))
        c = concretize(z, spec)

        xs = x0[None] + sample_ball(spec, 10000, rng).reshape(-1, length, embed)
        q, k = xs @ Wq.T, xs @ Wk.T
        self.assertTrue(c.contains(np.einsum("sic,sjc->sij", q, k), slack=1e-9))

    def test_mul_broadcast(self):
        rng = np.random.default_rng(23)
        spec = PerturbationSpec("linf", 0.1, 6)
        x0 = rng.standard_normal((2, 3))
        x = input_bounds(x0, spec)
        y = relax.propagate_reduce_sum(x, axis=0)
        z = relax.propagate_mul(x, y, spec)
        self.assertEqual(z.neuron_shape, (2, 3))
        c = concretize(z, spec)
        xs = x0[None] + sample_ball(spec, 5000, rng).reshape(-1, 2, 3)
        self.assertTrue(c.contains(xs * xs.sum(axis=1, keepdims=True), slack=1e-9))


class TestSoftmax(unittest.TestCase):
    """
        test propagate_softmax
    """

    def test_zero_radius(self):
        logits = np.array([[0.3, -1.2, 2.0], [1.0, 1.0, -0.5]])
        spec = PerturbationSpec("linf", 0.0, 6)
        c = concretize(relax.propagate_softmax(input_bounds(logits, spec), -1, spec), spec)
        np.testing.assert_allclose(c.lo, relax.softmax(logits), atol=1e-6)
        np.testing.assert_allclose(c.hi, relax.softmax(logits), atol=1e-6)

    def test_uniform(self):
        spec = PerturbationSpec("l2", 0.0, 4)
        c = concretize(relax.propagate_softmax(input_bounds(np.full(4, 0.7), spec), -1, spec), spec)
        np.testing.assert_allclose(c.lo, 0.25, atol=1e-9)
        np.testing.assert_allclose(c.hi, 0.25, atol=1e-9)

    @parameterized.expand([("linf",), ("l2",), ("l1",)])
    def test_monte_carlo(self, p):
        rng = np.random.default_rng(29)
        logits = rng.standard_normal(3)
        spec = PerturbationSpec(p, 0.05, 3)
        c = concretize(relax.propagate_softmax(input_bounds(logits, spec), -1, spec), spec)
        samples = relax.softmax(logits[None] + sample_ball(spec, 10000, rng), axis=-1)
        self.assertTrue(c.contains(samples, slack=1e-9))
        self.assertTrue(np.all(c.lo >= -1e-12))

    def test_bad_axis(self):
        spec = PerturbationSpec("linf", 0.1, 3)
        with self.assertRaises(ShapeMismatchError):
            relax.propagate_softmax(input_bounds(np.zeros(3), spec), 2, spec)


if __name__ == "__main__":
    unittest.main()
