"""
Tensors, perturbation balls and the linear-bound data model.

A ``LinearBounds`` object keeps, for every neuron ``i``, two linear functions of the
perturbation vector ``delta``::

    lb[i] + lw[i] . delta  <=  neuron_i(x + delta)  <=  ub[i] + uw[i] . delta

Concretization collapses them to a scalar interval with the dual norm of the ball.
"""

import typing as tp

import numpy as np

from boundcraft.primitives import Norm, Precision
from boundcraft.utils import ShapeMismatchError


def as_tensor(data, precision: Precision = Precision.F64) -> np.ndarray:
    """
    Copy data into a read-only dense tensor.

    Args:
        data: Array-like input.
        precision: Scalar width, 64-bit by default.

    Returns:
        Read-only ``np.ndarray`` of the requested dtype.
    """
    tensor = np.array(data, dtype=precision.dtype)
    assert np.all(np.isfinite(tensor)), "Tensor contains non-finite values"
    tensor.setflags(write=False)
    return tensor


class PerturbationSpec:
    """
    ``PerturbationSpec`` is the ball ``{delta : ||delta||_p <= epsilon}`` over the flattened input.

    Attributes:
        norm: Perturbation ``Norm``.
        epsilon: Radius, non-negative.
        dim: Perturbation dimension D (Length * Dim_in for one sample).
    """

    def __init__(self, p, epsilon: float, dim: int):
        self.norm = Norm.parse(p)
        self.epsilon = float(epsilon)
        self.dim = int(dim)
        assert self.epsilon >= 0, f"Incorrect epsilon = {epsilon}"
        assert np.isfinite(self.epsilon), f"Incorrect epsilon = {epsilon}"
        assert self.dim >= 1, f"Incorrect dim = {dim}"

    @property
    def dual(self) -> Norm:
        return self.norm.dual

    def with_epsilon(self, epsilon: float) -> "PerturbationSpec":
        """
        Same ball with another radius.
        """
        return PerturbationSpec(self.norm, epsilon, self.dim)

    def to_dict(self) -> dict:
        return {"norm": self.norm.value, "epsilon": self.epsilon, "dim": self.dim}

    def __repr__(self) -> str:
        return f"PerturbationSpec(norm={self.norm.value}, epsilon={self.epsilon}, dim={self.dim})"


class LinearBounds:
    """
    ``LinearBounds`` houses per-neuron linear lower and upper bounds over the perturbation.

    Attributes:
        lw: Lower-bound weights, shape ``[*neuron_shape, D]``.
        lb: Lower-bound bias, shape ``neuron_shape``.
        uw: Upper-bound weights, shape ``[*neuron_shape, D]``.
        ub: Upper-bound bias, shape ``neuron_shape``.
    """

    def __init__(self, lw, lb, uw, ub):
        self.lw = _as_float(lw)
        self.lb = _as_float(lb)
        self.uw = _as_float(uw)
        self.ub = _as_float(ub)

        if self.lw.shape != self.uw.shape:
            raise ShapeMismatchError(f"lw shape {self.lw.shape} != uw shape {self.uw.shape}")
        if self.lb.shape != self.ub.shape:
            raise ShapeMismatchError(f"lb shape {self.lb.shape} != ub shape {self.ub.shape}")
        if self.lw.ndim != self.lb.ndim + 1 or self.lw.shape[:-1] != self.lb.shape:
            raise ShapeMismatchError(f"weights {self.lw.shape} do not extend bias {self.lb.shape} by one axis")

    @property
    def neuron_shape(self) -> tp.Tuple[int, ...]:
        return self.lb.shape

    @property
    def dim(self) -> int:
        return self.lw.shape[-1]

    @property
    def size(self) -> int:
        """
        Returns:
            Number of neurons.
        """
        return int(self.lb.size)

    @property
    def dtype(self) -> np.dtype:
        return self.lw.dtype

    def evaluate(self, delta: np.ndarray) -> tp.Tuple[np.ndarray, np.ndarray]:
        """
        Evaluate both linear bounds at given perturbations.

        Args:
            delta: One perturbation ``[D]`` or a stack of them ``[S, D]``.

        Returns:
            (lower, upper) values, shape ``neuron_shape`` or ``[S, *neuron_shape]``.
        """
        delta = np.asarray(delta, dtype=self.dtype)
        if delta.shape[-1] != self.dim:
            raise ShapeMismatchError(f"delta dim {delta.shape[-1]} != bounds dim {self.dim}")
        if delta.ndim == 1:
            return self.lb + self.lw @ delta, self.ub + self.uw @ delta
        lower = self.lb + np.einsum("...d,sd->s...", self.lw, delta)
        upper = self.ub + np.einsum("...d,sd->s...", self.uw, delta)
        return lower, upper

    def reshape_tail(self, tail_ndim: int, new_tail: tp.Sequence[int]) -> "LinearBounds":
        """
        Reshape the last ``tail_ndim`` neuron axes into ``new_tail``.
        """
        lead = self.neuron_shape[: len(self.neuron_shape) - tail_ndim]
        tail = self.neuron_shape[len(lead):]
        new_tail = tuple(int(x) for x in new_tail)
        if int(np.prod(tail)) != int(np.prod(new_tail)):
            raise ShapeMismatchError(f"Cannot reshape tail {tail} into {new_tail}")
        shape = lead + new_tail
        return LinearBounds(
            self.lw.reshape(shape + (self.dim,)),
            self.lb.reshape(shape),
            self.uw.reshape(shape + (self.dim,)),
            self.ub.reshape(shape),
        )

    def transpose_tail(self, perm: tp.Sequence[int]) -> "LinearBounds":
        """
        Permute the last ``len(perm)`` neuron axes.
        """
        axes = tail_axes(len(self.neuron_shape), perm)
        weight_axes = axes + [len(self.neuron_shape)]
        return LinearBounds(
            self.lw.transpose(weight_axes),
            self.lb.transpose(axes),
            self.uw.transpose(weight_axes),
            self.ub.transpose(axes),
        )

    def shift(self, offset) -> "LinearBounds":
        """
        Add a constant to both bounds.
        """
        return LinearBounds(self.lw, self.lb + offset, self.uw, self.ub + offset)

    def astype(self, dtype) -> "LinearBounds":
        return LinearBounds(
            self.lw.astype(dtype), self.lb.astype(dtype), self.uw.astype(dtype), self.ub.astype(dtype)
        )

    def __repr__(self) -> str:
        return f"LinearBounds(neuron_shape={self.neuron_shape}, dim={self.dim})"


class ConcreteBounds:
    """
    ``ConcreteBounds`` is a scalar interval ``[lo, hi]`` per neuron.

    Attributes:
        lo: Lower bounds.
        hi: Upper bounds.
    """

    def __init__(self, lo, hi):
        lo = _as_float(lo)
        hi = _as_float(hi)
        if lo.shape != hi.shape:
            raise ShapeMismatchError(f"lo shape {lo.shape} != hi shape {hi.shape}")
        slack = 1e-7 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        assert np.all(lo <= hi + slack), f"Incorrect interval, max(lo - hi) = {np.max(lo - hi)}"
        # rounding noise only, widen to the hull
        self.lo = np.minimum(lo, hi)
        self.hi = np.maximum(lo, hi)

    @property
    def shape(self) -> tp.Tuple[int, ...]:
        return self.lo.shape

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def intersect(self, other: "ConcreteBounds") -> "ConcreteBounds":
        """
        Intersection of two intervals that both contain the true value.
        """
        return ConcreteBounds(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def contains(self, values: np.ndarray, slack: float = 0.0) -> bool:
        return bool(np.all(values >= self.lo - slack) and np.all(values <= self.hi + slack))

    def __repr__(self) -> str:
        return f"ConcreteBounds(shape={self.shape})"


def input_bounds(x: np.ndarray, spec: PerturbationSpec) -> LinearBounds:
    """
    Bounds of the input itself: ``lb = ub = x`` and one-hot weight rows.

    The trailing axes of ``x`` whose extents multiply to ``spec.dim`` form one perturbation;
    leading axes are a batch of independent samples.

    Args:
        x: Input tensor.
        spec: Perturbation ball.

    Returns:
        Input ``LinearBounds``.
    """
    x = _as_float(x)
    tail = _perturbation_tail(x.shape, spec.dim)
    if tail is None:
        raise ShapeMismatchError(f"Input of shape {x.shape} does not match perturbation dim {spec.dim}")
    eye = np.eye(spec.dim, dtype=x.dtype).reshape(x.shape[len(x.shape) - tail:] + (spec.dim,))
    weights = np.broadcast_to(eye, x.shape + (spec.dim,)).copy()
    return LinearBounds(weights, x.copy(), weights.copy(), x.copy())


def concretize(b: LinearBounds, spec: PerturbationSpec) -> ConcreteBounds:
    """
    Concretize linear bounds over the ball with the dual norm ``q``::

        lo = lb - epsilon * ||lw||_q,  hi = ub + epsilon * ||uw||_q

    Args:
        b: Linear bounds.
        spec: Perturbation ball.

    Returns:
        Per-neuron ``ConcreteBounds``.
    """
    if b.dim != spec.dim:
        raise ShapeMismatchError(f"Bounds dim {b.dim} != perturbation dim {spec.dim}")
    if spec.epsilon == 0:
        return ConcreteBounds(b.lb, b.ub)
    order = spec.dual.order
    lo = b.lb - spec.epsilon * np.linalg.norm(b.lw, ord=order, axis=-1)
    hi = b.ub + spec.epsilon * np.linalg.norm(b.uw, ord=order, axis=-1)
    return ConcreteBounds(lo, hi)


def check_robust(pred_bounds: ConcreteBounds, true_class: int, margin: float = 0.0) -> bool:
    """
    Robustness criterion: ``lo[true_class] > hi[j] + margin`` for every other class ``j``.

    Args:
        pred_bounds: Concretized logits, shape ``[num_classes]``.
        true_class: Index of the expected class.
        margin: Required gap c >= 0.

    Returns:
        True if verified.
    """
    if len(pred_bounds.shape) != 1:
        raise ShapeMismatchError(f"Expected a logit vector, got shape {pred_bounds.shape}")
    num_classes = pred_bounds.shape[0]
    if not 0 <= true_class < num_classes:
        raise IndexError(f"Incorrect true_class = {true_class} for {num_classes} classes")
    assert margin >= 0, f"Incorrect margin = {margin}"

    others = np.delete(pred_bounds.hi, true_class)
    return bool(np.all(pred_bounds.lo[true_class] > others + margin))


def sample_ball(
    spec: PerturbationSpec, n: int, rng: np.random.Generator, boundary_fraction: float = 0.25
) -> np.ndarray:
    """
    Sample perturbations inside the ball, a share of them on its boundary.

    Args:
        spec: Perturbation ball.
        n: Number of samples.
        rng: Numpy generator.
        boundary_fraction: Share of samples placed on the boundary (vertices for l1 and linf).

    Returns:
        Samples ``[n, D]``.
    """
    dim, eps = spec.dim, spec.epsilon
    n_boundary = int(n * boundary_fraction)
    n_inner = n - n_boundary

    if spec.norm is Norm.LINF:
        inner = rng.uniform(-eps, eps, size=(n_inner, dim))
        boundary = eps * rng.choice([-1.0, 1.0], size=(n_boundary, dim))
    elif spec.norm is Norm.L2:
        direction = rng.standard_normal(size=(n, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = eps * rng.uniform(size=(n, 1)) ** (1.0 / dim)
        radius[n_inner:] = eps
        return direction * radius
    else:
        exps = rng.exponential(size=(n_inner, dim + 1))
        simplex = exps[:, :dim] / exps.sum(axis=1, keepdims=True)
        inner = eps * simplex * rng.choice([-1.0, 1.0], size=(n_inner, dim))
        boundary = np.zeros((n_boundary, dim))
        axes = rng.integers(0, dim, size=n_boundary)
        boundary[np.arange(n_boundary), axes] = eps * rng.choice([-1.0, 1.0], size=n_boundary)

    return np.concatenate([inner, boundary], axis=0)


def tail_axes(ndim: int, perm: tp.Sequence[int]) -> tp.List[int]:
    """
    Full axis order permuting only the last ``len(perm)`` of ``ndim`` axes.
    """
    start = ndim - len(perm)
    if start < 0 or sorted(perm) != list(range(len(perm))):
        raise ShapeMismatchError(f"Incorrect permutation {perm} for {ndim} axes")
    return list(range(start)) + [start + int(p) for p in perm]


def _perturbation_tail(shape: tp.Tuple[int, ...], dim: int) -> tp.Optional[int]:
    # the whole input first, then at least one trailing axis under a batch
    if int(np.prod(shape)) == dim:
        return len(shape)
    for tail in range(1, len(shape)):
        if int(np.prod(shape[len(shape) - tail:])) == dim:
            return tail
    return None


def _as_float(value) -> np.ndarray:
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr
