"""
Bound-propagation rules for every verified operator, plus the exact forward pass used as oracle.

Elementwise nonlinearities are relaxed by one pair of lines per neuron on its concretized
interval (``ElementwiseLinearRelaxation``) and composed into the bounds sign-aware.
Products of two bounded operands use McCormick planes (``BilinearRelaxation``).
"""

import typing as tp
from collections import namedtuple
from functools import partial

import numpy as np

from boundcraft.core import ConcreteBounds, LinearBounds, PerturbationSpec, concretize, tail_axes
from boundcraft.primitives import OpKind
from boundcraft.utils import DomainError, ShapeMismatchError, UnknownOpError


TANGENT_TOL = 1e-6
TANGENT_MAX_ITER = 60
SOFTMAX_FLOOR = 1e-300

# one side of an affine output: weights [..., out, D] and bias [..., out]
HalfBounds = namedtuple("HalfBounds", ["w", "b"])


class ElementwiseLinearRelaxation:
    """
    ``ElementwiseLinearRelaxation`` holds per-neuron lines
    ``a_low * x + b_low <= f(x) <= a_up * x + b_up`` valid on the neuron interval.

    Attributes:
        a_low: Lower line slopes.
        b_low: Lower line intercepts.
        a_up: Upper line slopes.
        b_up: Upper line intercepts.
    """

    def __init__(self, a_low, b_low, a_up, b_up):
        self.a_low, self.b_low, self.a_up, self.b_up = np.broadcast_arrays(
            np.asarray(a_low, dtype=float), np.asarray(b_low, dtype=float),
            np.asarray(a_up, dtype=float), np.asarray(b_up, dtype=float),
        )

    @property
    def shape(self) -> tp.Tuple[int, ...]:
        return self.a_low.shape

    @classmethod
    def identity(cls, shape) -> "ElementwiseLinearRelaxation":
        ones, zeros = np.ones(shape), np.zeros(shape)
        return cls(ones, zeros, ones, zeros)

    @classmethod
    def constant(cls, low, up) -> "ElementwiseLinearRelaxation":
        """
        Flat lines ``low <= f(x) <= up``.
        """
        low = np.asarray(low, dtype=float)
        up = np.asarray(up, dtype=float)
        return cls(np.zeros_like(low), low, np.zeros_like(up), up)

    def lower(self, x) -> np.ndarray:
        return self.a_low * x + self.b_low

    def upper(self, x) -> np.ndarray:
        return self.a_up * x + self.b_up


class BilinearRelaxation:
    """
    ``BilinearRelaxation`` holds McCormick planes for ``z = x * y`` on ``[lx, ux] x [ly, uy]``::

        alpha_x * x + alpha_y * y + beta  <=  z  <=  gamma_x * x + gamma_y * y + delta
    """

    def __init__(self, alpha_x, alpha_y, beta, gamma_x, gamma_y, delta):
        self.alpha_x = alpha_x
        self.alpha_y = alpha_y
        self.beta = beta
        self.gamma_x = gamma_x
        self.gamma_y = gamma_y
        self.delta = delta

    def lower(self, x, y) -> np.ndarray:
        return self.alpha_x * x + self.alpha_y * y + self.beta

    def upper(self, x, y) -> np.ndarray:
        return self.gamma_x * x + self.gamma_y * y + self.delta


# ---------------------------------------------------------------- exact forward


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def silu(x):
    x = np.asarray(x, dtype=float)
    return x * sigmoid(x)


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=float)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def split_weight(W: np.ndarray) -> tp.Tuple[np.ndarray, np.ndarray]:
    """
    Sign split with ``W_pos + W_neg == W``.
    """
    W = np.asarray(W)
    return np.maximum(W, 0), np.minimum(W, 0)


def forward(kind, *inputs, **attrs) -> np.ndarray:
    """
    Exact forward evaluation of one operator.

    Args:
        kind: ``OpKind`` or its json name.
        inputs: Operand tensors.
        attrs: Operator attributes; weights are passed as arrays (``weight``, ``bias``).

    Returns:
        Operator output.
    """
    kind = _parse_kind(kind)
    x = np.asarray(inputs[0], dtype=float) if inputs else None

    if kind is OpKind.INPUT:
        return x
    if kind is OpKind.AFFINE:
        W = np.asarray(attrs["weight"])
        _check_inner(x.shape, W)
        y = x @ W.T
        return y if attrs.get("bias") is None else y + attrs["bias"]
    if kind is OpKind.SPLIT_WEIGHT:
        return split_weight(attrs["weight"])
    if kind is OpKind.BOUND_MATMUL:
        w_pos, w_neg = split_weight(attrs["weight"]) if len(inputs) == 1 else inputs[1]
        _check_inner(x.shape, w_pos)
        y = x @ w_pos.T + x @ w_neg.T
        return y if attrs.get("bias") is None else y + attrs["bias"]
    if kind is OpKind.MERGE_BOUNDS:
        return x if attrs.get("bias") is None else x + attrs["bias"]
    if kind is OpKind.RELU:
        return np.maximum(x, 0)
    if kind is OpKind.LEAKY_RELU:
        slope = attrs.get("slope", 0.01)
        return np.where(x >= 0, x, slope * x)
    if kind is OpKind.TANH:
        return np.tanh(x)
    if kind is OpKind.SILU:
        return silu(x)
    if kind is OpKind.EXP:
        return np.exp(x)
    if kind is OpKind.RECIP:
        return 1.0 / x
    if kind is OpKind.SOFTMAX:
        return softmax(x, axis=attrs.get("axis", -1))
    if kind is OpKind.MUL:
        y = np.asarray(inputs[1], dtype=float)
        _broadcast_shape(x.shape, y.shape)
        return x * y
    if kind is OpKind.REDUCE_SUM:
        return np.sum(x, axis=attrs.get("axis", -1), keepdims=attrs.get("keepdims", False))
    if kind is OpKind.ADD:
        y = np.asarray(inputs[1], dtype=float)
        if x.shape != y.shape:
            raise ShapeMismatchError(f"add operands {x.shape} and {y.shape}")
        return x + y
    if kind is OpKind.SCALE:
        return attrs["factor"] * x
    if kind is OpKind.RESHAPE:
        tail_ndim = attrs["tail_ndim"]
        new_shape = x.shape[: x.ndim - tail_ndim] + tuple(attrs["shape"])
        if int(np.prod(new_shape)) != x.size:
            raise ShapeMismatchError(f"Cannot reshape {x.shape} into {new_shape}")
        return x.reshape(new_shape)
    if kind is OpKind.TRANSPOSE:
        return x.transpose(tail_axes(x.ndim, attrs["perm"]))
    if kind is OpKind.DOT_PRODUCT:
        y = np.asarray(inputs[1], dtype=float)
        _check_dot(x.shape, y.shape)
        return np.einsum("...ic,...jc->...ij", x, y)
    if kind is OpKind.MEAN_POOL:
        return np.mean(x, axis=attrs.get("axis", -2))
    raise UnknownOpError(f"No forward rule for {kind}")


# ---------------------------------------------------------------- affine


def propagate_affine_side(x: LinearBounds, w_pos: np.ndarray, w_neg: np.ndarray, side: str) -> HalfBounds:
    """
    One side of the sign-split affine rule (no bias)::

        lower = W_pos @ x_lower + W_neg @ x_upper
        upper = W_pos @ x_upper + W_neg @ x_lower
    """
    _check_inner(x.neuron_shape, w_pos)
    if side == "lower":
        return HalfBounds(w_pos @ x.lw + w_neg @ x.uw, x.lb @ w_pos.T + x.ub @ w_neg.T)
    if side == "upper":
        return HalfBounds(w_pos @ x.uw + w_neg @ x.lw, x.ub @ w_pos.T + x.lb @ w_neg.T)
    raise ValueError(f"Incorrect side = {side}")


def merge_sides(lower: HalfBounds, upper: HalfBounds, bias: tp.Optional[np.ndarray] = None) -> LinearBounds:
    lb, ub = lower.b, upper.b
    if bias is not None:
        lb = lb + bias
        ub = ub + bias
    return LinearBounds(lower.w, lb, upper.w, ub)


def propagate_affine(x: LinearBounds, W: np.ndarray, bias: tp.Optional[np.ndarray] = None) -> LinearBounds:
    """
    Affine layer ``y = W x + bias`` over the last neuron axis, bounds split by weight sign.

    Args:
        x: Input bounds ``[..., in]``.
        W: Weight ``[out, in]``.
        bias: Optional bias ``[out]``.

    Returns:
        Output bounds ``[..., out]``.
    """
    W = np.asarray(W, dtype=x.dtype)
    if W.ndim != 2:
        raise ShapeMismatchError(f"Weight must be a matrix, got shape {W.shape}")
    w_pos, w_neg = split_weight(W)
    lower = propagate_affine_side(x, w_pos, w_neg, "lower")
    upper = propagate_affine_side(x, w_pos, w_neg, "upper")
    return merge_sides(lower, upper, None if bias is None else np.asarray(bias, dtype=x.dtype))


# ---------------------------------------------------------------- elementwise relaxations


def relax_relu(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    ReLU lines. Mixed-sign neurons get the chord as upper line and ``y = alpha * x`` below,
    ``alpha = 0`` when ``|lo| > |hi|`` and 1 otherwise.
    """
    lo, hi = c.lo, c.hi
    positive = lo >= 0
    mixed = ~positive & (hi > 0)

    slope = np.where(mixed, hi / np.where(mixed, hi - lo, 1.0), 0.0)
    a_up = np.where(positive, 1.0, slope)
    b_up = np.where(mixed, -slope * lo, 0.0)
    a_low = np.where(positive, 1.0, np.where(mixed & ~(np.abs(lo) > np.abs(hi)), 1.0, 0.0))
    return ElementwiseLinearRelaxation(a_low, np.zeros_like(lo), a_up, b_up)


def relax_leaky_relu(c: ConcreteBounds, slope: float = 0.01) -> ElementwiseLinearRelaxation:
    """
    Leaky ReLU lines, ``0 <= slope <= 1``. Same case split as ReLU with ``slope * x`` on the negative side.
    """
    assert 0 <= slope <= 1, f"Incorrect slope = {slope}"
    lo, hi = c.lo, c.hi
    positive = lo >= 0
    negative = ~positive & (hi <= 0)
    mixed = ~positive & ~negative

    width = np.where(mixed, hi - lo, 1.0)
    chord = np.where(mixed, (hi - slope * lo) / width, 0.0)
    a_up = np.where(positive, 1.0, np.where(negative, slope, chord))
    b_up = np.where(mixed, hi - chord * hi, 0.0)
    a_low = np.where(positive, 1.0, np.where(negative | (np.abs(lo) > np.abs(hi)), slope, 1.0))
    return ElementwiseLinearRelaxation(a_low, np.zeros_like(lo), a_up, b_up)


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


def _tangent(f, df, d) -> tp.Tuple[np.ndarray, np.ndarray]:
    slope = df(d)
    return slope, f(d) - slope * d


def _chord(f, df, lo, hi) -> tp.Tuple[np.ndarray, np.ndarray]:
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    slope = np.where(width > 0, (f(hi) - f(lo)) / safe, df(lo))
    return slope, f(lo) - slope * lo


def _tanh_upper_mixed(lo: np.ndarray, hi: np.ndarray) -> tp.Tuple[np.ndarray, np.ndarray]:
    """
    Upper line for ``lo < 0 < hi``: the tangent at ``d in [0, hi]`` passing through ``(lo, tanh lo)``,
    or the chord when no such tangent point exists in the interval.
    """

    def gap(d):
        return np.tanh(d) + _tanh_grad(d) * (lo - d) - np.tanh(lo)

    has_tangent = gap(hi) >= 0
    left = np.zeros_like(hi)
    right = hi.copy()
    for _ in range(TANGENT_MAX_ITER):
        if np.all(right - left <= TANGENT_TOL):
            break
        mid = 0.5 * (left + right)
        above = gap(mid) >= 0
        right = np.where(above, mid, right)
        left = np.where(above, left, mid)

    # gap grows with d, so the right end keeps the line above (lo, tanh lo)
    t_slope, t_icpt = _tangent(np.tanh, _tanh_grad, right)
    c_slope, c_icpt = _chord(np.tanh, _tanh_grad, lo, hi)
    return np.where(has_tangent, t_slope, c_slope), np.where(has_tangent, t_icpt, c_icpt)


def relax_tanh(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    Tanh lines by region. ``lo >= 0``: chord below, midpoint tangent above.
    ``hi <= 0``: midpoint tangent below, chord above. Mixed sign: tangents found by bisection.
    """
    lo, hi = c.lo, c.hi
    mid = 0.5 * (lo + hi)
    positive = lo >= 0
    negative = ~positive & (hi <= 0)
    mixed = ~positive & ~negative

    chord_a, chord_b = _chord(np.tanh, _tanh_grad, lo, hi)
    tan_a, tan_b = _tangent(np.tanh, _tanh_grad, mid)

    mlo = np.where(mixed, lo, -1.0)
    mhi = np.where(mixed, hi, 1.0)
    up_a, up_b = _tanh_upper_mixed(mlo, mhi)
    # odd symmetry: the lower line on [lo, hi] mirrors the upper line on [-hi, -lo]
    low_a, low_b = _tanh_upper_mixed(-mhi, -mlo)
    low_b = -low_b

    a_low = np.where(positive, chord_a, np.where(negative, tan_a, low_a))
    b_low = np.where(positive, chord_b, np.where(negative, tan_b, low_b))
    a_up = np.where(positive, tan_a, np.where(negative, chord_a, up_a))
    b_up = np.where(positive, tan_b, np.where(negative, chord_b, up_b))
    return ElementwiseLinearRelaxation(a_low, b_low, a_up, b_up)


def relax_sigmoid(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    Sigmoid lines from the Tanh lines via ``sigmoid(x) = (1 + tanh(x / 2)) / 2``.
    """
    half = relax_tanh(ConcreteBounds(0.5 * c.lo, 0.5 * c.hi))
    return ElementwiseLinearRelaxation(
        0.25 * half.a_low, 0.5 + 0.5 * half.b_low, 0.25 * half.a_up, 0.5 + 0.5 * half.b_up
    )


def relax_silu(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    SiLU lines: McCormick planes for ``x * y`` with ``y = sigmoid(x)`` in ``[sigmoid(lo), sigmoid(hi)]``,
    the ``lo * y`` term replaced by the matching sigmoid line.
    """
    lo = c.lo
    ly, uy = sigmoid(c.lo), sigmoid(c.hi)
    sig = relax_sigmoid(c)
    nonneg = lo >= 0

    a_low = ly + lo * np.where(nonneg, sig.a_low, sig.a_up)
    b_low = -lo * ly + lo * np.where(nonneg, sig.b_low, sig.b_up)
    a_up = uy + lo * np.where(nonneg, sig.a_up, sig.a_low)
    b_up = -lo * uy + lo * np.where(nonneg, sig.b_up, sig.b_low)
    return ElementwiseLinearRelaxation(a_low, b_low, a_up, b_up)


def relax_exp(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    Exp lines: tangent at the midpoint below, chord above.
    """
    lo, hi = c.lo, c.hi
    mid = 0.5 * (lo + hi)
    e_mid = np.exp(mid)
    e_lo, e_hi = np.exp(lo), np.exp(hi)
    width = hi - lo
    up_a = np.where(width > 0, (e_hi - e_lo) / np.where(width > 0, width, 1.0), e_lo)
    return ElementwiseLinearRelaxation(e_mid, e_mid * (1.0 - mid), up_a, e_lo - up_a * lo)


def relax_recip(c: ConcreteBounds) -> ElementwiseLinearRelaxation:
    """
    Reciprocal lines on a positive interval: tangent at the midpoint below, chord above.
    """
    lo, hi = c.lo, c.hi
    if np.any(lo <= 0):
        raise DomainError(f"Reciprocal needs lo > 0, got min(lo) = {np.min(lo)}")
    mid = 0.5 * (lo + hi)
    return ElementwiseLinearRelaxation(-1.0 / mid ** 2, 2.0 / mid, -1.0 / (lo * hi), 1.0 / lo + 1.0 / hi)


RELAXATIONS = {
    OpKind.RELU: relax_relu,
    OpKind.LEAKY_RELU: relax_leaky_relu,
    OpKind.TANH: relax_tanh,
    OpKind.SILU: relax_silu,
    OpKind.EXP: relax_exp,
    OpKind.RECIP: relax_recip,
}


def relaxation_producer(kind, **attrs) -> tp.Callable[[ConcreteBounds], ElementwiseLinearRelaxation]:
    """
    Relaxation function for an elementwise operator kind.
    """
    kind = _parse_kind(kind)
    if kind not in RELAXATIONS:
        raise UnknownOpError(f"No relaxation for {kind}")
    if kind is OpKind.LEAKY_RELU:
        return partial(relax_leaky_relu, slope=attrs.get("slope", 0.01))
    return RELAXATIONS[kind]


def compose_elementwise(x: LinearBounds, r: ElementwiseLinearRelaxation) -> LinearBounds:
    """
    Apply per-neuron lines to linear bounds. A non-negative slope keeps the side,
    a negative slope takes the opposite side of ``x``.
    """
    if r.shape != x.neuron_shape:
        raise ShapeMismatchError(f"Relaxation shape {r.shape} != bounds shape {x.neuron_shape}")
    lw, lb = _scaled_side(x, r.a_low, "lower")
    uw, ub = _scaled_side(x, r.a_up, "upper")
    return LinearBounds(lw, lb + r.b_low, uw, ub + r.b_up)


def propagate_activation(x: LinearBounds, kind, spec: PerturbationSpec, **attrs) -> LinearBounds:
    """
    Concretize, relax and compose one elementwise nonlinearity.
    """
    producer = relaxation_producer(kind, **attrs)
    return compose_elementwise(x, producer(concretize(x, spec)))


def _scaled_side(x: LinearBounds, coeff: np.ndarray, side: str) -> tp.Tuple[np.ndarray, np.ndarray]:
    """
    Bound of ``coeff * x`` on one side, picking the x side by the sign of ``coeff``.
    """
    coeff = np.asarray(coeff, dtype=x.dtype)
    keep = coeff >= 0
    if side == "lower":
        same_w, same_b, other_w, other_b = x.lw, x.lb, x.uw, x.ub
    else:
        same_w, same_b, other_w, other_b = x.uw, x.ub, x.lw, x.lb
    w = coeff[..., None] * np.where(keep[..., None], same_w, other_w)
    b = coeff * np.where(keep, same_b, other_b)
    return w, b


# ---------------------------------------------------------------- linear structure ops


def propagate_add(x: LinearBounds, y: LinearBounds) -> LinearBounds:
    if x.neuron_shape != y.neuron_shape or x.dim != y.dim:
        raise ShapeMismatchError(f"add operands {x} and {y}")
    return LinearBounds(x.lw + y.lw, x.lb + y.lb, x.uw + y.uw, x.ub + y.ub)


def propagate_scale(x: LinearBounds, factor: float) -> LinearBounds:
    if factor >= 0:
        return LinearBounds(factor * x.lw, factor * x.lb, factor * x.uw, factor * x.ub)
    return LinearBounds(factor * x.uw, factor * x.ub, factor * x.lw, factor * x.lb)


def propagate_reduce_sum(x: LinearBounds, axis: int = -1, keepdims: bool = False) -> LinearBounds:
    """
    Sum over one neuron axis (an affine map with all-ones weights).
    """
    axis = _neuron_axis(x, axis)
    return LinearBounds(
        np.sum(x.lw, axis=axis, keepdims=keepdims),
        np.sum(x.lb, axis=axis, keepdims=keepdims),
        np.sum(x.uw, axis=axis, keepdims=keepdims),
        np.sum(x.ub, axis=axis, keepdims=keepdims),
    )


def propagate_mean(x: LinearBounds, axis: int = -2) -> LinearBounds:
    axis = _neuron_axis(x, axis)
    return propagate_scale(propagate_reduce_sum(x, axis), 1.0 / x.neuron_shape[axis])


def propagate_reshape(x: LinearBounds, tail_ndim: int, shape: tp.Sequence[int]) -> LinearBounds:
    return x.reshape_tail(tail_ndim, shape)


def propagate_transpose(x: LinearBounds, perm: tp.Sequence[int]) -> LinearBounds:
    return x.transpose_tail(perm)


# ---------------------------------------------------------------- bilinear


def relax_bilinear(cx: ConcreteBounds, cy: ConcreteBounds) -> BilinearRelaxation:
    """
    McCormick planes ``z >= ly*x + lx*y - lx*ly`` and ``z <= uy*x + lx*y - lx*uy``.
    """
    lx, ly, uy = cx.lo, cy.lo, cy.hi
    return BilinearRelaxation(ly, lx, -lx * ly, uy, lx, -lx * uy)


def propagate_mul(
    x: LinearBounds,
    y: LinearBounds,
    spec: PerturbationSpec,
    x_box: tp.Optional[ConcreteBounds] = None,
    y_box: tp.Optional[ConcreteBounds] = None,
) -> LinearBounds:
    """
    Elementwise product of two bounded tensors with numpy broadcasting.

    Args:
        x, y: Operand bounds.
        spec: Perturbation ball.
        x_box, y_box: Optional tighter intervals known to contain the operands.

    Returns:
        Bounds of ``x * y``.
    """
    shape = _broadcast_shape(x.neuron_shape, y.neuron_shape)
    cx = concretize(x, spec) if x_box is None else x_box
    cy = concretize(y, spec) if y_box is None else y_box
    planes = relax_bilinear(cx, cy)

    xb = _broadcast_bounds(x, shape)
    yb = _broadcast_bounds(y, shape)
    alpha_x, alpha_y, beta, gamma_x, gamma_y, delta = (
        np.broadcast_to(v, shape)
        for v in (planes.alpha_x, planes.alpha_y, planes.beta, planes.gamma_x, planes.gamma_y, planes.delta)
    )

    lw_x, lb_x = _scaled_side(xb, alpha_x, "lower")
    lw_y, lb_y = _scaled_side(yb, alpha_y, "lower")
    uw_x, ub_x = _scaled_side(xb, gamma_x, "upper")
    uw_y, ub_y = _scaled_side(yb, gamma_y, "upper")
    return LinearBounds(lw_x + lw_y, lb_x + lb_y + beta, uw_x + uw_y, ub_x + ub_y + delta)


def propagate_dot_product(q: LinearBounds, k: LinearBounds, spec: PerturbationSpec) -> LinearBounds:
    """
    Bounds of ``z[..., i, j] = sum_c q[..., i, c] * k[..., j, c]``.

    Every product term gets the McCormick planes of its concretized boxes; plane coefficients
    are composed with the operand bounds sign-aware and summed over the contraction axis.

    Args:
        q: Bounds ``[..., L1, C]``.
        k: Bounds ``[..., L2, C]``.
        spec: Perturbation ball.

    Returns:
        Bounds ``[..., L1, L2]``.
    """
    _check_dot(q.neuron_shape, k.neuron_shape)
    if q.dim != k.dim:
        raise ShapeMismatchError(f"Perturbation dims {q.dim} != {k.dim}")
    cq = concretize(q, spec)
    ck = concretize(k, spec)
    lx, ly, uy = cq.lo, ck.lo, ck.hi

    def weights(coeff, bounds_pos, bounds_neg, pattern):
        return np.einsum(pattern, np.maximum(coeff, 0), bounds_pos) + np.einsum(pattern, np.minimum(coeff, 0), bounds_neg)

    # coefficient on q indexed [j, c], coefficient on k indexed [i, c]
    q_w, q_b = "...jc,...icd->...ijd", "...jc,...ic->...ij"
    k_w, k_b = "...ic,...jcd->...ijd", "...ic,...jc->...ij"
    cross = "...ic,...jc->...ij"

    lw = weights(ly, q.lw, q.uw, q_w) + weights(lx, k.lw, k.uw, k_w)
    lb = weights(ly, q.lb, q.ub, q_b) + weights(lx, k.lb, k.ub, k_b) - np.einsum(cross, lx, ly)
    uw = weights(uy, q.uw, q.lw, q_w) + weights(lx, k.uw, k.lw, k_w)
    ub = weights(uy, q.ub, q.lb, q_b) + weights(lx, k.ub, k.lb, k_b) - np.einsum(cross, lx, uy)
    return LinearBounds(lw, lb, uw, ub)


# ---------------------------------------------------------------- softmax


def propagate_softmax(x: LinearBounds, axis: int, spec: PerturbationSpec) -> LinearBounds:
    """
    Softmax bounds as exp -> sum -> reciprocal -> product.

    The logits are first shifted by the row maximum of their upper bounds (softmax is shift
    invariant), and every intermediate interval is intersected with its true range.
    Rows whose normalizer lower bound underflows fall back to the constant bounds ``[0, 1]``.

    Args:
        x: Logit bounds.
        axis: Neuron axis to normalize over.
        spec: Perturbation ball.

    Returns:
        Probability bounds, same shape as ``x``.
    """
    axis = _neuron_axis(x, axis)
    c = concretize(x, spec)
    offset = np.max(c.hi, axis=axis, keepdims=True)
    shifted = x.shift(-offset)
    c_shifted = ConcreteBounds(c.lo - offset, c.hi - offset)

    e = compose_elementwise(shifted, relax_exp(c_shifted))
    e_box = ConcreteBounds(np.exp(c_shifted.lo), np.exp(c_shifted.hi)).intersect(concretize(e, spec))

    s = propagate_reduce_sum(e, axis=axis, keepdims=True)
    s_box = concretize(s, spec).intersect(
        ConcreteBounds(np.sum(e_box.lo, axis=axis, keepdims=True), np.sum(e_box.hi, axis=axis, keepdims=True))
    )
    degenerate = ~(s_box.lo > SOFTMAX_FLOOR) | ~np.isfinite(s_box.hi)
    s_lo = np.where(degenerate, 1.0, s_box.lo)
    s_box = ConcreteBounds(s_lo, np.where(degenerate, 1.0, np.maximum(s_box.hi, s_lo)))

    r = compose_elementwise(s, relax_recip(s_box))
    r_box = ConcreteBounds(1.0 / s_box.hi, 1.0 / s_box.lo).intersect(concretize(r, spec))
    p = propagate_mul(e, r, spec, x_box=e_box, y_box=r_box)

    fallback = np.broadcast_to(degenerate, p.neuron_shape)
    if not np.any(fallback):
        return p
    wmask = fallback[..., None]
    return LinearBounds(
        np.where(wmask, 0.0, p.lw), np.where(fallback, 0.0, p.lb),
        np.where(wmask, 0.0, p.uw), np.where(fallback, 1.0, p.ub),
    )


# ---------------------------------------------------------------- helpers


def _parse_kind(kind) -> OpKind:
    if isinstance(kind, OpKind):
        return kind
    try:
        return OpKind(kind)
    except ValueError:
        raise UnknownOpError(f"Unknown operator kind = {kind}")


def _check_inner(shape: tp.Tuple[int, ...], W: np.ndarray):
    if len(shape) == 0 or shape[-1] != W.shape[1]:
        raise ShapeMismatchError(f"Input shape {shape} does not conform to weight {W.shape}")


def _check_dot(a: tp.Tuple[int, ...], b: tp.Tuple[int, ...]):
    if len(a) < 2 or len(b) < 2 or a[:-2] != b[:-2] or a[-1] != b[-1]:
        raise ShapeMismatchError(f"dot product operands {a} and {b}")


def _broadcast_shape(a, b) -> tp.Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError:
        raise ShapeMismatchError(f"Shapes {a} and {b} do not broadcast")


def _broadcast_bounds(x: LinearBounds, shape: tp.Tuple[int, ...]) -> LinearBounds:
    if x.neuron_shape == shape:
        return x
    pad = (1,) * (len(shape) - len(x.neuron_shape))
    lw = x.lw.reshape(pad + x.lw.shape)
    uw = x.uw.reshape(pad + x.uw.shape)
    return LinearBounds(
        np.broadcast_to(lw, shape + (x.dim,)),
        np.broadcast_to(x.lb.reshape(pad + x.lb.shape), shape),
        np.broadcast_to(uw, shape + (x.dim,)),
        np.broadcast_to(x.ub.reshape(pad + x.ub.shape), shape),
    )


def _neuron_axis(x: LinearBounds, axis: int) -> int:
    ndim = len(x.neuron_shape)
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"Axis {axis} out of range for neuron shape {x.neuron_shape}")
    return axis % ndim
