import math
from enum import Enum

import numpy as np


WARP_SIZE = 32

MODEL_FORMAT = "boundcraft-model/v1"
EMBEDDING_FORMAT = "boundcraft-embedding/v1"
GRAPH_FORMAT = "boundcraft-graph/v1"
SCHEDULE_FORMAT = "boundcraft-schedule/v1"


class Norm(Enum):
    """
    ``Norm`` defines the norm of the perturbation ball.
    Concretization uses the dual norm: ``dual(linf) = l1``, ``dual(l2) = l2``, ``dual(l1) = linf``.
    """

    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @property
    def order(self) -> float:
        """
        Returns:
            Norm order accepted by ``np.linalg.norm``: 1, 2 or inf.
        """
        return NORM_ORDERS[self]

    @property
    def dual(self) -> "Norm":
        """
        Returns:
            Dual norm used to concretize linear bounds over this ball.
        """
        return DUAL_NORMS[self]

    @classmethod
    def parse(cls, value) -> "Norm":
        """
        Parse norm from cli string ("l1", "l2", "linf", "inf") or number (1, 2, inf).

        Args:
            value: Norm name or order.

        Returns:
            ``Norm`` member.
        """
        if isinstance(value, Norm):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("inf", "linf", "l_inf", "infinity"):
                return cls.LINF
            if key in ("1", "l1"):
                return cls.L1
            if key in ("2", "l2"):
                return cls.L2
            raise ValueError(f"Unknown norm = {value}")
        if value == 1:
            return cls.L1
        if value == 2:
            return cls.L2
        if math.isinf(value):
            return cls.LINF
        raise ValueError(f"Unknown norm = {value}")


class Precision(Enum):
    """
    ``Precision`` is the scalar width of tensors and executors.
    64-bit is the default, 32-bit is used for benchmarking only.
    """

    F64 = "f64"
    F32 = "f32"

    @property
    def dtype(self) -> np.dtype:
        """
        Returns:
            Numpy dtype of this precision.
        """
        return np.dtype(np.float64) if self is Precision.F64 else np.dtype(np.float32)

    @property
    def elem_size(self) -> int:
        """
        Returns:
            Bytes per scalar, 8 or 4.
        """
        return self.dtype.itemsize


class OpCategory(Enum):
    """
    ``OpCategory`` drives cross-layer fusion legality.

    | INPUT_REDUCTION_COMPUTE - reduces or concretizes its input (nonlinear verification, softmax).
    | STRICT_ELEMENTWISE - elementwise work without concretization (add, scale, layout).
    | DENSE_COMPUTATION - matrix products (affine, dot product).
    """

    INPUT_REDUCTION_COMPUTE = "input_reduction_compute"
    STRICT_ELEMENTWISE = "strict_elementwise"
    DENSE_COMPUTATION = "dense_computation"


class OpKind(Enum):
    """
    ``OpKind`` is the operator kind of a ``VerGraph`` node. Values are the json names.
    """

    INPUT = "input"
    AFFINE = "affine"
    SPLIT_WEIGHT = "split_weight"
    BOUND_MATMUL = "bound_matmul"
    MERGE_BOUNDS = "merge_bounds"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SILU = "silu"
    EXP = "exp"
    RECIP = "recip"
    SOFTMAX = "softmax"
    MUL = "mul"
    REDUCE_SUM = "reduce_sum"
    ADD = "add"
    SCALE = "scale"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    DOT_PRODUCT = "dot_product"
    MEAN_POOL = "mean_pool"

    @property
    def category(self) -> OpCategory:
        """
        Returns:
            Fusion category of the operator.
        """
        return OP_CATEGORIES[self]

    @property
    def is_activation(self) -> bool:
        """
        Returns:
            True for elementwise nonlinear operators relaxed by a line pair.
        """
        return self in (OpKind.RELU, OpKind.LEAKY_RELU, OpKind.TANH, OpKind.SILU, OpKind.EXP, OpKind.RECIP)


class Pattern(Enum):
    """
    ``Pattern`` is one of the four computing patterns a ``Schedule`` maps onto the machine.
    """

    GEMM = "gemm"
    VECTOR_REDUCTION = "vector_reduction"
    ELEMENTWISE_MUL = "elementwise_mul"
    SCALAR_VECTOR = "scalar_vector"


class ReductionMode(Enum):
    """
    ``ReductionMode`` selects how one warp reduces a vector of n scalars.

    | SEQUENTIAL - one thread accumulates all n scalars.
    | PARALLEL32 - 32 scalars, one per lane, reduced by a 5-step shuffle tree.
    | HYBRID - each lane accumulates k = n / 32 scalars, then one shuffle tree.
    | CHUNKED - one shuffle tree per 32-scalar chunk plus a carry, the naive baseline.
    """

    SEQUENTIAL = "sequential"
    PARALLEL32 = "parallel32"
    HYBRID = "hybrid"
    CHUNKED = "chunked"


class Activation(Enum):
    """
    ``Activation`` of the transformer feed-forward block.
    """

    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SILU = "silu"

    @property
    def op_kind(self) -> OpKind:
        """
        Returns:
            Graph operator implementing the activation.
        """
        return OpKind(self.value)


NORM_ORDERS = {
    Norm.L1: 1,
    Norm.L2: 2,
    Norm.LINF: np.inf,
}

DUAL_NORMS = {
    Norm.L1: Norm.LINF,
    Norm.L2: Norm.L2,
    Norm.LINF: Norm.L1,
}

OP_CATEGORIES = {
    OpKind.INPUT: OpCategory.STRICT_ELEMENTWISE,
    OpKind.AFFINE: OpCategory.DENSE_COMPUTATION,
    OpKind.SPLIT_WEIGHT: OpCategory.STRICT_ELEMENTWISE,
    OpKind.BOUND_MATMUL: OpCategory.DENSE_COMPUTATION,
    OpKind.MERGE_BOUNDS: OpCategory.STRICT_ELEMENTWISE,
    OpKind.RELU: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.LEAKY_RELU: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.TANH: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.SILU: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.EXP: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.RECIP: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.SOFTMAX: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.MUL: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.REDUCE_SUM: OpCategory.INPUT_REDUCTION_COMPUTE,
    OpKind.ADD: OpCategory.STRICT_ELEMENTWISE,
    OpKind.SCALE: OpCategory.STRICT_ELEMENTWISE,
    OpKind.RESHAPE: OpCategory.STRICT_ELEMENTWISE,
    OpKind.TRANSPOSE: OpCategory.STRICT_ELEMENTWISE,
    OpKind.DOT_PRODUCT: OpCategory.DENSE_COMPUTATION,
    OpKind.MEAN_POOL: OpCategory.DENSE_COMPUTATION,
}
