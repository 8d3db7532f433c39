"""
Abstract GPU-like execution model.

Schedules map the four computing patterns of bound propagation (GEMM, vector reduction,
elementwise multiplication with concretization, scalar-vector multiplication) onto blocks,
warps and register tiles. Executors compute the numeric result on the host while a
deterministic simulator counts memory traffic, synchronizing iterations and cross-thread
operations. Modeled cost is a linear function of those counts::

    cost = c_global * (loads + stores) + c_shared * shared_accesses
           + c_reg * cross_thread_ops + c_sync * reduction_iterations
"""

import json
import math
import os
import typing as tp

import numpy as np

from boundcraft.core import ConcreteBounds, LinearBounds, PerturbationSpec
from boundcraft.primitives import WARP_SIZE, Norm, OpKind, Pattern, Precision, ReductionMode
from boundcraft.utils import HARDWARE_DIR, ConfigParser, ModelLoadError, ScheduleError, ShapeMismatchError, UnknownOpError, log

# shuffle steps of one warp tree reduction
TREE_STEPS = int(math.log2(WARP_SIZE))

COMBINE = {
    "sum": (np.add, 0.0),
    "max": (np.maximum, -np.inf),
}


class HardwareMeta:
    """
    ``HardwareMeta`` is the metafile of a device: resource caps for the hard rules,
    occupancy figures for the soft rules and the cost weights of the simulator.

    Attributes:
        name: Device name.
        max_threads_per_block: Thread cap of a block.
        shared_mem_per_block: Shared memory cap of a block, bytes.
        registers_per_thread: Register cap of a thread.
        num_sms: Number of streaming multiprocessors.
        max_threads_per_sm: Resident thread cap of one SM.
        cost_weights: ``c_global``, ``c_shared``, ``c_reg``, ``c_sync``.
    """

    def __init__(
        self,
        name: str,
        max_threads_per_block: int,
        shared_mem_per_block: int,
        registers_per_thread: int,
        num_sms: int,
        max_threads_per_sm: int,
        cost_weights: dict,
        warp_size: int = WARP_SIZE,
    ):
        assert warp_size == WARP_SIZE, f"Incorrect warp_size = {warp_size}"
        self.name = name
        self.warp_size = warp_size
        self.max_threads_per_block = int(max_threads_per_block)
        self.shared_mem_per_block = int(shared_mem_per_block)
        self.registers_per_thread = int(registers_per_thread)
        self.num_sms = int(num_sms)
        self.max_threads_per_sm = int(max_threads_per_sm)
        self.cost_weights = {key: float(cost_weights[key]) for key in ("c_global", "c_shared", "c_reg", "c_sync")}

        caps = (self.max_threads_per_block, self.shared_mem_per_block, self.registers_per_thread, self.num_sms, self.max_threads_per_sm)
        assert all(cap > 0 for cap in caps), f"Incorrect hardware caps = {caps}"
        assert all(w >= 0 for w in self.cost_weights.values()), f"Incorrect cost weights = {self.cost_weights}"

    @classmethod
    def from_dict(cls, record: dict, name: str = None) -> "HardwareMeta":
        return cls(
            name=record.get("name", name),
            max_threads_per_block=record["max_threads_per_block"],
            shared_mem_per_block=record["shared_mem_per_block"],
            registers_per_thread=record["registers_per_thread"],
            num_sms=record["num_sms"],
            max_threads_per_sm=record["max_threads_per_sm"],
            cost_weights=record["cost_weights"],
            warp_size=record.get("warp_size", WARP_SIZE),
        )

    @classmethod
    def from_json(cls, path: str) -> "HardwareMeta":
        """
        Load a metafile.

        Args:
            path: Path to json metafile.

        Returns:
            ``HardwareMeta``.
        """
        try:
            with open(path, "r") as stream:
                record = json.load(stream)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"Cannot read hardware metafile {path}: {exc}")
        try:
            return cls.from_dict(record, name=os.path.splitext(os.path.basename(path))[0])
        except KeyError as exc:
            raise ModelLoadError(f"Hardware metafile {path} misses field {exc}")

    @classmethod
    def from_name(cls, name: str) -> "HardwareMeta":
        """
        Load one of the metafiles shipped in ``configs/hardware``.
        """
        return cls.from_json(os.path.join(HARDWARE_DIR, f"{name}.json"))

    @classmethod
    def default(cls) -> "HardwareMeta":
        name = ConfigParser().section("hardware").get("default", "a100-like")
        return cls.from_name(name)

    @property
    def c_global(self) -> float:
        return self.cost_weights["c_global"]

    @property
    def c_shared(self) -> float:
        return self.cost_weights["c_shared"]

    @property
    def c_reg(self) -> float:
        return self.cost_weights["c_reg"]

    @property
    def c_sync(self) -> float:
        return self.cost_weights["c_sync"]

    def blocks_per_sm(self, threads_per_block: int, shared_bytes: int) -> int:
        """
        Occupancy proxy: resident blocks of one SM limited by threads and shared memory.
        """
        by_threads = self.max_threads_per_sm // max(threads_per_block, 1)
        by_shared = self.shared_mem_per_block // shared_bytes if shared_bytes > 0 else by_threads
        return max(min(by_threads, by_shared), 0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "warp_size": self.warp_size,
            "max_threads_per_block": self.max_threads_per_block,
            "shared_mem_per_block": self.shared_mem_per_block,
            "registers_per_thread": self.registers_per_thread,
            "num_sms": self.num_sms,
            "max_threads_per_sm": self.max_threads_per_sm,
            "cost_weights": dict(self.cost_weights),
        }

    def __repr__(self) -> str:
        return f"HardwareMeta({self.name})"


class Schedule:
    """
    ``Schedule`` is one implementation of a computing pattern.

    Parameters per pattern:

    | GEMM - tile_m, tile_n, tile_k, reg_tile_m, reg_tile_n, threads_per_block.
    | VECTOR_REDUCTION - mode.
    | ELEMENTWISE_MUL - group_size T, threads cooperating on one neuron.
    | SCALAR_VECTOR - warps_per_vector t.

    Attributes:
        pattern: ``Pattern``.
        params: Parameter dict.
    """

    def __init__(self, pattern: Pattern, params: dict):
        self.pattern = Pattern(pattern)
        self.params = dict(params)
        if self.pattern is Pattern.VECTOR_REDUCTION:
            self.params["mode"] = ReductionMode(self.params["mode"])
        self.validate()

    @classmethod
    def gemm(cls, tile_m: int = 16, tile_n: int = 16, tile_k: int = 16, reg_tile_m: int = 2, reg_tile_n: int = 2, threads_per_block: int = None):
        # one thread owns one register tile
        threads = threads_per_block or (tile_m * tile_n) // (reg_tile_m * reg_tile_n)
        return cls(
            Pattern.GEMM,
            {
                "tile_m": tile_m,
                "tile_n": tile_n,
                "tile_k": tile_k,
                "reg_tile_m": reg_tile_m,
                "reg_tile_n": reg_tile_n,
                "threads_per_block": threads,
            },
        )

    @classmethod
    def reduction(cls, mode: ReductionMode = ReductionMode.HYBRID):
        return cls(Pattern.VECTOR_REDUCTION, {"mode": mode})

    @classmethod
    def elementwise(cls, group_size: int = WARP_SIZE):
        return cls(Pattern.ELEMENTWISE_MUL, {"group_size": group_size})

    @classmethod
    def scalar_vector(cls, warps_per_vector: int = 1):
        return cls(Pattern.SCALAR_VECTOR, {"warps_per_vector": warps_per_vector})

    @property
    def mode(self) -> ReductionMode:
        return self.params["mode"]

    @property
    def threads_per_block(self) -> int:
        if self.pattern is Pattern.GEMM:
            return self.params["threads_per_block"]
        if self.pattern is Pattern.ELEMENTWISE_MUL:
            return self.params["group_size"]
        if self.pattern is Pattern.SCALAR_VECTOR:
            return WARP_SIZE * self.params["warps_per_vector"]
        return WARP_SIZE

    def validate(self, meta: tp.Optional[HardwareMeta] = None):
        """
        Check the type invariants, and the thread cap when ``meta`` is given.

        Raises:
            ScheduleError: invalid parameters.
        """
        p = self.params
        if self.pattern is Pattern.GEMM:
            sizes = [p["tile_m"], p["tile_n"], p["tile_k"], p["reg_tile_m"], p["reg_tile_n"]]
            if any(int(s) != s or s <= 0 for s in sizes):
                raise ScheduleError(f"GEMM tile sizes must be positive integers, got {sizes}")
            if p["tile_m"] % p["reg_tile_m"] or p["tile_n"] % p["reg_tile_n"]:
                raise ScheduleError(f"Register tile does not divide the block tile: {p}")
            if p["threads_per_block"] * p["reg_tile_m"] * p["reg_tile_n"] != p["tile_m"] * p["tile_n"]:
                raise ScheduleError(f"threads_per_block does not cover the block tile: {p}")
        elif self.pattern is Pattern.ELEMENTWISE_MUL:
            T = p["group_size"]
            if T <= 0 or T % WARP_SIZE:
                raise ScheduleError(f"Group size must be a positive multiple of {WARP_SIZE}, got {T}")
        elif self.pattern is Pattern.SCALAR_VECTOR:
            if p["warps_per_vector"] < 1:
                raise ScheduleError(f"Incorrect warps_per_vector = {p['warps_per_vector']}")
        if meta is not None and self.threads_per_block > meta.max_threads_per_block:
            raise ScheduleError(f"{self.threads_per_block} threads exceed the block cap {meta.max_threads_per_block}")

    def key(self) -> tuple:
        values = tuple((k, v.value if isinstance(v, ReductionMode) else v) for k, v in sorted(self.params.items()))
        return (self.pattern.value,) + values

    def to_dict(self) -> dict:
        return {"pattern": self.pattern.value, "params": {k: v.value if isinstance(v, ReductionMode) else v for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, record: dict) -> "Schedule":
        return cls(Pattern(record["pattern"]), record["params"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Schedule) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        params = ", ".join(f"{k}={v}" for k, v in self.key()[1:])
        return f"Schedule({self.pattern.value}: {params})"


class ProblemShape:
    """
    ``ProblemShape`` is the size of one pattern instance.

    | GEMM - W is m x k, input bounds are k x n.
    | VECTOR_REDUCTION - m vectors of n scalars.
    | ELEMENTWISE_MUL - m neurons with n-dimensional bound weights.
    | SCALAR_VECTOR - m scalars scaling m vectors of n scalars.

    Attributes:
        m, n, k: Extents.
        precision: Scalar width.
    """

    def __init__(self, m: int, n: int, k: int = 1, precision: Precision = Precision.F32):
        self.m = int(m)
        self.n = int(n)
        self.k = int(k)
        self.precision = Precision(precision)
        assert self.m >= 1 and self.n >= 1 and self.k >= 1, f"Incorrect problem shape = {self}"

    @classmethod
    def for_affine(cls, W: np.ndarray, x: LinearBounds, precision: Precision = Precision.F32) -> "ProblemShape":
        """
        GEMM shape of ``W @ [X | b]``: every bound weight column plus the bias column.
        """
        rows = int(np.prod(x.neuron_shape[:-1]))
        return cls(m=W.shape[0], n=rows * (x.dim + 1), k=W.shape[1], precision=precision)

    @property
    def elem_size(self) -> int:
        return self.precision.elem_size

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "k": self.k, "precision": self.precision.value}

    def __repr__(self) -> str:
        return f"ProblemShape(m={self.m}, n={self.n}, k={self.k}, precision={self.precision.value})"


class CostReport:
    """
    ``CostReport`` keeps the simulator counters of one or more kernels.

    Attributes:
        global_loads: Scalars read from global memory. Split into ``weight_loads``,
            ``bound_loads`` (input bound matrices of a GEMM), ``coeff_loads`` (bound weights of
            an elementwise or reduction kernel), ``scalar_loads`` (scaling scalars) and the rest.
        global_stores: Scalars written to global memory.
        shared_accesses: Shared memory reads and writes.
        reduction_iterations: Synchronizing iterations.
        cross_thread_ops: Warp shuffles and broadcasts.
        estimated_shared_bytes: Peak shared memory of a block.
        estimated_registers: Peak registers of a thread.
        modeled_cost: Linear cost of the counters.
    """

    COUNTERS = (
        "global_loads",
        "global_stores",
        "shared_accesses",
        "reduction_iterations",
        "cross_thread_ops",
        "weight_loads",
        "bound_loads",
        "coeff_loads",
        "scalar_loads",
    )

    def __init__(self, meta: HardwareMeta, estimated_shared_bytes: int = 0, estimated_registers: int = 0, **counts):
        unknown = set(counts) - set(self.COUNTERS)
        assert not unknown, f"Unknown counters = {unknown}"
        for name in self.COUNTERS:
            value = int(counts.get(name, 0))
            assert value >= 0, f"Negative counter {name} = {value}"
            setattr(self, name, value)
        assert self.global_loads >= self.weight_loads + self.bound_loads + self.coeff_loads + self.scalar_loads, (
            "Load breakdown exceeds global loads"
        )
        self.estimated_shared_bytes = int(estimated_shared_bytes)
        self.estimated_registers = int(estimated_registers)
        self.meta = meta
        self.modeled_cost = (
            meta.c_global * (self.global_loads + self.global_stores)
            + meta.c_shared * self.shared_accesses
            + meta.c_reg * self.cross_thread_ops
            + meta.c_sync * self.reduction_iterations
        )

    @classmethod
    def zero(cls, meta: HardwareMeta) -> "CostReport":
        return cls(meta)

    def counts(self) -> dict:
        return {name: getattr(self, name) for name in self.COUNTERS}

    def replace(self, **counts) -> "CostReport":
        merged = {**self.counts(), **counts}
        return CostReport(self.meta, self.estimated_shared_bytes, self.estimated_registers, **merged)

    def __add__(self, other: "CostReport") -> "CostReport":
        counts = {name: getattr(self, name) + getattr(other, name) for name in self.COUNTERS}
        return CostReport(
            self.meta,
            max(self.estimated_shared_bytes, other.estimated_shared_bytes),
            max(self.estimated_registers, other.estimated_registers),
            **counts,
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CostReport)
            and self.to_dict() == other.to_dict()
        )

    def to_dict(self) -> dict:
        return {
            **self.counts(),
            "estimated_shared_bytes": self.estimated_shared_bytes,
            "estimated_registers": self.estimated_registers,
            "modeled_cost": self.modeled_cost,
        }

    def __repr__(self) -> str:
        return f"CostReport(modeled_cost={self.modeled_cost}, loads={self.global_loads}, stores={self.global_stores})"


# ---------------------------------------------------------------- resources and hard rules


def estimate_resources(sched: Schedule, shape: ProblemShape) -> tp.Tuple[int, int]:
    """
    Closed-form shared memory and register estimates.

    | GEMM - shared ``(tile_m*tile_k + 2*tile_k*tile_n) * elem_size`` (one W tile, two bound tiles),
      registers ``4*reg_tile_m*reg_tile_n + 16`` (two accumulators, W_pos/W_neg, address state).
    | VECTOR_REDUCTION - no shared memory, 8 registers.
    | ELEMENTWISE_MUL - shared ``(2*n + 2 + T/32) * elem_size`` (both weight rows, both biases,
      one partial per warp), 16 registers.
    | SCALAR_VECTOR - shared ``t * elem_size`` when ``t > 1`` (broadcast slots), 16 registers.

    Args:
        sched: Schedule.
        shape: Problem shape.

    Returns:
        (shared bytes per block, registers per thread).
    """
    p, es = sched.params, shape.elem_size
    if sched.pattern is Pattern.GEMM:
        shared = (p["tile_m"] * p["tile_k"] + 2 * p["tile_k"] * p["tile_n"]) * es
        return shared, 4 * p["reg_tile_m"] * p["reg_tile_n"] + 16
    if sched.pattern is Pattern.VECTOR_REDUCTION:
        return 0, 8
    if sched.pattern is Pattern.ELEMENTWISE_MUL:
        return (2 * shape.n + 2 + p["group_size"] // WARP_SIZE) * es, 16
    t = p["warps_per_vector"]
    return (t * es if t > 1 else 0), 16


def check_hard_rules(sched: Schedule, shape: ProblemShape, meta: HardwareMeta) -> tp.Tuple[int, int]:
    """
    Reject schedules exceeding the thread, shared memory or register caps.

    Returns:
        (shared bytes, registers) of the schedule.

    Raises:
        ScheduleError: a cap is exceeded.
    """
    sched.validate(meta)
    shared, registers = estimate_resources(sched, shape)
    if shared > meta.shared_mem_per_block:
        raise ScheduleError(f"{sched} needs {shared} bytes of shared memory, cap is {meta.shared_mem_per_block}")
    if registers > meta.registers_per_thread:
        raise ScheduleError(f"{sched} needs {registers} registers per thread, cap is {meta.registers_per_thread}")
    return shared, registers


def is_feasible(sched: Schedule, shape: ProblemShape, meta: HardwareMeta) -> bool:
    try:
        check_hard_rules(sched, shape, meta)
    except ScheduleError:
        return False
    return True


# ---------------------------------------------------------------- vector reduction


def reduction_iterations(mode: ReductionMode, n: int) -> int:
    """
    Iterations one warp spends reducing n scalars.

    | SEQUENTIAL - n.
    | PARALLEL32 - 5, only for n = 32.
    | HYBRID - k + 5 with k = ceil(n / 32): per-lane accumulation, then one shuffle tree.
    | CHUNKED - 6k: a shuffle tree and a carry accumulation per chunk.

    Non-multiples of 32 are padded with identity elements.
    """
    mode = ReductionMode(mode)
    if n < 1:
        raise ScheduleError(f"Reduction needs n >= 1, got {n}")
    chunks = -(-n // WARP_SIZE)
    if mode is ReductionMode.SEQUENTIAL:
        return n
    if mode is ReductionMode.PARALLEL32:
        if n != WARP_SIZE:
            raise ScheduleError(f"PARALLEL32 reduces exactly {WARP_SIZE} scalars, got {n}")
        return TREE_STEPS
    if mode is ReductionMode.HYBRID:
        return chunks + TREE_STEPS
    return chunks * (TREE_STEPS + 1)


def adaptive_mode(n: int) -> ReductionMode:
    """
    Reduction mode with the fewest iterations for n scalars.
    """
    modes = [ReductionMode.HYBRID, ReductionMode.SEQUENTIAL]
    if n == WARP_SIZE:
        modes.insert(0, ReductionMode.PARALLEL32)
    return min(modes, key=lambda mode: reduction_iterations(mode, n))


def _shuffles(mode: ReductionMode, n: int) -> int:
    if mode is ReductionMode.SEQUENTIAL:
        return 0
    if mode is ReductionMode.CHUNKED:
        return TREE_STEPS * -(-n // WARP_SIZE)
    return TREE_STEPS


def _tree(lanes: np.ndarray, op) -> np.ndarray:
    lanes = lanes.copy()
    offset = WARP_SIZE // 2
    while offset:
        lanes[..., :offset] = op(lanes[..., :offset], lanes[..., offset:2 * offset])
        offset //= 2
    return lanes[..., 0]


def _padded_chunks(values: np.ndarray, identity: float) -> np.ndarray:
    n = values.shape[-1]
    chunks = -(-n // WARP_SIZE)
    pad = np.full(values.shape[:-1] + (chunks * WARP_SIZE - n,), identity)
    return np.concatenate([values, pad], axis=-1).reshape(values.shape[:-1] + (chunks, WARP_SIZE))


def reduction_counts(
    mode: ReductionMode, shape: ProblemShape, meta: HardwareMeta, fuse_transform: bool = True
) -> CostReport:
    """
    Counters of reducing ``shape.m`` vectors of ``shape.n`` scalars.

    Args:
        mode: Reduction mode.
        shape: Problem shape.
        meta: Hardware metafile.
        fuse_transform: Apply f in registers; otherwise f is a separate elementwise pass.

    Returns:
        ``CostReport``.
    """
    mode = ReductionMode(mode)
    m, n = shape.m, shape.n
    loads, stores = m * n, m
    if not fuse_transform:
        loads += m * n
        stores += m * n
    shared, registers = estimate_resources(Schedule.reduction(mode), shape)
    return CostReport(
        meta,
        shared,
        registers,
        global_loads=loads,
        global_stores=stores,
        coeff_loads=m * n,
        reduction_iterations=m * reduction_iterations(mode, n),
        cross_thread_ops=m * _shuffles(mode, n),
    )


def run_reduction(
    sched: Schedule,
    X: np.ndarray,
    f: tp.Optional[tp.Callable] = None,
    meta: tp.Optional[HardwareMeta] = None,
    combine: str = "sum",
    fuse_transform: bool = True,
) -> tp.Tuple[np.ndarray, CostReport]:
    """
    Generalized vector reduction ``y_i = combine_j f(x_ij)`` over the last axis.

    Args:
        sched: ``VECTOR_REDUCTION`` schedule.
        X: Tensor ``[..., n]``.
        f: Elementwise transform (identity by default).
        meta: Hardware metafile, default device when omitted.
        combine: ``sum`` or ``max``.
        fuse_transform: Count f as fused into the reduction.

    Returns:
        (reduced tensor ``[...]``, ``CostReport``).
    """
    assert sched.pattern is Pattern.VECTOR_REDUCTION, f"Expected a reduction schedule, got {sched}"
    meta = meta or HardwareMeta.default()
    op, identity = COMBINE[combine]
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    mode = sched.mode
    report = reduction_counts(mode, ProblemShape(int(np.prod(X.shape[:-1])), n), meta, fuse_transform)

    values = X if f is None else f(X)
    if mode is ReductionMode.SEQUENTIAL:
        acc = np.full(X.shape[:-1], identity)
        for j in range(n):
            acc = op(acc, values[..., j])
    elif mode is ReductionMode.PARALLEL32:
        acc = _tree(values, op)
    elif mode is ReductionMode.HYBRID:
        chunks = _padded_chunks(values, identity)
        lanes = np.full(X.shape[:-1] + (WARP_SIZE,), identity)
        for i in range(chunks.shape[-2]):
            lanes = op(lanes, chunks[..., i, :])
        acc = _tree(lanes, op)
    else:
        chunks = _padded_chunks(values, identity)
        acc = np.full(X.shape[:-1], identity)
        for i in range(chunks.shape[-2]):
            acc = op(acc, _tree(chunks[..., i, :], op))
    return acc, report


# ---------------------------------------------------------------- GEMM


def gemm_counts(
    sched: Schedule,
    shape: ProblemShape,
    meta: HardwareMeta,
    weight_pairing: bool = True,
    double_bound: bool = True,
    sides: int = 2,
) -> CostReport:
    """
    Counters of the bound GEMM ``W @ X`` with W of shape m x k and bounds of shape k x n.

    A W tile is reloaded once per output column block and the bound tiles once per
    output row block. Without weight pairing W_pos and W_neg are read separately; without
    double bound every side is its own pass reading both input bound matrices.

    Args:
        sched: GEMM schedule.
        shape: Problem shape.
        meta: Hardware metafile.
        weight_pairing: Read W once and split it in registers.
        double_bound: Compute both sides in one pass.
        sides: Number of output sides (1 for a lone lower or upper node).

    Returns:
        ``CostReport``.
    """
    assert sched.pattern is Pattern.GEMM, f"Expected a GEMM schedule, got {sched}"
    assert sides in (1, 2), f"Incorrect sides = {sides}"
    shared, registers = check_hard_rules(sched, shape, meta)
    p = sched.params
    m, n, k = shape.m, shape.n, shape.k
    row_blocks = -(-m // p["tile_m"])
    col_blocks = -(-n // p["tile_n"])
    k_steps = -(-k // p["tile_k"])
    passes = 1 if double_bound else sides

    weight_loads = passes * (1 if weight_pairing else 2) * m * k * col_blocks
    bound_loads = passes * 2 * k * n * row_blocks
    stores = sides * m * n
    macs = 2 * sides * m * n * k
    shared_reads = -(-macs // p["reg_tile_n"]) + -(-macs // p["reg_tile_m"])
    return CostReport(
        meta,
        shared,
        registers,
        global_loads=weight_loads + bound_loads,
        global_stores=stores,
        weight_loads=weight_loads,
        bound_loads=bound_loads,
        shared_accesses=weight_loads + bound_loads + shared_reads,
        reduction_iterations=passes * row_blocks * col_blocks * k_steps,
    )


def _bound_matrix(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # [rows, k, D] and [rows, k] -> k x rows*(D+1)
    full = np.concatenate([weights, bias[..., None]], axis=-1)
    return full.transpose(1, 0, 2).reshape(full.shape[1], -1)


def run_gemm(
    sched: Schedule,
    W: np.ndarray,
    x: LinearBounds,
    bias: tp.Optional[np.ndarray] = None,
    meta: tp.Optional[HardwareMeta] = None,
    weight_pairing: bool = True,
    double_bound: bool = True,
) -> tp.Tuple[LinearBounds, CostReport]:
    """
    Tiled affine bound propagation ``y = W x + bias``.

    Each block stages one W tile and the matching tiles of both bound matrices, splits the
    W tile by sign in registers and accumulates both output sides.

    Args:
        sched: GEMM schedule.
        W: Weight ``[m, k]``.
        x: Input bounds, last neuron axis k.
        bias: Optional bias ``[m]``.
        meta: Hardware metafile, default device when omitted.
        weight_pairing: Count W as read once (otherwise W_pos and W_neg separately).
        double_bound: Count both sides as one pass.

    Returns:
        (output ``LinearBounds``, ``CostReport``).
    """
    meta = meta or HardwareMeta.default()
    W = np.asarray(W, dtype=float)
    if not x.neuron_shape or x.neuron_shape[-1] != W.shape[1]:
        raise ShapeMismatchError(f"Input {x.neuron_shape} does not conform to weight {W.shape}")
    shape = ProblemShape.for_affine(W, x)
    report = gemm_counts(sched, shape, meta, weight_pairing, double_bound)

    lead, D = x.neuron_shape[:-1], x.dim
    k = W.shape[1]
    Xl = _bound_matrix(x.lw.reshape(-1, k, D), x.lb.reshape(-1, k))
    Xu = _bound_matrix(x.uw.reshape(-1, k, D), x.ub.reshape(-1, k))

    p = sched.params
    tm, tn, tk = p["tile_m"], p["tile_n"], p["tile_k"]
    m, n = W.shape[0], Xl.shape[1]
    Yl = np.zeros((m, n))
    Yu = np.zeros((m, n))
    for i0 in range(0, m, tm):
        for j0 in range(0, n, tn):
            acc_l = np.zeros((min(tm, m - i0), min(tn, n - j0)))
            acc_u = np.zeros_like(acc_l)
            for k0 in range(0, k, tk):
                w_tile = W[i0:i0 + tm, k0:k0 + tk]
                w_pos, w_neg = np.maximum(w_tile, 0), np.minimum(w_tile, 0)
                xl = Xl[k0:k0 + tk, j0:j0 + tn]
                xu = Xu[k0:k0 + tk, j0:j0 + tn]
                acc_l += w_pos @ xl + w_neg @ xu
                acc_u += w_pos @ xu + w_neg @ xl
            Yl[i0:i0 + tm, j0:j0 + tn] = acc_l
            Yu[i0:i0 + tm, j0:j0 + tn] = acc_u

    def unpack(Y):
        full = Y.reshape(m, -1, D + 1).transpose(1, 0, 2).reshape(lead + (m, D + 1))
        b = full[..., D] if bias is None else full[..., D] + bias
        return full[..., :D], b

    lw, lb = unpack(Yl)
    uw, ub = unpack(Yu)
    return LinearBounds(lw, lb, uw, ub), report


# ---------------------------------------------------------------- elementwise multiplication


def elementwise_counts(sched: Schedule, shape: ProblemShape, meta: HardwareMeta, fused: bool = True) -> CostReport:
    """
    Counters of concretize-relax-rescale over ``shape.m`` neurons with ``shape.n``-dimensional weights.

    The fused kernel stages both weight rows of a neuron once, concretizes them with a
    T-thread reduction and rescales them in place. The naive kernels run separate transform,
    concretization, relaxation and rescale passes with the chunked reduction.
    """
    m, D = shape.m, shape.n
    if fused:
        assert sched.pattern is Pattern.ELEMENTWISE_MUL, f"Expected an elementwise schedule, got {sched}"
        shared, registers = check_hard_rules(sched, shape, meta)
        T = sched.params["group_size"]
        warps = T // WARP_SIZE
        iterations = -(-D // T) + TREE_STEPS + (warps.bit_length() - 1)
        return CostReport(
            meta,
            shared,
            registers,
            global_loads=2 * m * D + 2 * m,
            global_stores=2 * m * D + 2 * m,
            coeff_loads=2 * m * D,
            shared_accesses=m * (6 * D + 4),
            reduction_iterations=2 * m * iterations,
            cross_thread_ops=2 * m * (TREE_STEPS * warps + warps - 1),
        )

    transform = 2 * m * D
    concretize_loads, concretize_stores = 2 * m * D + 2 * m, 2 * m
    relax_loads, relax_stores = 2 * m, 4 * m
    rescale_loads, rescale_stores = 2 * m * D + 2 * m + 4 * m, 2 * m * D + 2 * m
    return CostReport(
        meta,
        0,
        16,
        global_loads=transform + concretize_loads + relax_loads + rescale_loads,
        global_stores=transform + concretize_stores + relax_stores + rescale_stores,
        coeff_loads=3 * 2 * m * D,
        reduction_iterations=2 * m * reduction_iterations(ReductionMode.CHUNKED, D),
        cross_thread_ops=2 * m * _shuffles(ReductionMode.CHUNKED, D),
    )


def dual_norm_rows(
    weights: np.ndarray, norm: Norm, mode: ReductionMode = ReductionMode.HYBRID, meta: tp.Optional[HardwareMeta] = None
) -> np.ndarray:
    """
    Dual norm of every weight row through the generalized reduction: abs-sum for l1,
    square-sum then root for l2, abs-max for linf.
    """
    sched = Schedule.reduction(mode)
    if norm is Norm.L1:
        return run_reduction(sched, weights, np.abs, meta)[0]
    if norm is Norm.L2:
        return np.sqrt(run_reduction(sched, weights, np.square, meta)[0])
    return run_reduction(sched, weights, np.abs, meta, combine="max")[0]


def run_elementwise(
    sched: Schedule,
    x: LinearBounds,
    producer: tp.Callable,
    spec: PerturbationSpec,
    meta: tp.Optional[HardwareMeta] = None,
    fused: bool = True,
) -> tp.Tuple[LinearBounds, CostReport]:
    """
    Scheduled elementwise nonlinearity: stage bound weights, concretize, relax, rescale.

    Args:
        sched: ``ELEMENTWISE_MUL`` schedule.
        x: Input bounds.
        producer: Relaxation producer ``ConcreteBounds -> ElementwiseLinearRelaxation``.
        spec: Perturbation ball.
        meta: Hardware metafile, default device when omitted.
        fused: Count the fused kernel, otherwise the naive multi-pass kernels.

    Returns:
        (output ``LinearBounds``, ``CostReport``).
    """
    meta = meta or HardwareMeta.default()
    if x.dim != spec.dim:
        raise ShapeMismatchError(f"Bounds dim {x.dim} != perturbation dim {spec.dim}")
    shape = x.neuron_shape
    m, D = int(np.prod(shape)), x.dim
    report = elementwise_counts(sched, ProblemShape(m, D), meta, fused)

    lw, lb = x.lw.reshape(m, D).copy(), x.lb.reshape(m).copy()
    uw, ub = x.uw.reshape(m, D).copy(), x.ub.reshape(m).copy()

    mode = ReductionMode.HYBRID if fused else ReductionMode.CHUNKED
    lo, hi = lb, ub
    if spec.epsilon > 0:
        lo = lb - spec.epsilon * dual_norm_rows(lw, spec.dual, mode, meta)
        hi = ub + spec.epsilon * dual_norm_rows(uw, spec.dual, mode, meta)
    r = producer(ConcreteBounds(lo.reshape(shape), hi.reshape(shape)))

    a_low, a_up = r.a_low.reshape(m), r.a_up.reshape(m)
    keep_low, keep_up = a_low >= 0, a_up >= 0
    out_lw = a_low[:, None] * np.where(keep_low[:, None], lw, uw)
    out_lb = a_low * np.where(keep_low, lb, ub) + r.b_low.reshape(m)
    out_uw = a_up[:, None] * np.where(keep_up[:, None], uw, lw)
    out_ub = a_up * np.where(keep_up, ub, lb) + r.b_up.reshape(m)
    out = LinearBounds(
        out_lw.reshape(shape + (D,)), out_lb.reshape(shape), out_uw.reshape(shape + (D,)), out_ub.reshape(shape)
    )
    return out, report


# ---------------------------------------------------------------- scalar-vector multiplication


def scalar_vector_counts(sched: Schedule, shape: ProblemShape, meta: HardwareMeta, fused: bool = True) -> CostReport:
    """
    Counters of ``y_i = f(s_i) * x_i`` over ``shape.m`` vectors of ``shape.n`` scalars.

    The fused kernel reads every scalar once and broadcasts it over ``t`` warps; the naive
    kernel rereads the scalar for every element.
    """
    m, n = shape.m, shape.n
    if not fused:
        return CostReport(
            meta,
            0,
            16,
            global_loads=2 * m * n,
            global_stores=m * n,
            scalar_loads=m * n,
            reduction_iterations=m * -(-n // WARP_SIZE),
        )
    assert sched.pattern is Pattern.SCALAR_VECTOR, f"Expected a scalar-vector schedule, got {sched}"
    shared, registers = check_hard_rules(sched, shape, meta)
    t = sched.params["warps_per_vector"]
    return CostReport(
        meta,
        shared,
        registers,
        global_loads=m + m * n,
        global_stores=m * n,
        scalar_loads=m,
        shared_accesses=2 * m * (t - 1),
        cross_thread_ops=m * t,
        reduction_iterations=m * -(-n // (WARP_SIZE * t)),
    )


def run_scalar_vector(
    sched: Schedule,
    S: np.ndarray,
    X: np.ndarray,
    f: tp.Optional[tp.Callable] = None,
    meta: tp.Optional[HardwareMeta] = None,
    fused: bool = True,
) -> tp.Tuple[np.ndarray, CostReport]:
    """
    Generalized scalar-vector multiplication ``y_i = f(s_i) * x_i``.

    Args:
        sched: ``SCALAR_VECTOR`` schedule.
        S: Scalars ``[m]``.
        X: Vectors ``[m, ...]``.
        f: Elementwise transform of the scalars (identity by default).
        meta: Hardware metafile, default device when omitted.
        fused: Count the broadcast kernel, otherwise the naive one.

    Returns:
        (``Y`` shaped like ``X``, ``CostReport``).
    """
    meta = meta or HardwareMeta.default()
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    if S.ndim != 1 or X.ndim < 1 or X.shape[0] != S.shape[0]:
        raise ShapeMismatchError(f"Scalars {S.shape} do not match vectors {X.shape}")
    m = S.shape[0]
    n = max(int(np.prod(X.shape[1:])), 1)
    report = scalar_vector_counts(sched, ProblemShape(m, n), meta, fused)

    scaled = S if f is None else f(S)
    Y = scaled.reshape((m,) + (1,) * (X.ndim - 1)) * X
    return Y, report


# ---------------------------------------------------------------- defaults and dispatch


def default_schedule(pattern: Pattern, shape: tp.Optional[ProblemShape] = None) -> Schedule:
    """
    Heuristic schedule: 16^3 GEMM tiles with 2x2 register tiles, PARALLEL32 or HYBRID
    reduction, T = 32, t = 1.
    """
    pattern = Pattern(pattern)
    if pattern is Pattern.GEMM:
        return Schedule.gemm()
    if pattern is Pattern.VECTOR_REDUCTION:
        if shape is not None and shape.n == WARP_SIZE:
            return Schedule.reduction(ReductionMode.PARALLEL32)
        return Schedule.reduction(ReductionMode.HYBRID)
    if pattern is Pattern.ELEMENTWISE_MUL:
        return Schedule.elementwise()
    return Schedule.scalar_vector()


def pattern_cost(sched: Schedule, shape: ProblemShape, meta: HardwareMeta, naive: bool = False) -> CostReport:
    """
    Modeled counters of one pattern instance under a schedule.
    """
    if sched.pattern is Pattern.GEMM:
        return gemm_counts(sched, shape, meta, weight_pairing=not naive, double_bound=not naive)
    if sched.pattern is Pattern.VECTOR_REDUCTION:
        mode = ReductionMode.CHUNKED if naive else sched.mode
        return reduction_counts(mode, shape, meta, fuse_transform=not naive)
    if sched.pattern is Pattern.ELEMENTWISE_MUL:
        return elementwise_counts(sched, shape, meta, fused=not naive)
    return scalar_vector_counts(sched, shape, meta, fused=not naive)


# ---------------------------------------------------------------- whole graph


def node_output_size(g, name: str, dim: int) -> int:
    """
    Scalars stored by a node: both bound sides with D weights and a bias per neuron.
    """
    node = g.nodes[name]
    if node.kind is OpKind.SPLIT_WEIGHT:
        return 2 * int(np.prod(node.shape))
    size = int(np.prod(node.shape)) * (dim + 1)
    if node.kind is OpKind.BOUND_MATMUL and node.attrs.get("side") != "both":
        return size
    return 2 * size


def _schedule_lookup(schedules: tp.Optional[tp.Dict[Pattern, Schedule]]) -> tp.Callable[[Pattern, ProblemShape], Schedule]:
    schedules = dict(schedules or {})

    def schedule(pattern: Pattern, shape: ProblemShape) -> Schedule:
        return schedules.get(pattern) or default_schedule(pattern, shape)

    return schedule


def node_costs(
    g,
    dim: int,
    meta: HardwareMeta,
    schedules: tp.Optional[tp.Dict[Pattern, Schedule]] = None,
    naive: bool = False,
    precision: Precision = Precision.F32,
) -> tp.Dict[OpKind, CostReport]:
    """
    Modeled cost of every node of a graph, summed per operator kind.

    Fusion group savings are not applied here, see ``graph_cost``.

    Returns:
        ``CostReport`` per ``OpKind`` present in the graph.
    """
    schedule = _schedule_lookup(schedules)
    costs = {}
    for name in g.topological_order():
        node = g.nodes[name]
        report = _node_cost(g, node, dim, meta, schedule, naive, precision)
        costs[node.kind] = costs[node.kind] + report if node.kind in costs else report
    return costs


def graph_cost(
    g,
    dim: int,
    meta: HardwareMeta,
    schedules: tp.Optional[tp.Dict[Pattern, Schedule]] = None,
    naive: bool = False,
    precision: Precision = Precision.F32,
) -> CostReport:
    """
    Modeled cost of propagating bounds through a whole graph.

    Every node is costed by the pattern it maps onto. An intermediate tensor whose
    producer and consumer share a fusion group is neither stored to nor loaded from
    global memory.

    Args:
        g: ``VerGraph``.
        dim: Perturbation dimension D.
        meta: Hardware metafile.
        schedules: Schedule per pattern, defaults per pattern when absent.
        naive: Use the naive kernels for the non-GEMM patterns.
        precision: Scalar width for the resource estimates.

    Returns:
        Summed ``CostReport``.
    """
    total = CostReport.zero(meta)
    for report in node_costs(g, dim, meta, schedules, naive, precision).values():
        total = total + report

    group_of = {n: i for i, group in enumerate(g.fusion_groups) for n in group}
    saved = sum(
        node_output_size(g, src, dim) for src, dst, _ in g.edges if group_of[src] == group_of[dst]
    )
    if saved:
        total = total.replace(global_loads=total.global_loads - saved, global_stores=total.global_stores - saved)
    log.debug("Graph cost", nodes=len(g.nodes), groups=len(g.fusion_groups), naive=naive, cost=total.modeled_cost)
    return total


def _node_cost(g, node, dim: int, meta: HardwareMeta, schedule, naive: bool, precision: Precision) -> CostReport:
    kind = node.kind
    size = int(np.prod(node.shape))
    bounds = 2 * size * (dim + 1)
    inputs = [g.nodes[src] for src in node.inputs]

    def elementwise(m: int) -> CostReport:
        shape = ProblemShape(m, dim, precision=precision)
        return elementwise_counts(schedule(Pattern.ELEMENTWISE_MUL, shape), shape, meta, fused=not naive)

    def streaming(loads: int, stores: int) -> CostReport:
        return CostReport(meta, global_loads=loads, global_stores=stores)

    if kind is OpKind.INPUT:
        return streaming(0, bounds)
    if kind is OpKind.SPLIT_WEIGHT:
        w = size
        return CostReport(meta, global_loads=w, global_stores=2 * w, weight_loads=w)
    if kind in (OpKind.AFFINE, OpKind.BOUND_MATMUL):
        x = inputs[0]
        W = g.params[node.attrs["weight"]]
        rows = int(np.prod(x.shape[:-1]))
        shape = ProblemShape(W.shape[0], rows * (dim + 1), W.shape[1], precision)
        sched = schedule(Pattern.GEMM, shape)
        if kind is OpKind.AFFINE:
            return gemm_counts(sched, shape, meta)
        paired = bool(node.attrs.get("paired", False))
        if node.attrs.get("side") == "both":
            return gemm_counts(sched, shape, meta, weight_pairing=paired, double_bound=True)
        return gemm_counts(sched, shape, meta, weight_pairing=paired, double_bound=False, sides=1)
    if kind is OpKind.MERGE_BOUNDS:
        return streaming(bounds, bounds)
    if kind.is_activation:
        return elementwise(size)
    if kind in (OpKind.SOFTMAX, OpKind.MUL):
        # two concretize-rescale passes over the product operands
        cost = elementwise(size) + elementwise(size)
        if kind is OpKind.SOFTMAX:
            axis_len = node.shape[node.attrs.get("axis", -1)]
            rows = size // axis_len
            cost = cost + elementwise(size) + _reduce_cost(rows, axis_len, dim, meta, schedule, naive, precision)
            cost = cost + elementwise(rows)
        return cost
    if kind in (OpKind.REDUCE_SUM, OpKind.MEAN_POOL):
        in_shape = inputs[0].shape
        axis = node.attrs.get("axis", -1 if kind is OpKind.REDUCE_SUM else -2)
        axis_len = in_shape[axis]
        return _reduce_cost(size if size else 1, axis_len, dim, meta, schedule, naive, precision)
    if kind is OpKind.ADD:
        return streaming(2 * bounds, bounds)
    if kind in (OpKind.SCALE, OpKind.RESHAPE, OpKind.TRANSPOSE):
        return streaming(bounds, bounds)
    if kind is OpKind.DOT_PRODUCT:
        q, k = inputs
        lead = int(np.prod(q.shape[:-2]))
        l1, c = q.shape[-2], q.shape[-1]
        l2 = k.shape[-2]
        concretize = elementwise(int(np.prod(q.shape))) + elementwise(int(np.prod(k.shape)))
        q_shape = ProblemShape(lead * l1, l2 * (dim + 1), c, precision)
        k_shape = ProblemShape(lead * l2, l1 * (dim + 1), c, precision)
        return (
            concretize
            + gemm_counts(schedule(Pattern.GEMM, q_shape), q_shape, meta, not naive, not naive)
            + gemm_counts(schedule(Pattern.GEMM, k_shape), k_shape, meta, not naive, not naive)
        )
    raise UnknownOpError(f"No cost rule for {kind}")


def _reduce_cost(rows: int, axis_len: int, dim: int, meta, schedule, naive: bool, precision: Precision) -> CostReport:
    # every bound column (both sides, D weights and the bias) is reduced over the axis
    shape = ProblemShape(rows * 2 * (dim + 1), axis_len, precision=precision)
    sched = schedule(Pattern.VECTOR_REDUCTION, shape)
    mode = sched.mode
    if mode is ReductionMode.PARALLEL32 and axis_len != WARP_SIZE:
        mode = adaptive_mode(axis_len)
    return reduction_counts(ReductionMode.CHUNKED if naive else mode, shape, meta, fuse_transform=True)
