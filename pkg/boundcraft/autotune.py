"""
Expert-guided schedule search.

Candidates violating the hard rules are filtered out, a seed set is profiled, and a boosted
tree cost model over (schedule parameters, hardware properties) repeatedly proposes the
top-k unprofiled candidates for profiling.
"""

import json
import time
import typing as tp
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np
from sklearn.ensemble import GradientBoostingRegressor

from boundcraft import relax
from boundcraft.core import LinearBounds, PerturbationSpec
from boundcraft.history import TuningHistory
from boundcraft.machine import (
    HardwareMeta,
    ProblemShape,
    Schedule,
    default_schedule,
    estimate_resources,
    is_feasible,
    pattern_cost,
    run_elementwise,
    run_gemm,
    run_reduction,
    run_scalar_vector,
)
from boundcraft.primitives import SCHEDULE_FORMAT, WARP_SIZE, Pattern, ReductionMode
from boundcraft.utils import ConfigParser, InfeasibleScheduleError, ModelLoadError, ProfilerError, log


MODE_CODES = {
    ReductionMode.SEQUENTIAL: 1,
    ReductionMode.PARALLEL32: 2,
    ReductionMode.HYBRID: 3,
    ReductionMode.CHUNKED: 4,
}

# one slot per schedule parameter, zero when the pattern has no such parameter
PARAM_FEATURES = [
    "tile_m",
    "tile_n",
    "tile_k",
    "reg_tile_m",
    "reg_tile_n",
    "mode",
    "group_size",
    "warps_per_vector",
]
HARDWARE_FEATURES = [
    "shared_mem_per_block",
    "registers_per_thread",
    "num_sms",
    "max_threads_per_sm",
    "max_threads_per_block",
]
DERIVED_FEATURES = [
    "threads_per_block",
    "shared_bytes",
    "registers",
    "blocks_per_sm",
    "problem_m",
    "problem_n",
    "problem_k",
]
FEATURE_NAMES = PARAM_FEATURES + HARDWARE_FEATURES + DERIVED_FEATURES

GEMM_TILES = [8, 16, 32, 64, 128]
GEMM_TILES_K = [8, 16, 32, 64]
GEMM_REG_TILES = [1, 2, 4, 8]
GROUP_SIZES = [32, 64, 128, 256]
WARPS_PER_VECTOR = [1, 2, 4]


class CandidateSpace:
    """
    ``CandidateSpace`` is a finite ordered set of schedules of one pattern for one problem shape.

    Attributes:
        pattern: ``Pattern`` of every candidate.
        shape: ``ProblemShape`` the candidates are tuned for.
        candidates: List of unique ``Schedule``.
    """

    def __init__(self, pattern: Pattern, shape: ProblemShape, candidates: tp.Iterable[Schedule]):
        self.pattern = Pattern(pattern)
        self.shape = shape
        unique, seen = [], set()
        for sched in candidates:
            assert sched.pattern is self.pattern, f"Candidate {sched} is not a {self.pattern.value} schedule"
            if sched not in seen:
                seen.add(sched)
                unique.append(sched)
        self.candidates = unique
        self._positions = {sched: i for i, sched in enumerate(unique)}

    @classmethod
    def default(cls, pattern: Pattern, shape: ProblemShape) -> "CandidateSpace":
        """
        Default grid of a pattern, the heuristic default schedule included.

        | GEMM - power-of-two block tiles 8..128 (tile_k 8..64) and register tiles 1..8 dividing them.
        | VECTOR_REDUCTION - SEQUENTIAL, HYBRID, CHUNKED and PARALLEL32 when n = 32.
        | ELEMENTWISE_MUL - T in 32, 64, 128, 256.
        | SCALAR_VECTOR - t in 1, 2, 4.
        """
        pattern = Pattern(pattern)
        candidates = [default_schedule(pattern, shape)]
        if pattern is Pattern.GEMM:
            for tm in GEMM_TILES:
                for tn in GEMM_TILES:
                    for tk in GEMM_TILES_K:
                        for rm in GEMM_REG_TILES:
                            for rn in GEMM_REG_TILES:
                                if tm % rm == 0 and tn % rn == 0:
                                    candidates.append(Schedule.gemm(tm, tn, tk, rm, rn))
        elif pattern is Pattern.VECTOR_REDUCTION:
            modes = [ReductionMode.SEQUENTIAL, ReductionMode.HYBRID, ReductionMode.CHUNKED]
            if shape.n == WARP_SIZE:
                modes.insert(1, ReductionMode.PARALLEL32)
            candidates += [Schedule.reduction(mode) for mode in modes]
        elif pattern is Pattern.ELEMENTWISE_MUL:
            candidates += [Schedule.elementwise(T) for T in GROUP_SIZES]
        else:
            candidates += [Schedule.scalar_vector(t) for t in WARPS_PER_VECTOR]
        return cls(pattern, shape, candidates)

    def filter(self, predicate: tp.Callable[[Schedule], bool]) -> "CandidateSpace":
        return CandidateSpace(self.pattern, self.shape, [s for s in self.candidates if predicate(s)])

    def index(self, sched: Schedule) -> int:
        return self._positions[sched]

    def __contains__(self, sched: Schedule) -> bool:
        return sched in self._positions

    def __getitem__(self, i: int) -> Schedule:
        return self.candidates[i]

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def __repr__(self) -> str:
        return f"CandidateSpace({self.pattern.value}, {self.shape}, size={len(self)})"


def filter_hard_rules(space: CandidateSpace, meta: HardwareMeta) -> CandidateSpace:
    """
    Keep the candidates whose thread, shared memory and register estimates fit the caps.

    Args:
        space: Candidate space.
        meta: Hardware metafile.

    Returns:
        Feasible sub-space.

    Raises:
        InfeasibleScheduleError: no feasible schedule.
    """
    feasible = space.filter(lambda sched: is_feasible(sched, space.shape, meta))
    if not len(feasible):
        raise InfeasibleScheduleError(f"No feasible schedule among {len(space)} candidates for {space.shape} on {meta.name}")
    log.debug("Hard rules", candidates=len(space), feasible=len(feasible), hardware=meta.name)
    return feasible


def extract_features(sched: Schedule, meta: HardwareMeta, shape: tp.Optional[ProblemShape] = None) -> np.ndarray:
    """
    Feature vector in the fixed order of ``FEATURE_NAMES``: schedule parameters, hardware
    properties, then values derived from both (thread count, resource estimates,
    resident blocks per SM) and the problem shape.

    Args:
        sched: Schedule.
        meta: Hardware metafile.
        shape: Problem shape, a unit shape when omitted.

    Returns:
        ``np.ndarray`` of ``len(FEATURE_NAMES)`` floats.
    """
    shape = shape or ProblemShape(1, 1)
    params = dict(sched.params)
    if "mode" in params:
        params["mode"] = MODE_CODES[params["mode"]]
    shared, registers = estimate_resources(sched, shape)
    derived = {
        "threads_per_block": sched.threads_per_block,
        "shared_bytes": shared,
        "registers": registers,
        "blocks_per_sm": meta.blocks_per_sm(sched.threads_per_block, shared),
        "problem_m": shape.m,
        "problem_n": shape.n,
        "problem_k": shape.k,
    }
    hardware = meta.to_dict()
    values = (
        [params.get(name, 0) for name in PARAM_FEATURES]
        + [hardware[name] for name in HARDWARE_FEATURES]
        + [derived[name] for name in DERIVED_FEATURES]
    )
    return np.asarray(values, dtype=float)


class CostModel:
    """
    ``CostModel`` is a gradient-boosted tree regressor of log cost over feature vectors.

    With fewer than two distinct labels the model predicts their mean.

    Attributes:
        n_estimators: Boosting stages.
        max_depth: Depth of every tree.
        learning_rate: Shrinkage.
        seed: Random state of the regressor.
    """

    def __init__(self, n_estimators: int = 100, max_depth: int = 3, learning_rate: float = 0.1, seed: int = 0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.seed = seed
        self.regressor = None
        self.constant = None

    @classmethod
    def from_config(cls, config: tp.Optional[ConfigParser] = None, seed: int = 0) -> "CostModel":
        section = (config or ConfigParser()).section("cost_model")
        return cls(seed=seed, **section)

    def fit(self, X: np.ndarray, costs: np.ndarray) -> "CostModel":
        X = np.asarray(X, dtype=float)
        target = np.log1p(np.asarray(costs, dtype=float))
        assert X.shape[0] == target.shape[0] and X.shape[0] >= 1, f"Incorrect training set {X.shape}, {target.shape}"
        if X.shape[0] < 2 or np.ptp(target) == 0:
            self.regressor, self.constant = None, float(np.mean(target))
            return self
        self.regressor = GradientBoostingRegressor(
            n_estimators=self.n_estimators,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            random_state=self.seed,
        )
        self.regressor.fit(X, target)
        self.constant = None
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.regressor is None:
            assert self.constant is not None, "CostModel is not fitted"
            return np.full(X.shape[0], np.expm1(self.constant))
        return np.expm1(self.regressor.predict(X))


def tune(
    space: CandidateSpace,
    meta: HardwareMeta,
    profiler: tp.Callable[[Schedule], float],
    top_k: int = 10,
    n_seed: int = 32,
    iterations: int = 5,
    seed: int = 0,
    cost_model: tp.Optional[CostModel] = None,
    workers: int = 1,
) -> tp.Tuple[Schedule, TuningHistory]:
    """
    Search the feasible candidates for the lowest profiled cost.

    A random seed set (plus the default heuristic schedule) is profiled first. Every
    refinement iteration refits the cost model on all profiled candidates, predicts the
    rest and profiles the top-k of them. Profiling results are merged by candidate index.

    Args:
        space: Candidate space.
        meta: Hardware metafile.
        profiler: Callback returning the cost of a schedule.
        top_k: Candidates profiled per iteration.
        n_seed: Size of the random seed set.
        iterations: Refinement iterations.
        seed: Seed of the sampler and the cost model.
        cost_model: Untrained model, config defaults when omitted.
        workers: Concurrent profiler calls.

    Returns:
        (best schedule, ``TuningHistory`` trace).

    Raises:
        InfeasibleScheduleError: no candidate passes the hard rules.
        ProfilerError: profiler failed; the exception carries the partial trace.
    """
    feasible = filter_hard_rules(space, meta)
    rng = np.random.default_rng(seed)
    model = cost_model or CostModel.from_config(seed=seed)
    features = np.stack([extract_features(sched, meta, space.shape) for sched in feasible])
    history = TuningHistory(FEATURE_NAMES)
    costs = {}

    def profile_one(i: int) -> float:
        try:
            return float(profiler(feasible[i]))
        except Exception as exc:
            raise ProfilerError(f"Profiler failed on {feasible[i]}: {exc}", trace=history) from exc

    def record(i: int, cost: float, iteration: int):
        costs[i] = cost
        history.add_snapshot(
            {
                "index": i,
                "iteration": iteration,
                "schedule": feasible[i].to_dict(),
                "features": features[i].tolist(),
                "cost": cost,
            }
        )

    def profile(indices: tp.Iterable[int], iteration: int):
        indices = sorted(set(indices))
        if workers <= 1:
            for i in indices:
                record(i, profile_one(i), iteration)
            return
        # finished profiles are recorded in index order even when a later one fails
        done, failure = {}, None
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(profile_one, i): i for i in indices}
            for future in as_completed(futures):
                try:
                    done[futures[future]] = future.result()
                except ProfilerError as exc:
                    failure = failure or exc
        for i in sorted(done):
            record(i, done[i], iteration)
        if failure is not None:
            raise failure

    seed_set = set(rng.choice(len(feasible), size=min(n_seed, len(feasible)), replace=False).tolist())
    default = default_schedule(space.pattern, space.shape)
    if default in feasible:
        seed_set.add(feasible.index(default))
    profile(seed_set, 0)

    for iteration in range(1, iterations + 1):
        remaining = [i for i in range(len(feasible)) if i not in costs]
        if not remaining:
            break
        profiled = sorted(costs)
        model.fit(features[profiled], np.array([costs[i] for i in profiled]))
        predicted = model.predict(features[remaining])
        order = np.argsort(predicted, kind="stable")[:top_k]
        profile([remaining[j] for j in order], iteration)
        log.info(
            "Tuning iteration",
            iteration=iteration,
            profiled=len(costs),
            candidates=len(feasible),
            best_cost=min(costs.values()),
        )

    best = min(costs, key=lambda i: (costs[i], i))
    log.info("Tuned schedule", pattern=space.pattern.value, schedule=repr(feasible[best]), cost=costs[best])
    return feasible[best], history


class ModeledCostProfiler:
    """
    Deterministic profiler: modeled cost of the pattern instance under a schedule.
    """

    def __init__(self, shape: ProblemShape, meta: HardwareMeta):
        self.shape = shape
        self.meta = meta

    def __call__(self, sched: Schedule) -> float:
        return pattern_cost(sched, self.shape, self.meta).modeled_cost


class WallClockProfiler:
    """
    Profiler timing the host executors on random operands of the problem shape.

    Attributes:
        shape: Problem shape.
        meta: Hardware metafile.
        repeats: Timed runs, the minimum is reported.
        naive: Time the naive kernels (no weight pairing or double bound, unfused transform
            and rescale) instead of the fused ones.
        producer: Relaxation producer of the elementwise pattern.
    """

    def __init__(
        self,
        shape: ProblemShape,
        meta: HardwareMeta,
        repeats: int = 3,
        seed: int = 0,
        naive: bool = False,
        producer: tp.Callable = relax.relax_relu,
    ):
        self.shape = shape
        self.meta = meta
        self.repeats = repeats
        self.rng = np.random.default_rng(seed)
        self.naive = naive
        self.producer = producer

    def _operands(self, pattern: Pattern):
        m, n, k = self.shape.m, self.shape.n, self.shape.k
        if pattern is Pattern.GEMM:
            # one row of bounds with n - 1 weights and the bias column
            D = max(n - 1, 1)
            lw = self.rng.standard_normal((k, D))
            lb = self.rng.standard_normal(k)
            x = LinearBounds(lw, lb - 1.0, lw, lb + 1.0)
            return (self.rng.standard_normal((m, k)), x)
        if pattern is Pattern.VECTOR_REDUCTION:
            return (self.rng.standard_normal((m, n)),)
        if pattern is Pattern.ELEMENTWISE_MUL:
            lw = self.rng.standard_normal((m, n))
            lb = self.rng.standard_normal(m)
            return (LinearBounds(lw, lb - 1.0, lw, lb + 1.0), PerturbationSpec("linf", 0.1, n))
        return (self.rng.standard_normal(m), self.rng.standard_normal((m, n)))

    def _run(self, sched: Schedule, operands):
        if sched.pattern is Pattern.GEMM:
            W, x = operands
            return run_gemm(sched, W, x, meta=self.meta, weight_pairing=not self.naive, double_bound=not self.naive)
        if sched.pattern is Pattern.VECTOR_REDUCTION:
            return run_reduction(sched, operands[0], meta=self.meta, fuse_transform=not self.naive)
        if sched.pattern is Pattern.ELEMENTWISE_MUL:
            x, spec = operands
            return run_elementwise(sched, x, self.producer, spec, meta=self.meta, fused=not self.naive)
        S, X = operands
        return run_scalar_vector(sched, S, X, meta=self.meta, fused=not self.naive)

    def __call__(self, sched: Schedule) -> float:
        operands = self._operands(sched.pattern)
        timings = []
        for _ in range(self.repeats):
            start = time.perf_counter()
            self._run(sched, operands)
            timings.append(time.perf_counter() - start)
        return min(timings)


def tune_pattern(
    pattern: Pattern,
    shape: ProblemShape,
    meta: HardwareMeta,
    profiler: tp.Optional[tp.Callable[[Schedule], float]] = None,
    config: tp.Optional[ConfigParser] = None,
) -> tp.Tuple[Schedule, TuningHistory]:
    """
    Tune the default candidate space of a pattern with the config budget.

    Args:
        pattern: Computing pattern.
        shape: Problem shape.
        meta: Hardware metafile.
        profiler: Cost callback, modeled cost by default.
        config: Config, ``configs/config.yml`` by default.

    Returns:
        (best schedule, ``TuningHistory``).
    """
    config = config or ConfigParser()
    params = config.section("autotune")
    space = CandidateSpace.default(pattern, shape)
    model = CostModel.from_config(config, seed=params.get("seed", 0))
    return tune(
        space,
        meta,
        profiler or ModeledCostProfiler(shape, meta),
        top_k=params.get("top_k", 10),
        n_seed=params.get("n_seed", 32),
        iterations=params.get("iterations", 5),
        seed=params.get("seed", 0),
        cost_model=model,
    )


def save_schedule(
    sched: Schedule,
    path: str,
    meta: tp.Optional[HardwareMeta] = None,
    shape: tp.Optional[ProblemShape] = None,
    cost: tp.Optional[float] = None,
) -> None:
    """
    Export a schedule as json.
    """
    record = {
        "format": SCHEDULE_FORMAT,
        "schedule": sched.to_dict(),
        "hardware": meta.name if meta is not None else None,
        "shape": shape.to_dict() if shape is not None else None,
        "cost": cost,
    }
    with open(path, "w") as stream:
        json.dump(record, stream, indent=1, sort_keys=True)


def load_schedule(path: str) -> Schedule:
    """
    Import a schedule exported by ``save_schedule``.
    """
    try:
        with open(path, "r") as stream:
            record = json.load(stream)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"Cannot read schedule {path}: {exc}")
    if record.get("format") != SCHEDULE_FORMAT:
        raise ModelLoadError(f"Unsupported schedule format = {record.get('format')} in {path}")
    return Schedule.from_dict(record["schedule"])
