import math
import time
import typing as tp

import numpy as np

from boundcraft.core import ConcreteBounds, PerturbationSpec, check_robust, concretize, sample_ball
from boundcraft.graph import evaluate, fuse_all
from boundcraft.machine import HardwareMeta, Schedule, graph_cost
from boundcraft.model_io import TransformerSpec, build_graph, forward
from boundcraft.primitives import Norm, Pattern
from boundcraft.utils import MisclassifiedInputError, ShapeMismatchError, log


class VerifyReport:
    """
    ``VerifyReport`` is the outcome of one robustness query.

    Attributes:
        lo: Lower logit bounds.
        hi: Upper logit bounds.
        verified: ``check_robust`` result.
        true_class: Expected class.
        margin: Required gap.
        epsilon: Ball radius.
        norm: Ball norm.
        fused: Whether the fused graph was evaluated.
        wall_time: Seconds spent in bound propagation.
        cost: Modeled cost summary, fused vs naive.
    """

    def __init__(
        self,
        bounds: ConcreteBounds,
        verified: bool,
        true_class: int,
        margin: float,
        epsilon: float,
        norm: Norm,
        fused: bool,
        wall_time: float,
        cost: tp.Optional[dict] = None,
    ):
        self.lo = bounds.lo
        self.hi = bounds.hi
        self.verified = verified
        self.true_class = true_class
        self.margin = margin
        self.epsilon = epsilon
        self.norm = norm
        self.fused = fused
        self.wall_time = wall_time
        self.cost = cost or {}

    def to_dict(self) -> dict:
        return {
            "verified": self.verified,
            "true_class": self.true_class,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "margin": self.margin,
            "epsilon": self.epsilon,
            "norm": self.norm.value,
            "fused": self.fused,
            "wall_time": self.wall_time,
            "cost": self.cost,
        }


class Verifier:
    """
    ``Verifier`` runs the verification pipeline of one model: build the graph (fused or
    baseline), propagate bounds, concretize the logits and check robustness.

    Attributes:
        model: Model with weights.
        meta: Hardware metafile for the cost summary.
        fused: Evaluate the fused graph.
        schedules: Tuned schedule per pattern for the fused cost summary.
    """

    def __init__(
        self,
        model: TransformerSpec,
        meta: tp.Optional[HardwareMeta] = None,
        fused: bool = True,
        schedules: tp.Optional[tp.Dict[Pattern, Schedule]] = None,
    ):
        single = TransformerSpec(**{**model.config(), "batch_size": 1}, weights=model.weights)
        self.model = single
        self.meta = meta or HardwareMeta.default()
        self.fused = fused
        self.schedules = schedules
        self.baseline_graph = build_graph(single, split_projections=True)
        self.fused_graph = fuse_all(self.baseline_graph)

    @property
    def graph(self):
        return self.fused_graph if self.fused else self.baseline_graph

    def _input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = (self.model.length, self.model.embed_dim)
        if x.shape not in (shape, (1,) + shape):
            raise ShapeMismatchError(f"Input {x.shape} does not match model input {shape}")
        return x.reshape((1,) + shape)

    def spec(self, epsilon: float, norm="linf") -> PerturbationSpec:
        return PerturbationSpec(norm, epsilon, self.model.perturbation_dim)

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(forward(self.model, self._input(x))[0]))

    def bounds(self, x: np.ndarray, epsilon: float, norm="linf") -> ConcreteBounds:
        """
        Concretized logit bounds over the ball around ``x``.

        Args:
            x: Embeddings ``[L, E]``.
            epsilon: Radius.
            norm: Ball norm.

        Returns:
            ``ConcreteBounds`` of shape ``[C]``.
        """
        spec = self.spec(epsilon, norm)
        out = evaluate(self.graph, {"x": self._input(x)}, spec)
        c = concretize(out, spec)
        return ConcreteBounds(c.lo[0], c.hi[0])

    def verify(
        self,
        x: np.ndarray,
        true_class: int,
        epsilon: float,
        norm="linf",
        margin: float = 0.0,
        with_cost: bool = False,
    ) -> VerifyReport:
        """
        Check that every input in the ball keeps ``true_class``.

        Returns:
            ``VerifyReport``.
        """
        start = time.perf_counter()
        c = self.bounds(x, epsilon, norm)
        wall_time = time.perf_counter() - start
        verified = check_robust(c, true_class, margin)
        report = VerifyReport(
            c,
            verified,
            int(true_class),
            margin,
            float(epsilon),
            Norm.parse(norm),
            self.fused,
            wall_time,
            self.cost_summary() if with_cost else None,
        )
        log.info(
            "Verification", verified=verified, epsilon=epsilon, norm=report.norm.value, fused=self.fused, wall_time=round(wall_time, 4)
        )
        return report

    def max_eps(
        self,
        x: np.ndarray,
        true_class: int,
        norm="linf",
        tol: float = 1e-3,
        eps_max: float = 1.0,
        margin: float = 0.0,
    ) -> float:
        """
        Largest verified radius in ``[0, eps_max]`` by bisection, to within ``tol``.

        The returned radius is always verified. The endpoints are checked only when no
        midpoint settles them: ``eps_max`` when every midpoint verifies, zero when none
        does. At most one of the two runs, so the search makes at most
        ``max(ceil(log2(eps_max / tol)), 1) + 1`` bound computations.

        Raises:
            MisclassifiedInputError: not verified at zero radius.
        """
        assert tol > 0 and eps_max > 0, f"Incorrect tol = {tol} or eps_max = {eps_max}"
        lo, hi = 0.0, eps_max
        steps = max(math.ceil(math.log2(eps_max / tol)), 1)
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if check_robust(self.bounds(x, mid, norm), true_class, margin):
                lo = mid
            else:
                hi = mid

        if hi == eps_max and check_robust(self.bounds(x, eps_max, norm), true_class, margin):
            lo = eps_max
        elif lo == 0.0 and not check_robust(self.bounds(x, 0.0, norm), true_class, margin):
            raise MisclassifiedInputError(f"Misclassified input: class {true_class} is not verified at epsilon = 0")
        log.info("Max epsilon", epsilon=lo, norm=Norm.parse(norm).value, tol=tol, steps=steps)
        return lo

    def find_counterexample(
        self, x: np.ndarray, true_class: int, epsilon: float, norm="linf", n: int = 256, seed: int = 0
    ) -> tp.Optional[np.ndarray]:
        """
        Sample the ball and return a perturbation changing the prediction, if one is found.
        """
        x = self._input(x)
        spec = self.spec(epsilon, norm)
        deltas = sample_ball(spec, n, np.random.default_rng(seed))
        logits = forward(self.model, x + deltas.reshape((n,) + x.shape[1:]))
        wrong = np.argmax(logits, axis=-1) != true_class
        return deltas[np.argmax(wrong)] if np.any(wrong) else None

    def cost_summary(self, dim: tp.Optional[int] = None) -> dict:
        """
        Modeled cost of the baseline graph on naive kernels against the fused graph on
        (tuned) scheduled kernels.

        Args:
            dim: Perturbation dimension, the model input size by default.

        Returns:
            Dict of costs, global traffic and node counts.
        """
        dim = dim or self.model.perturbation_dim
        naive = graph_cost(self.baseline_graph, dim, self.meta, naive=True)
        fused = graph_cost(self.fused_graph, dim, self.meta, self.schedules)
        return {
            "cost_naive": naive.modeled_cost,
            "cost_fused": fused.modeled_cost,
            "traffic_naive": naive.global_loads + naive.global_stores,
            "traffic_fused": fused.global_loads + fused.global_stores,
            "nodes_baseline": len(self.baseline_graph.nodes),
            "nodes_fused": len(self.fused_graph.nodes),
            "groups_fused": len(self.fused_graph.fusion_groups),
        }
