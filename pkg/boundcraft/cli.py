"""
Command line entry point.

    boundcraft gen     --out-model m.json --out-input x.json
    boundcraft verify  --model m.json --input x.json --eps 0.01 --norm linf
    boundcraft maxeps  --model m.json --input x.json --tol 1e-3
    boundcraft tune    --pattern gemm --shape 128,4112,128 --out best.json --trace trace.jsonl
    boundcraft bench   --out bench.csv --plot bench.html

Exit codes: 0 verified (or success), 1 not verified, 2 error.
"""

import argparse
import json
import logging
import os
import sys
import time
import typing as tp

import numpy as np
import structlog
from tqdm import tqdm

from boundcraft import relax
from boundcraft.autotune import (
    CandidateSpace,
    CostModel,
    ModeledCostProfiler,
    WallClockProfiler,
    save_schedule,
    tune,
    tune_pattern,
)
from boundcraft.graph import evaluate
from boundcraft.history import BenchHistory
from boundcraft.machine import (
    CostReport,
    HardwareMeta,
    ProblemShape,
    Schedule,
    default_schedule,
    gemm_counts,
    node_costs,
    pattern_cost,
)
from boundcraft.model_io import (
    TransformerSpec,
    gen_synthetic,
    load_embedding,
    load_model,
    save_embedding,
    save_model,
)
from boundcraft.primitives import Activation, OpKind, Pattern, ReductionMode
from boundcraft.utils import ConfigParser, log
from boundcraft.verifier import Verifier
from boundcraft.viewers import BenchViewer, TuningViewer

EXIT_VERIFIED = 0
EXIT_NOT_VERIFIED = 1
EXIT_ERROR = 2


def configure_logging(verbose: int = 0) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose == 1 else logging.WARNING
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(sys.stderr),
        cache_logger_on_first_use=False,
    )


def resolve_meta(name_or_path: tp.Optional[str], config: ConfigParser) -> HardwareMeta:
    if name_or_path is None:
        return HardwareMeta.from_name(config.section("hardware").get("default", "a100-like"))
    if os.path.exists(name_or_path):
        return HardwareMeta.from_json(name_or_path)
    return HardwareMeta.from_name(name_or_path)


def _label(model_label, verifier: Verifier, x: np.ndarray, override: tp.Optional[int]) -> int:
    if override is not None:
        return override
    if model_label is None:
        return verifier.predict(x)
    return int(np.ravel(model_label)[0])


def _write_json(path: tp.Optional[str], record: dict) -> None:
    if path:
        with open(path, "w") as stream:
            json.dump(record, stream, indent=1)


# ---------------------------------------------------------------- commands


def cmd_gen(args, config: ConfigParser) -> int:
    spec = TransformerSpec(
        num_layers=args.layers,
        num_heads=args.heads,
        embed_dim=args.embed_dim,
        ffn_dim=args.ffn_dim,
        length=args.length,
        batch_size=1,
        num_classes=args.classes,
        activation=Activation(args.activation),
    )
    model, x, labels = gen_synthetic(args.seed, spec)
    save_model(model, args.out_model, inline=args.inline)
    save_embedding(x[0], args.out_input, label=int(labels[0]), inline=args.inline)
    print(json.dumps({"model": args.out_model, "input": args.out_input, "label": int(labels[0])}))
    return EXIT_VERIFIED


def cmd_verify(args, config: ConfigParser) -> int:
    model = load_model(args.model)
    x, label = load_embedding(args.input)
    verifier = Verifier(model, resolve_meta(args.meta, config), fused=not args.naive)
    true_class = _label(label, verifier, x, args.label)
    report = verifier.verify(x, true_class, args.eps, args.norm, args.margin, with_cost=True)
    _write_json(args.out, report.to_dict())
    print(json.dumps({"verified": report.verified, "epsilon": report.epsilon, "norm": report.norm.value}))
    return EXIT_VERIFIED if report.verified else EXIT_NOT_VERIFIED


def cmd_maxeps(args, config: ConfigParser) -> int:
    model = load_model(args.model)
    x, label = load_embedding(args.input)
    verifier = Verifier(model, resolve_meta(args.meta, config), fused=not args.naive)
    true_class = _label(label, verifier, x, args.label)
    eps = verifier.max_eps(x, true_class, args.norm, args.tol, args.eps_max, args.margin)
    record = {"max_epsilon": eps, "norm": args.norm, "tol": args.tol, "eps_max": args.eps_max, "true_class": true_class}
    _write_json(args.out, record)
    print(json.dumps(record))
    return EXIT_VERIFIED


def cmd_tune(args, config: ConfigParser) -> int:
    meta = resolve_meta(args.meta, config)
    dims = [int(v) for v in args.shape.split(",")]
    shape = ProblemShape(*dims)
    pattern = Pattern(args.pattern)
    params = config.section("autotune")
    seed = params.get("seed", 0) if args.seed is None else args.seed

    profiler = WallClockProfiler(shape, meta, seed=seed) if args.profiler == "wallclock" else ModeledCostProfiler(shape, meta)
    best, history = tune(
        CandidateSpace.default(pattern, shape),
        meta,
        profiler,
        top_k=params.get("top_k", 10),
        n_seed=params.get("n_seed", 32),
        iterations=params.get("iterations", 5),
        seed=seed,
        cost_model=CostModel.from_config(config, seed=seed),
    )
    cost = history.best["cost"]
    if args.out:
        save_schedule(best, args.out, meta, shape, cost)
    if args.trace:
        history.to_jsonl(args.trace)
    if args.plot:
        TuningViewer(history).draw_trace().write_html(args.plot)
    print(json.dumps({"schedule": best.to_dict(), "cost": cost, "profiled": len(history)}))
    return EXIT_VERIFIED


BENCH_PATTERNS = (Pattern.GEMM, Pattern.VECTOR_REDUCTION, Pattern.ELEMENTWISE_MUL, Pattern.SCALAR_VECTOR)
SOFTMAX_OPERATOR = "softmax"
TOTAL_OPERATOR = "total"


def operator_shapes(model: TransformerSpec) -> tp.Dict[Pattern, ProblemShape]:
    """
    Problem shape every computing pattern is benchmarked and tuned on.

    | GEMM - first projection: E x E weight on the L*(D+1) bound columns.
    | VECTOR_REDUCTION - softmax normalizer: every bound column of the H*L score rows, reduced over L.
    | ELEMENTWISE_MUL - feed-forward activation over L*F neurons with D-dimensional weights.
    | SCALAR_VECTOR - slope rescale of the L*F activation bound rows, bias column included.
    """
    L, E, H, F = model.length, model.embed_dim, model.num_heads, model.ffn_dim
    D = L * E
    return {
        Pattern.GEMM: ProblemShape(E, L * (D + 1), E),
        Pattern.VECTOR_REDUCTION: ProblemShape(H * L * 2 * (D + 1), L),
        Pattern.ELEMENTWISE_MUL: ProblemShape(L * F, D),
        Pattern.SCALAR_VECTOR: ProblemShape(L * F, D + 1),
    }


def naive_schedule(pattern: Pattern, shape: ProblemShape) -> Schedule:
    if pattern is Pattern.VECTOR_REDUCTION:
        return Schedule.reduction(ReductionMode.CHUNKED)
    return default_schedule(pattern, shape)


def host_times(
    pattern: Pattern, shape: ProblemShape, sched: Schedule, meta: HardwareMeta, seed: int, producer=relax.relax_relu
) -> tp.Tuple[float, float]:
    """
    Host wall-clock of the naive and of the scheduled fused executor on the same operands.
    """
    naive = WallClockProfiler(shape, meta, repeats=1, seed=seed, naive=True, producer=producer)
    fused = WallClockProfiler(shape, meta, repeats=1, seed=seed, producer=producer)
    return naive(naive_schedule(pattern, shape)), fused(sched)


def _operator_row(point: dict, operator: str, naive: CostReport, fused: CostReport, times=(None, None)) -> dict:
    row = dict(point, operator=operator)
    row["cost_naive"], row["cost_fused"] = naive.modeled_cost, fused.modeled_cost
    row["traffic_naive"] = naive.global_loads + naive.global_stores
    row["traffic_fused"] = fused.global_loads + fused.global_stores
    row["time_naive"], row["time_fused"] = times
    return row


def bench_point(
    experiment: str,
    length: int,
    embed_dim: int,
    meta: HardwareMeta,
    config: ConfigParser,
    seed: int,
    tuned: bool,
    model: tp.Optional[TransformerSpec] = None,
) -> tp.List[dict]:
    """
    Benchmark one model shape: a ``total`` row for the whole one-layer model plus one row per
    operator (the four computing patterns and softmax), naive against fused and tuned.

    Modeled costs are always reported. Host timings are measured when the perturbation
    dimension is at most ``bench.max_timed_dim``.

    Returns:
        Bench rows, ``total`` first.
    """
    bench = config.section("bench")
    if model is None:
        spec = TransformerSpec(num_layers=1, num_heads=bench.get("num_heads", 4), embed_dim=embed_dim, length=length)
        model, x, _ = gen_synthetic(seed, spec)
    else:
        x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(1, model.length, model.embed_dim))
    dim = model.length * model.embed_dim
    timed = dim <= bench.get("max_timed_dim", 2048)

    shapes = operator_shapes(model)
    if tuned:
        schedules = {pattern: tune_pattern(pattern, shapes[pattern], meta, config=config)[0] for pattern in BENCH_PATTERNS}
    else:
        schedules = {pattern: default_schedule(pattern, shapes[pattern]) for pattern in BENCH_PATTERNS}

    verifier = Verifier(model, meta, schedules=schedules if tuned else None)
    point = {"experiment": experiment, "length": model.length, "embed_dim": model.embed_dim, "dim": dim}

    total = dict(point, operator=TOTAL_OPERATOR)
    total.update(verifier.cost_summary())
    gemm, gemm_shape = schedules[Pattern.GEMM], shapes[Pattern.GEMM]
    ratios = {
        "weight_load_ratio": gemm_counts(gemm, gemm_shape, meta, weight_pairing=True).weight_loads
        / gemm_counts(gemm, gemm_shape, meta, weight_pairing=False).weight_loads,
        "bound_load_ratio": gemm_counts(gemm, gemm_shape, meta, double_bound=True).bound_loads
        / gemm_counts(gemm, gemm_shape, meta, double_bound=False).bound_loads,
    }
    total.update(ratios)
    total["time_naive"], total["time_fused"] = None, None
    if timed:
        spec = verifier.spec(0.01)
        for key, graph in (("time_naive", verifier.baseline_graph), ("time_fused", verifier.fused_graph)):
            start = time.perf_counter()
            evaluate(graph, {"x": x[:1]}, spec)
            total[key] = time.perf_counter() - start
    rows = [total]

    for pattern in BENCH_PATTERNS:
        shape, sched = shapes[pattern], schedules[pattern]
        times = (None, None)
        if timed:
            # one position's bound matrix for the GEMM
            timed_shape = ProblemShape(shape.m, dim + 1, shape.k) if pattern is Pattern.GEMM else shape
            times = host_times(pattern, timed_shape, sched, meta, seed)
        row = _operator_row(
            point, pattern.value, pattern_cost(sched, shape, meta, naive=True), pattern_cost(sched, shape, meta), times
        )
        if pattern is Pattern.GEMM:
            row.update(ratios)
        rows.append(row)

    naive_softmax = node_costs(verifier.baseline_graph, dim, meta, naive=True)[OpKind.SOFTMAX]
    fused_softmax = node_costs(verifier.fused_graph, dim, meta, verifier.schedules)[OpKind.SOFTMAX]
    times = (None, None)
    if timed:
        # exp relaxation, normalizer reduction, reciprocal rescale
        H, L = model.num_heads, model.length
        parts = (
            (Pattern.ELEMENTWISE_MUL, ProblemShape(H * L * L, dim), relax.relax_exp),
            (Pattern.VECTOR_REDUCTION, shapes[Pattern.VECTOR_REDUCTION], relax.relax_relu),
            (Pattern.SCALAR_VECTOR, ProblemShape(H * L * L, dim + 1), relax.relax_relu),
        )
        measured = [host_times(p, s, schedules[p], meta, seed, producer) for p, s, producer in parts]
        times = (sum(t[0] for t in measured), sum(t[1] for t in measured))
    rows.append(_operator_row(point, SOFTMAX_OPERATOR, naive_softmax, fused_softmax, times))

    log.info(
        "Bench point",
        experiment=experiment,
        length=model.length,
        embed_dim=model.embed_dim,
        speedup=total["cost_naive"] / total["cost_fused"],
        operators=len(rows) - 1,
    )
    return rows


def cmd_bench(args, config: ConfigParser) -> int:
    meta = resolve_meta(args.meta, config)
    bench = config.section("bench")
    seed = bench.get("seed", 0) if args.seed is None else args.seed
    history = BenchHistory()

    points = []
    if args.model:
        model = load_model(args.model)
        points.append(("model", model.length, model.embed_dim, model))
    if args.sweep in ("length", "both") and not args.model:
        points += [("length", L, bench.get("embed_dim", 128), None) for L in bench["lengths"]]
    if args.sweep in ("embed", "both") and not args.model:
        points += [("embed_dim", bench.get("length", 16), E, None) for E in bench["embed_dims"]]

    for experiment, length, embed_dim, model in tqdm(points, disable=not args.progress):
        for row in bench_point(experiment, length, embed_dim, meta, config, seed, not args.no_tune, model):
            history.add_snapshot(row)

    df = history.to_csv(args.out) if args.out else history.calculate_stats(history.to_df())
    if args.plot:
        BenchViewer(history).write_html(args.plot)
    print(df)
    return EXIT_VERIFIED


# ---------------------------------------------------------------- parser


def build_parser(config: ConfigParser) -> argparse.ArgumentParser:
    verify_cfg = config.section("verify")
    parser = argparse.ArgumentParser(prog="boundcraft", description="Transformer robustness verification with fused bound kernels")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic model and input")
    gen.add_argument("--out-model", required=True)
    gen.add_argument("--out-input", required=True)
    gen.add_argument("--layers", type=int, default=1)
    gen.add_argument("--heads", type=int, default=4)
    gen.add_argument("--embed-dim", type=int, default=128)
    gen.add_argument("--ffn-dim", type=int, default=None)
    gen.add_argument("--length", type=int, default=16)
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--activation", choices=[a.value for a in Activation], default=Activation.RELU.value)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--inline", action="store_true", help="inline arrays in json")
    gen.set_defaults(func=cmd_gen)

    def add_query_args(p):
        p.add_argument("--model", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--norm", choices=["l1", "l2", "linf"], default=verify_cfg.get("norm", "linf"))
        p.add_argument("--margin", type=float, default=verify_cfg.get("margin", 0.0))
        p.add_argument("--label", type=int, default=None, help="expected class, the input file label by default")
        p.add_argument("--meta", default=None, help="hardware metafile name or path")
        p.add_argument("--out", default=None)
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--fused", dest="naive", action="store_false", help="evaluate the fused graph (default)")
        mode.add_argument("--naive", dest="naive", action="store_true", help="evaluate the baseline graph")
        p.set_defaults(naive=False)

    verify = sub.add_parser("verify", help="verify robustness at one radius")
    add_query_args(verify)
    verify.add_argument("--eps", type=float, required=True)
    verify.set_defaults(func=cmd_verify)

    maxeps = sub.add_parser("maxeps", help="largest verified radius by bisection")
    add_query_args(maxeps)
    maxeps.add_argument("--tol", type=float, default=verify_cfg.get("tol", 1e-3))
    maxeps.add_argument("--eps-max", type=float, default=verify_cfg.get("eps_max", 1.0))
    maxeps.set_defaults(func=cmd_maxeps)

    tune_p = sub.add_parser("tune", help="tune the schedule of one pattern")
    tune_p.add_argument("--pattern", choices=[p.value for p in Pattern], required=True)
    tune_p.add_argument("--shape", required=True, help="m,n[,k]")
    tune_p.add_argument("--meta", default=None)
    tune_p.add_argument("--seed", type=int, default=None)
    tune_p.add_argument("--profiler", choices=["modeled", "wallclock"], default="modeled")
    tune_p.add_argument("--out", default=None, help="best schedule json")
    tune_p.add_argument("--trace", default=None, help="trace json lines")
    tune_p.add_argument("--plot", default=None, help="trace plot html")
    tune_p.set_defaults(func=cmd_tune)

    bench = sub.add_parser("bench", help="per-operator naive vs fused modeled cost and host time sweeps")
    bench.add_argument("--model", default=None, help="bench one model file instead of the sweeps")
    bench.add_argument("--sweep", choices=["length", "embed", "both"], default="both")
    bench.add_argument("--meta", default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--no-tune", action="store_true", help="default schedules for the fused pipeline")
    bench.add_argument("--progress", action="store_true")
    bench.add_argument("--out", default=None, help="csv path")
    bench.add_argument("--plot", default=None, help="html path")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: tp.Optional[tp.Sequence[str]] = None) -> int:
    config = ConfigParser()
    args = build_parser(config).parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args, config)
    except Exception as exc:
        log.error("Command failed", command=args.command, error=str(exc), error_type=type(exc).__name__)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
