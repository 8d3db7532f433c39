"""
    Test history and viewers
    functions:
        TuningHistory - YES
        BenchHistory - YES
        BenchViewer - YES
        BenchViewer.draw_operators - YES
        TuningViewer - YES

    python -m unittest test/test_History.py

"""


import json
import os
import tempfile
import unittest
from parameterized import parameterized
import numpy as np
import polars as pl
from polars.testing import assert_frame_equal

from boundcraft.autotune import FEATURE_NAMES, CandidateSpace, ModeledCostProfiler, tune
from boundcraft.history import BenchHistory, TuningHistory
from boundcraft.machine import HardwareMeta, ProblemShape
from boundcraft.primitives import Pattern
from boundcraft.viewers import BenchViewer, TuningViewer


def snapshot(index, iteration, cost, features=(1.0, 2.0)):
    return {
        "index": index,
        "iteration": iteration,
        "schedule": {"pattern": "elementwise_mul", "params": {"group_size": 32 * (index + 1)}},
        "features": list(features),
        "cost": cost,
    }


def bench_row(experiment, length, embed_dim, cost_naive, cost_fused):
    return {
        "experiment": experiment,
        "length": length,
        "embed_dim": embed_dim,
        "cost_naive": cost_naive,
        "cost_fused": cost_fused,
        "traffic_naive": 400.0,
        "traffic_fused": 100.0,
        "nodes_baseline": 45,
        "nodes_fused": 9,
    }


class TestTuningHistory(unittest.TestCase):
    """
        test TuningHistory
    """

    def setUp(self):
        self.history = TuningHistory(["a", "b"])
        for s in (snapshot(3, 1, 5.0), snapshot(1, 0, 7.0), snapshot(0, 0, 5.0), snapshot(2, 0, 9.0)):
            self.history.add_snapshot(s)

    def test_best(self):
        self.assertEqual(len(self.history), 4)
        self.assertEqual(self.history.best["index"], 0)
        self.assertIsNone(TuningHistory().best)

    def test_empty_snapshot(self):
        self.history.add_snapshot({})
        self.assertEqual(len(self.history), 4)

    def test_to_df(self):
        df = self.history.to_df()
        self.assertIsInstance(df, pl.DataFrame)
        self.assertEqual(df["index"].to_list(), [0, 1, 2, 3])
        self.assertEqual(df["iteration"].to_list(), [0, 0, 0, 1])
        self.assertEqual(df["feat_a"].to_list(), [1.0] * 4)
        self.assertEqual(json.loads(df["schedule"][0])["params"]["group_size"], 32)

    def test_empty_df(self):
        self.assertEqual(TuningHistory().to_df().height, 0)

    def test_jsonl(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.jsonl")
            self.history.to_jsonl(path)
            loaded = TuningHistory.from_jsonl(path, ["a", "b"])
        self.assertEqual(loaded.snapshots, self.history.snapshots)
        assert_frame_equal(loaded.to_df(), self.history.to_df())
        self.assertEqual(loaded.to_df().columns, ["index", "iteration", "cost", "schedule", "feat_a", "feat_b"])

    def test_tuning_trace(self):
        meta = HardwareMeta.from_name("v100-like")
        shape = ProblemShape(128, 512)
        _, history = tune(CandidateSpace.default(Pattern.SCALAR_VECTOR, shape), meta, ModeledCostProfiler(shape, meta))
        df = history.to_df()
        self.assertEqual(df.height, 3)
        self.assertEqual([c for c in df.columns if c.startswith("feat_")], [f"feat_{n}" for n in FEATURE_NAMES])


class TestBenchHistory(unittest.TestCase):
    """
        test BenchHistory
    """

    def setUp(self):
        self.history = BenchHistory()
        for L, naive, fused in ((2, 10.0, 5.0), (4, 30.0, 10.0)):
            self.history.add_snapshot(bench_row("length", L, 128, naive, fused))
        self.history.add_snapshot(bench_row("embed_dim", 16, 64, 8.0, 8.0))

    @parameterized.expand([("speedup", [2.0, 3.0, 1.0]), ("traffic_ratio", [0.25] * 3), ("node_ratio", [0.2] * 3)])
    def test_stats(self, column, expected):
        df = self.history.calculate_stats(self.history.to_df())
        np.testing.assert_allclose(df[column].to_list(), expected)

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bench.csv")
            df = self.history.to_csv(path)
            loaded = pl.read_csv(path)
        self.assertEqual(loaded.columns, df.columns)
        self.assertEqual(loaded["length"].to_list(), [2, 4, 16])


class TestViewers(unittest.TestCase):
    """
        test BenchViewer and TuningViewer
    """

    def test_sweeps(self):
        history = BenchHistory()
        for L in (2, 4, 8):
            history.add_snapshot(bench_row("length", L, 128, 10.0 * L, 4.0 * L))
        length_fig, embed_fig = BenchViewer(history).draw_sweeps()
        self.assertIsNone(embed_fig)
        self.assertEqual([trace.name for trace in length_fig.data], ["naive", "fused", "speedup"])
        np.testing.assert_allclose(length_fig.data[2].y, [2.5, 2.5, 2.5])

    def test_operators(self):
        history = BenchHistory()
        for L in (2, 4):
            for operator, naive in (("total", 40.0), ("gemm", 20.0), ("softmax", 12.0)):
                history.add_snapshot(dict(bench_row("length", L, 8, naive * L, 4.0 * L), operator=operator, dim=8 * L))
        fig = BenchViewer(history).draw_operators()
        self.assertEqual([trace.name for trace in fig.data], ["gemm", "softmax"])
        np.testing.assert_allclose(fig.data[0].y, [5.0, 5.0])
        np.testing.assert_allclose(fig.data[1].y, [3.0, 3.0])
        length_fig, _ = BenchViewer(history).draw_sweeps()
        np.testing.assert_allclose(length_fig.data[2].y, [10.0, 10.0])
        self.assertIsNone(BenchViewer(BenchHistory()).draw_operators())

    def test_write_html(self):
        history = BenchHistory()
        history.add_snapshot(bench_row("embed_dim", 16, 64, 8.0, 4.0))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bench.html")
            BenchViewer(history).write_html(path)
            self.assertGreater(os.path.getsize(path), 0)

    def test_trace(self):
        history = TuningHistory(["a", "b"])
        for i, cost in enumerate((5.0, 7.0, 3.0, 4.0)):
            history.add_snapshot(snapshot(i, int(i > 1), cost))
        fig = TuningViewer(history).draw_trace()
        self.assertEqual(list(fig.data[0].y), [5.0, 7.0, 3.0, 4.0])
        self.assertEqual(list(fig.data[1].y), [5.0, 5.0, 3.0, 3.0])


if __name__ == "__main__":
    unittest.main()
