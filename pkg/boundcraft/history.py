import json
import typing as tp

import pandas as pd
import polars as pl


class TuningHistory:
    """
    | ``TuningHistory`` accumulates one snapshot per profiled candidate of a tuning session.
    | Each snapshot keeps the candidate index, the refinement iteration, the schedule, its feature vector and cost.
    | Snapshots can be viewed as a ``pl.DataFrame`` via ``to_df`` or exported as json lines.
    """

    def __init__(self, feature_names: tp.Sequence[str] = ()):
        self.feature_names = list(feature_names)
        self.snapshots = []

    def add_snapshot(self, snapshot: dict) -> None:
        """
        Add profiled candidate to history.

        Args:
            snapshot: Dict with ``index``, ``iteration``, ``schedule``, ``features``, ``cost``.
        """
        if snapshot:
            self.snapshots.append(snapshot)

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def best(self) -> tp.Optional[dict]:
        if not self.snapshots:
            return None
        return min(self.snapshots, key=lambda s: (s["cost"], s["index"]))

    def to_df(self) -> pl.DataFrame:
        """
        Transform snapshots to data frame, one ``feat_<name>`` column per feature.

        Returns:
            Tuning history data frame sorted by iteration and candidate index.
        """
        columns = ["index", "iteration", "cost", "schedule"] + [f"feat_{name}" for name in self.feature_names]
        rows = []
        for snapshot in self.snapshots:
            row = {key: snapshot[key] for key in ("index", "iteration", "cost")}
            row["schedule"] = json.dumps(snapshot["schedule"], sort_keys=True)
            for name, value in zip(self.feature_names, snapshot["features"]):
                row[f"feat_{name}"] = float(value)
            rows.append(row)
        df = pd.DataFrame(rows, columns=columns if rows else columns[:4])
        return pl.from_pandas(df).sort(by=["iteration", "index"])

    def to_jsonl(self, path: str) -> None:
        """
        Write one json record per profiled candidate.

        Args:
            path: Output file.
        """
        with open(path, "w") as stream:
            for snapshot in self.snapshots:
                stream.write(json.dumps(snapshot, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str, feature_names: tp.Sequence[str] = ()) -> "TuningHistory":
        history = cls(feature_names)
        with open(path, "r") as stream:
            for line in stream:
                if line.strip():
                    history.add_snapshot(json.loads(line))
        return history


class BenchHistory:
    """
    | ``BenchHistory`` accumulates benchmark rows, one per (experiment, shape, operator).
    | The ``total`` operator row covers the whole model, the others one computing pattern or softmax.
    | ``calculate_stats`` adds fused-over-naive ratio columns.
    """

    def __init__(self):
        self.rows = []

    def add_snapshot(self, snapshot: dict) -> None:
        """
        Add benchmark row to history.

        Args:
            snapshot: Dict of measured values.
        """
        if snapshot:
            self.rows.append(snapshot)

    def to_df(self) -> pl.DataFrame:
        """
        Transform rows to data frame.

        Returns:
            Benchmark data frame.
        """
        df = pd.DataFrame(self.rows)
        return pl.from_pandas(df)

    def calculate_stats(self, df: pl.DataFrame) -> pl.DataFrame:
        """
        | Calculates:
        | speedup - naive modeled cost over fused modeled cost,
        | traffic_ratio - fused global traffic over naive global traffic,
        | node_ratio - fused node count over baseline node count, ``total`` rows only.

        Args:
            df: Benchmark data frame from ``to_df``.

        Returns:
            Data frame with the ratio columns appended.
        """
        return df.with_columns(
            [
                (pl.col("cost_naive") / pl.col("cost_fused")).alias("speedup"),
                (pl.col("traffic_fused") / pl.col("traffic_naive")).alias("traffic_ratio"),
                (pl.col("nodes_fused") / pl.col("nodes_baseline")).alias("node_ratio"),
            ]
        )

    def to_csv(self, path: str) -> pl.DataFrame:
        df = self.calculate_stats(self.to_df())
        df.write_csv(path)
        return df
