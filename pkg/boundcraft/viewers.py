import typing as tp

import polars as pl
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from boundcraft.history import BenchHistory, TuningHistory


class BenchViewer:
    """
    ``BenchViewer`` plots benchmark sweeps of naive against fused modeled cost.

    Attributes:
        bench_history: ``BenchHistory`` filled by the bench command.
    """

    def __init__(self, bench_history: BenchHistory) -> None:
        self.bench_history = bench_history

    def draw_sweeps(self):
        """
        Main function of the class.

        Returns: plotly plots
            | fig1: Length sweep of the whole model.
            | fig2: Embedding size sweep of the whole model.
        """
        df = self.bench_history.calculate_stats(self.bench_history.to_df())
        if "operator" in df.columns:
            df = df.filter(pl.col("operator") == "total")
        figs = []
        for experiment, axis in (("length", "length"), ("embed_dim", "embed_dim")):
            part = df.filter(pl.col("experiment") == experiment)
            figs.append(self.draw_sweep(part, axis) if part.height else None)
        return tuple(figs)

    def draw_operators(self) -> tp.Optional[go.Figure]:
        """
        Modeled speedup of every operator over the perturbation dimension.

        Returns:
            Figure, or None without operator rows.
        """
        df = self.bench_history.to_df()
        if "operator" not in df.columns:
            return None
        df = self.bench_history.calculate_stats(df).filter(pl.col("operator") != "total").sort(by=["operator", "dim"])
        if not df.height:
            return None
        fig = go.Figure()
        for operator in df["operator"].unique(maintain_order=True).to_list():
            part = df.filter(pl.col("operator") == operator)
            fig.add_trace(
                go.Scatter(x=part["dim"].to_list(), y=part["speedup"].to_list(), mode="lines+markers", name=operator)
            )
        fig.update_xaxes(title_text="Perturbation dimension", type="log")
        fig.update_yaxes(title_text="Modeled speedup", type="log")
        fig.update_layout(title="Naive over fused modeled cost per operator")
        return fig

    def draw_sweep(self, bench_df: pl.DataFrame, axis: str) -> go.Figure:
        """
        Plot naive and fused modeled cost with the speedup on a secondary axis.

        Args:
            bench_df: Rows of one sweep with ratio columns.
            axis: Swept column.

        Returns:
            Figure.
        """
        fig = make_subplots(specs=[[{"secondary_y": True}]])
        fig.add_trace(
            go.Scatter(x=bench_df[axis].to_list(), y=bench_df["cost_naive"].to_list(), name="naive"),
            secondary_y=False,
        )
        fig.add_trace(
            go.Scatter(x=bench_df[axis].to_list(), y=bench_df["cost_fused"].to_list(), name="fused"),
            secondary_y=False,
        )
        fig.add_trace(
            go.Scatter(
                x=bench_df[axis].to_list(),
                y=bench_df["speedup"].to_list(),
                name="speedup",
                line=dict(dash="dot"),
            ),
            secondary_y=True,
        )
        fig.update_xaxes(title_text=axis, type="log" if axis == "length" else "linear")
        fig.update_yaxes(title_text="Modeled cost", type="log", secondary_y=False)
        fig.update_yaxes(title_text="Speedup", secondary_y=True)
        fig.update_layout(title=f"Modeled cost over {axis}")
        return fig

    def write_html(self, path: str) -> None:
        with open(path, "w") as stream:
            for fig in self.draw_sweeps() + (self.draw_operators(),):
                if fig is not None:
                    stream.write(fig.to_html(full_html=False, include_plotlyjs="cdn"))


class TuningViewer:
    """
    ``TuningViewer`` plots profiled cost in profiling order with the running best.

    Attributes:
        tuning_history: ``TuningHistory`` of one session.
    """

    def __init__(self, tuning_history: TuningHistory) -> None:
        self.tuning_history = tuning_history

    def draw_trace(self) -> go.Figure:
        costs = [s["cost"] for s in self.tuning_history.snapshots]
        best, running = float("inf"), []
        for cost in costs:
            best = min(best, cost)
            running.append(best)
        iterations = [s["iteration"] for s in self.tuning_history.snapshots]

        fig = go.Figure()
        fig.add_trace(
            go.Scatter(
                x=list(range(len(costs))),
                y=costs,
                mode="markers",
                marker=dict(color=iterations, colorscale="Viridis", showscale=True),
                name="profiled",
            )
        )
        fig.add_trace(go.Scatter(x=list(range(len(costs))), y=running, name="best"))
        fig.update_xaxes(title_text="Profiled candidate")
        fig.update_yaxes(title_text="Cost")
        fig.update_layout(title="Tuning trace")
        return fig
