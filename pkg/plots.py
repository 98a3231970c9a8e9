"""
Plots: plotly figures written as standalone HTML.
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import pandas as pd
import plotly.graph_objects as go

log = logging.getLogger(__name__)

COLORS = {"s": "#66bb6a", "m": "#42a5f5", "e": "#ef5350"}
NAMES = {"s": "start", "m": "middle", "e": "end"}


def stream_figure(outputs: pd.DataFrame, gt: Optional[Tuple[int, int]] = None,
                  title: str = "Streaming span probabilities") -> go.Figure:
    """outputs: columns T, s, m, e, warmup."""
    fig = go.Figure()
    for col in ("s", "m", "e"):
        fig.add_trace(go.Scatter(
            x=outputs["T"], y=outputs[col], mode="lines",
            name=NAMES[col], line=dict(color=COLORS[col], width=2),
        ))
    warm = outputs.loc[outputs["warmup"].astype(bool), "T"]
    if len(warm):
        fig.add_vrect(x0=warm.min() - 0.5, x1=warm.max() + 0.5, fillcolor="grey",
                      opacity=0.12, line_width=0, annotation_text="warm-up")
    if gt is not None:
        fig.add_vrect(x0=gt[0] - 0.5, x1=gt[1] + 0.5, fillcolor="orange", opacity=0.2,
                      line_width=0, annotation_text=f"ground truth {gt[0]}–{gt[1]}")
    fig.update_layout(
        title=title,
        xaxis_title="Frame T",
        yaxis_title="Probability",
        yaxis_range=[0, 1],
        height=450,
        hovermode="x unified",
    )
    return fig


def bench_figure(report: pd.DataFrame, title: str = "Streaming throughput") -> go.Figure:
    """report: columns path, steps_per_s, rows_per_step."""
    fig = go.Figure()
    fig.add_trace(go.Bar(
        x=report["path"], y=report["steps_per_s"],
        text=[f"{r} rows/step" for r in report["rows_per_step"]],
        marker_color=["#66bb6a", "#ef5350"][:len(report)],
        opacity=0.85,
    ))
    fig.update_layout(title=title, xaxis_title="Path", yaxis_title="Steps / second", height=400)
    return fig


def sweep_figure(table: pd.DataFrame, key: str, metrics: Sequence[str]) -> go.Figure:
    """table: one row per swept value with a column per metric."""
    fig = go.Figure()
    for metric in metrics:
        fig.add_trace(go.Scatter(x=table["value"], y=table[metric], mode="lines+markers", name=metric))
    fig.update_layout(
        title=f"Sensitivity to {key}",
        xaxis_title=key,
        yaxis_title="Recall (%)",
        height=450,
        hovermode="x unified",
    )
    return fig


def write_figure(fig: go.Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    log.info(f"Figure → {path}")
    return path
