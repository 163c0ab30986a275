from __future__ import annotations

from typing import Optional

import numpy as np
import pandas as pd
import plotly.graph_objects as go


def loss_curve(trace: pd.DataFrame, title: str = "Training loss") -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=trace["step"], y=trace["loss"], mode="lines", name="train"))
    if "dev_loss" in trace:
        dev = trace.dropna(subset=["dev_loss"])
        fig.add_trace(go.Scatter(x=dev["step"], y=dev["dev_loss"], mode="markers+lines", name="dev"))
    fig.update_layout(title=title, xaxis_title="step", yaxis_title="loss")
    return fig


def cer_grid(grid: pd.DataFrame, title: str = "CER by window, hop and scheme") -> go.Figure:
    """Heatmap of an ``EvalResult.grid()`` pivot (rows m, columns (n, scheme))."""
    columns = [f"n={n} {scheme}" for n, scheme in grid.columns]
    z = grid.to_numpy(dtype=float)
    fig = go.Figure(
        go.Heatmap(
            z=z,
            x=columns,
            y=[f"m={m}" for m in grid.index],
            colorscale="Viridis",
            text=np.where(np.isnan(z), "", np.vectorize(lambda v: f"{v:.3f}")(np.nan_to_num(z))),
            texttemplate="%{text}",
        )
    )
    fig.update_layout(title=title, xaxis_title="hop / scheme", yaxis_title="window")
    return fig


def dmel_spectrogram(frames: np.ndarray, hop: float = 0.025, title: Optional[str] = None) -> go.Figure:
    x = np.asarray(frames)
    fig = go.Figure(go.Heatmap(z=x.T, x=np.arange(x.shape[0]) * hop, colorscale="Magma", colorbar={"title": "bin"}))
    fig.update_layout(title=title or f"dMel, {x.shape[0]} frames", xaxis_title="s", yaxis_title="channel")
    return fig


def latency_bars(sweep: pd.DataFrame, title: str = "First-output latency") -> go.Figure:
    """Stacked per-stage latency for each (window, vocoder) row of ``latency_sweep``."""
    labels = [f"m={m} {v}" for m, v in zip(sweep["m"], sweep["vocoder"])]
    fig = go.Figure()
    for stage in ("tts", "handoff", "vocoder", "sink_handoff"):
        fig.add_bar(x=labels, y=sweep[f"{stage}_mean_ms"], name=stage, error_y={"array": sweep[f"{stage}_std_ms"]})
    fig.update_layout(title=title, barmode="stack", yaxis_title="ms")
    return fig
