"""Figure rendering for harness CSVs, headless and stateless.

Figures are built on explicit ``matplotlib.figure.Figure`` objects (no
pyplot state), so tests can inspect the returned object and batch runs never
touch a display.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

KINDS = ("transition_sweep", "cmse_curve")

SWEEP_COLUMNS = ["grid_sigma_bar2", "mean_log_ratio", "boot_lo", "boot_hi"]
CMSE_COLUMNS = ["experiment", "grid_sigma_bar2", "m", "cmse_merge", "cmse_ens"]


class SchemaError(Exception):
    """The input CSV does not carry the columns the figure kind needs."""


@dataclass(frozen=True)
class FigureJob:
    """One figure to render: input CSV, figure kind, output image path."""

    input_csv: str
    kind: str
    output: str
    title: str | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {KINDS}")


def _require_columns(frame: pd.DataFrame, columns, path) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")


def _transition_markers(frame: pd.DataFrame) -> list[float]:
    """Distinct transition values to mark: the interval endpoints when
    present, otherwise the single point."""
    values: list[float] = []
    for col in ("tau1", "tau2"):
        if col in frame.columns:
            series = frame[col].dropna()
            if len(series):
                values.append(float(series.iloc[0]))
    if not values and "tau" in frame.columns:
        series = frame["tau"].dropna()
        if len(series):
            values.append(float(series.iloc[0]))
    out: list[float] = []
    for v in values:
        if not any(abs(v - u) <= 1e-12 * max(1.0, abs(v)) for u in out):
            out.append(v)
    return out


def _render_transition_sweep(frame: pd.DataFrame, job: FigureJob, fig: Figure) -> None:
    ax = fig.add_subplot(111)
    x = frame["grid_sigma_bar2"].to_numpy(float)
    y = frame["mean_log_ratio"].to_numpy(float)
    lo = frame["boot_lo"].to_numpy(float)
    hi = frame["boot_hi"].to_numpy(float)
    ax.axhline(0.0, color="gray", linewidth=1.0, label="_zero_reference")
    ax.errorbar(
        x, y, yerr=[y - lo, hi - y], fmt="o-", color="black", capsize=3,
        markersize=4, label="ensemble vs merged",
    )
    for value in _transition_markers(frame):
        ax.axvline(value, color="red", linestyle="--", linewidth=1.0)
    ax.set_xlabel(job.labels.get("x", "average heterogeneity (tr(G)/P)"))
    ax.set_ylabel(job.labels.get("y", "mean log MSPE ratio"))
    ax.set_title(job.title or "multi-study ensembling vs merging")


def _render_cmse_curve(frame: pd.DataFrame, job: FigureJob, fig: Figure) -> None:
    rows = frame[frame["experiment"] == "cmse_curve"]
    if rows.empty:
        raise SchemaError(f"{job.input_csv}: no cmse_curve rows present")
    ax = fig.add_subplot(111)
    for sigma, group in rows.groupby("grid_sigma_bar2", sort=True):
        m = group["m"].to_numpy(float)
        ax.plot(m, group["cmse_merge"].to_numpy(float), marker="o", markersize=3,
                label=f"merged, sigma_bar2={sigma:g}")
        ax.plot(m, group["cmse_ens"].to_numpy(float), marker="s", markersize=3,
                linestyle="--", label=f"ensemble, sigma_bar2={sigma:g}")
    ax.set_xlabel(job.labels.get("x", "boosting iteration"))
    ax.set_ylabel(job.labels.get("y", "conditional MSE"))
    ax.set_title(job.title or "path-conditional MSE, merged vs ensemble")
    ax.legend(fontsize=8)


def render(job: FigureJob) -> Figure:
    """Render the job's figure and write the image; returns the figure.

    Raises SchemaError for unknown kinds or missing columns, OSError for an
    unreadable input.
    """
    path = Path(job.input_csv)
    if not path.exists():
        raise OSError(f"input CSV {path} does not exist")
    frame = pd.read_csv(path)
    fig = Figure(figsize=(7.0, 4.5), dpi=120)
    FigureCanvasAgg(fig)
    if job.kind == "transition_sweep":
        _require_columns(frame, SWEEP_COLUMNS, path)
        _render_transition_sweep(frame, job, fig)
    else:
        _require_columns(frame, CMSE_COLUMNS, path)
        _render_cmse_curve(frame, job, fig)
    fig.tight_layout()
    out = Path(job.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    return fig
