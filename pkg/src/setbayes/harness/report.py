"""Metrics reports: CSV tables, a JSON summary and line-plot SVGs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EmptyInput, IoError
from .persist import FORMAT_VERSION

__all__ = ["RMSE_HEADER", "REGRESSION_HEADER", "Curve", "MetricsReport", "emit_report", "write_svg_plot"]

RMSE_HEADER = ("method", "ensemble_size", "seed", "rel_rmse", "windows")
REGRESSION_HEADER = ("method", "seed", "rmse", "nlpd", "points")


@dataclass
class Curve:
    label: str
    x: np.ndarray
    y: np.ndarray


@dataclass
class MetricsReport:
    """Everything a run reports.

    ``rows`` follow ``header``; ``plots`` maps a file stem to the curves
    drawn in it; ``summary`` holds aggregates, and each aggregate names the
    seeds and window counts it covers.
    """

    experiment: str
    header: tuple
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def column(self, name: str, **match) -> list:
        k = self.header.index(name)
        keep = [r for r in self.rows if all(r[self.header.index(c)] == v for c, v in match.items())]
        return [r[k] for r in keep]

    def mean(self, value: str, **match) -> float:
        vals = self.column(value, **match)
        if not vals:
            raise EmptyInput(f"no rows match {match}")
        return float(np.mean(vals))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_svg_plot(path, curves, title="", xlabel="", ylabel="", logy=False) -> Path:
    """Simple line plot; deterministic bytes for identical inputs."""
    if not curves:
        raise EmptyInput("nothing to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "setbayes", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for c in curves:
            if len(c.x) == 0:
                plt.close(fig)
                raise EmptyInput(f"curve {c.label!r} is empty")
            ax.plot(c.x, c.y, label=c.label, marker="o" if len(c.x) < 20 else None)
        if logy:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = Path(path)
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise IoError(f"cannot write plot {path}: {exc}") from exc
        finally:
            plt.close(fig)
    return path


def emit_report(report: MetricsReport, out_dir, table_name: str = "rmse.csv") -> list[Path]:
    """Write the CSV table, ``summary.json`` and every plot into ``out_dir``."""
    if not report.rows:
        raise EmptyInput("report has no rows")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        table = out / table_name
        table.write_text(csv_text(report.header, report.rows))
        written.append(table)
        summary = out / "summary.json"
        doc = {
            "experiment": report.experiment,
            "model_format_version": FORMAT_VERSION,
            "runtime_s": round(report.runtime_s, 3),
            **report.summary,
        }
        summary.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append(summary)
    except OSError as exc:
        raise IoError(f"cannot write report to {out}: {exc}") from exc
    for stem, spec in report.plots.items():
        written.append(write_svg_plot(out / f"{stem}.svg", **spec))
    return written
