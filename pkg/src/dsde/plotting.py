"""Figures written next to the JSON/Markdown reports.

Figures are drawn on bare ``Figure`` objects with the Agg canvas, so no
pyplot state or interactive backend is involved.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from dsde.evaluation import ExperimentReport
from dsde.synth import EstimatorReport, NullRateReport

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# no software/date stamps, so reruns give identical files
_PNG_META = {"Software": None}


def _new(figsize: tuple[float, float] = (4.0, 3.2)) -> Figure:
    fig = Figure(figsize=figsize, dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path: Path) -> Path:
    fig.savefig(path, metadata=_PNG_META)
    return path


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def plot_roc_curves(report: ExperimentReport, out_dir: str | os.PathLike) -> list[Path]:
    """One PNG per OoD dataset with the alpha-sweep ROC of every ensemble method."""
    out_dir = Path(out_dir)
    paths = []
    with matplotlib.rc_context(STYLE):
        for ds in report.datasets():
            curves = [(m, c) for (m, d), c in report.curves.items() if d == ds]
            if not curves:
                continue
            fig = _new()
            ax = fig.add_subplot(111)
            for method, curve in curves:
                f, t = zip(*curve.points)
                ax.plot(f, t, lw=1.2, label=f"{method} (AUC {curve.area:.3f})")
            ax.plot([0, 1], [0, 1], ls=":", lw=0.8, color="0.6")
            ax.set_xlabel("FPR (OoD kept as ID)")
            ax.set_ylabel("TPR (ID kept as ID)")
            ax.set_title(ds)
            ax.legend(loc="lower right", frameon=False)
            fig.tight_layout()
            paths.append(_save(fig, out_dir / f"roc_{_slug(ds)}.png"))
    return paths


def plot_estimator_rmse(reports: Sequence[EstimatorReport], path: str | os.PathLike) -> Path:
    """Grouped bars: RMSE of each estimator for each true pi0."""
    scenarios = list(dict.fromkeys(r.scenario["pi0"] for r in reports))
    names = list(dict.fromkeys(r.estimator for r in reports))
    lookup = {(r.scenario["pi0"], r.estimator): r.rmse for r in reports}
    width = 0.8 / max(1, len(names))
    with matplotlib.rc_context(STYLE):
        fig = _new((5.0, 3.2))
        ax = fig.add_subplot(111)
        for i, name in enumerate(names):
            xs = [k + (i - (len(names) - 1) / 2) * width for k in range(len(scenarios))]
            ax.bar(xs, [lookup[(s, name)] for s in scenarios], width=width, label=name)
        ax.set_xticks(range(len(scenarios)), [f"{s:g}" for s in scenarios])
        ax.set_xlabel("true pi0")
        ax.set_ylabel("RMSE")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_null_rates(reports: Sequence[NullRateReport], path: str | os.PathLike) -> Path:
    """Observed ID rate under the global null (4 stderr bars) vs the analytic value."""
    with matplotlib.rc_context(STYLE):
        fig = _new((4.5, 3.2))
        ax = fig.add_subplot(111)
        xs = range(len(reports))
        ax.errorbar(
            xs,
            [r.observed_id_rate for r in reports],
            yerr=[4 * r.mc_stderr for r in reports],
            fmt="o",
            ms=4,
            capsize=3,
            label="observed",
        )
        analytic = [(i, r.analytic_id_rate) for i, r in enumerate(reports) if r.analytic_id_rate is not None]
        if analytic:
            ax.scatter(*zip(*analytic), marker="x", color="C3", zorder=3, label="analytic")
        ax.set_xticks(list(xs), [r.method for r in reports], rotation=30)
        ax.set_ylabel("ID rate under global null")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))
