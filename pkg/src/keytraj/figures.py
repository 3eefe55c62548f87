"""Figure rendering for the report-producing CLI paths.

Everything draws through the Agg backend straight to files; nothing here
opens a window.  Figures are companions to the machine-readable outputs
(CSV/JSON), never a replacement for them.
"""

from __future__ import annotations

from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsReport, StepErrorCurve  # noqa: E402


def render_curve_figure(curves: Mapping[str, StepErrorCurve], path: str) -> None:
    """Plot per-step error curves, one line per (head, k) pair."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for head, curve in sorted(curves.items()):
        for k in sorted(curve.errors):
            label = f"{head} top-{k}" if len(curves) > 1 else f"top-{k}"
            ax.plot(curve.steps, curve.errors[k], marker="o", markersize=3,
                    label=label)
    ax.set_xlabel("future step")
    ax.set_ylabel("mean L2 error (m)")
    ax.set_title("per-step prediction error")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics_figure(reports: Mapping[str, MetricsReport], path: str) -> None:
    """Grouped bar chart of the headline metrics for each evaluated head."""
    names = list(reports)
    metric_values: Dict[str, Sequence[float]] = {}
    for label, pick in (
        ("ade", lambda r: r.ade),
        ("fde", lambda r: r.fde),
        ("min_fde_1", lambda r: r.min_fde_1),
    ):
        metric_values[label] = [pick(reports[n]) for n in names]
    first = reports[names[0]]
    for k in sorted(first.min_ade):
        metric_values[f"min_ade_{k}"] = [reports[n].min_ade[k] for n in names]

    fig, ax = plt.subplots(figsize=(8, 4.5))
    labels = list(metric_values)
    width = 0.8 / max(len(names), 1)
    for j, name in enumerate(names):
        xs = [i + j * width for i in range(len(labels))]
        ax.bar(xs, [metric_values[m][j] for m in labels], width=width, label=name)
    ax.set_xticks([i + width * (len(names) - 1) / 2 for i in range(len(labels))])
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("meters (mr: fraction)")
    ax.set_title("evaluation metrics")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
