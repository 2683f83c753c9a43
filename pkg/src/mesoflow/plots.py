"""Figure rendering for evaluation reports.

Everything here writes PNG files; there is no interactive display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricsRecord, SeriesReconstruction, SweepResult

_AXIS_LABEL = {"t": "interpolation time t", "gap": "input gap (minutes)"}


def _finite(values):
    return [v if np.isfinite(v) else np.nan for v in values]


def save_sweep_plot(sweeps: dict[str, SweepResult], path, title: str | None = None) -> Path:
    """PSNR curves for one or more models over a shared sweep axis."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    axis = None
    for name, sweep in sweeps.items():
        axis = sweep.axis
        xs = [v for v, _ in sweep.points]
        ys = _finite([rec.psnr_db for _, rec in sweep.points])
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(_AXIS_LABEL.get(axis, axis or ""))
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_comparison_plot(records: list[MetricsRecord], path, title: str | None = None) -> Path:
    """Grouped PSNR bars per band and model."""
    path = Path(path)
    bands = sorted({r.band_id for r in records})
    models = sorted({r.model_name for r in records})
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(bands) * 1.2), 4))
    for mi, model in enumerate(models):
        xs, ys = [], []
        for bi, band in enumerate(bands):
            rec = next((r for r in records if r.model_name == model and r.band_id == band), None)
            if rec is not None:
                xs.append(bi + mi * width)
                ys.append(rec.psnr_db if np.isfinite(rec.psnr_db) else np.nan)
        ax.bar(xs, ys, width=width, label=model)
    ax.set_xticks([b + 0.4 - width / 2 for b in range(len(bands))])
    ax.set_xticklabels([str(b) for b in bands])
    ax.set_xlabel("band")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_series_plot(
    series: dict[str, SeriesReconstruction], path, title: str | None = None
) -> Path:
    """Observed vs reconstructed point time-series overlay."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    first = next(iter(series.values()))
    t0 = first.timestamps[0]
    minutes = [(t - t0) / 60.0 for t in first.timestamps]
    ax.plot(minutes, first.observed, color="black", lw=1.5, label="observed")
    for name, s in series.items():
        ax.plot(minutes, s.reconstructed, "--", lw=1.2, label=f"{name} (rmse {s.rmse:.3g})")
    ax.set_xlabel("minutes")
    ax.set_ylabel("value")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
