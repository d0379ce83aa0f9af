"""CSV tables and SVG figures: measured-vs-model overlays, residual stem
plots with their confidence band, and closed-loop comparisons.

Figures are written with a fixed hash salt and no date so repeated runs
produce identical files.
"""

from __future__ import annotations

import csv
import io
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._io import atomic_write_text  # noqa: E402
from .estimation import discard_count, EstimationConfig  # noqa: E402
from .metrics import nrmse_fit  # noqa: E402
from .validation import ResidualConfig, analyze  # noqa: E402

__all__ = [
    "overlay_csv",
    "plot_overlay",
    "plot_correlations",
    "write_model_report",
    "write_comparison_report",
]

log = logging.getLogger(__name__)
plt.rcParams["svg.hashsalt"] = "hwident"


def _save_svg(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def overlay_csv(t, columns: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(["time", *names])
    for k in range(len(t)):
        w.writerow([repr(float(t[k])), *(repr(float(columns[n][k])) for n in names)])
    return buf.getvalue()


def plot_overlay(path, t, measured, simulated, title, ylabel, labels=("measured", "model")):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, measured, lw=0.8, label=labels[0])
    ax.plot(t, simulated, lw=0.8, ls="--", label=labels[1])
    ax.set_xlabel("time (s)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    _save_svg(fig, path)


def plot_correlations(path, report, title):
    """Autocorrelation and one cross-correlation panel per input."""
    n = 1 + len(report.cross_correlation)
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.2 * n), squeeze=False)
    panels = [("r_ee", report.lags, report.autocorrelation)]
    panels += [(f"r_{k}e", report.cross_lags, v) for k, v in report.cross_correlation.items()]
    for ax, (name, lags, vals) in zip(axes[:, 0], panels):
        ax.axhspan(-report.bound, report.bound, color="tab:blue", alpha=0.2, lw=0)
        ax.stem(lags, vals, basefmt=" ")
        ax.set_ylabel(name)
    axes[0, 0].set_title(title)
    axes[-1, 0].set_xlabel("lag (samples)")
    fig.tight_layout()
    _save_svg(fig, path)


def _try_plot(errors, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except Exception as exc:  # plotting must never decide the run's outcome
        log.warning("plot %s failed: %s", args[0], exc)
        errors.append(f"{args[0]}: {exc}")


def write_model_report(model, datasets: dict, out_dir, residual_config: ResidualConfig | None = None):
    """Per output: overlay CSV + SVG per dataset, residual CSV + SVG on the last dataset.

    Returns (summary dict, plot errors).
    """
    os.makedirs(out_dir, exist_ok=True)
    residual_config = residual_config or ResidualConfig()
    summary, errors = {}, []
    last = list(datasets)[-1]
    for block in model.blocks:
        out = block.output_name
        entry = {}
        for name, data in datasets.items():
            yhat = block.simulate(data)
            y = data[out]
            skip = discard_count(block, EstimationConfig())
            entry[f"fit_{name}"] = nrmse_fit(y[skip:], yhat[skip:])
            t = data.time
            atomic_write_text(
                os.path.join(out_dir, f"{out}_{name}.csv"), overlay_csv(t, {"measured": y, "model": yhat})
            )
            _try_plot(
                errors, plot_overlay, os.path.join(out_dir, f"{out}_{name}.svg"), t, y, yhat,
                f"{out} on {name} data (fit {entry[f'fit_{name}']:.2f} %)", out,
            )
        rep = analyze(block, datasets[last], residual_config)
        rep.write_csv(os.path.join(out_dir, f"{out}_residuals.csv"))
        _try_plot(
            errors, plot_correlations, os.path.join(out_dir, f"{out}_residuals.svg"), rep,
            f"{out} residuals on {last} data",
        )
        entry["residuals"] = rep.summary()
        summary[out] = entry
    return summary, errors


def write_comparison_report(result, out_dir):
    """comparison.csv plus one overlay SVG per compared channel."""
    os.makedirs(out_dir, exist_ok=True)
    s = result.series
    atomic_write_text(
        os.path.join(out_dir, "comparison.csv"), overlay_csv(s.time, {n: s[n] for n in s.names})
    )
    errors = []
    for ch in ("u_d", "u_q", "f"):
        _try_plot(
            errors, plot_overlay, os.path.join(out_dir, f"comparison_{ch}.svg"), s.time,
            s[f"{ch}_reference"], s[f"{ch}_surrogate"], f"closed-loop {ch}", ch,
            labels=("black box", "surrogate"),
        )
    return errors
