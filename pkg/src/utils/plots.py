"""
Deterministic SVG figures (matplotlib, Agg backend).

A fixed svg.hashsalt and no Date metadata make reruns byte-stable.
"""

import io
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.estimators.bootstrap import ConfidenceBand  # noqa: E402
from src.estimators.kaplan_meier import KMCurve  # noqa: E402
from src.utils.io import write_atomic  # noqa: E402
from src.weighting.balance import BalanceReport  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "truncsurv"


def _save_svg(fig, path: Union[str, Path]) -> Path:
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    written = write_atomic(path, buffer.getvalue())
    logger.info(f"Wrote plot {written}")
    return written


def _step_points(curve: KMCurve) -> Tuple[np.ndarray, np.ndarray]:
    times = np.concatenate([[0.0], curve.event_times])
    survival = np.concatenate([[1.0], curve.survival])
    return times, survival


def plot_survival_curves(
    curves: Dict[str, KMCurve],
    path: Union[str, Path],
    bands: Optional[Dict[str, ConfidenceBand]] = None,
    title: str = "Kaplan-Meier survival",
) -> Path:
    """Step functions, one per label, with optional bootstrap bands"""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, curve in curves.items():
        times, survival = _step_points(curve)
        line = ax.step(times, survival, where="post", label=label)[0]
        band = (bands or {}).get(label)
        if band is not None:
            ax.fill_between(band.times, band.lower, band.upper, step="post", alpha=0.2, color=line.get_color())
    ax.set_xlabel("Time")
    ax.set_ylabel("Survival probability")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="upper right")
    return _save_svg(fig, path)


def plot_balance(report: BalanceReport, path: Union[str, Path]) -> Path:
    """Dot plot of absolute SMDs, unweighted vs weighted, with the threshold line"""
    names = [c.covariate for c in report.covariates]
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 1.2 + 0.5 * len(names)))
    ax.scatter([c.unweighted_smd for c in report.covariates], y, marker="o", label="unweighted")
    ax.scatter([c.weighted_smd for c in report.covariates], y, marker="s", label="weighted")
    ax.axvline(report.threshold, linestyle="--", color="grey")
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.set_xlabel("Absolute standardized mean difference")
    ax.legend(loc="lower right")
    return _save_svg(fig, path)


def plot_bias_by_truncation(
    series: Dict[str, Sequence[Tuple[float, float]]],
    path: Union[str, Path],
    ylabel: str = "Relative bias",
    reference: Optional[float] = 0.0,
) -> Path:
    """One line per estimator: (truncation probability, value) pairs"""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, points in series.items():
        if not points:
            continue
        x, v = zip(*sorted(points))
        ax.plot(x, v, marker="o", label=label)
    if reference is not None:
        ax.axhline(reference, linestyle="--", color="grey")
    ax.set_xlabel("P(Y > E | trt = 0)")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    return _save_svg(fig, path)
