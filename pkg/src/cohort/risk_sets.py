"""
Risk sets under delayed entry.

Two interval conventions are in use:
  closed     E <= t <= Y   (Kaplan-Meier)
  left-open  E <  t <= Y   (Cox; a subject entering exactly at t is not at risk at t)
"""

from typing import Optional, Sequence

import numpy as np

from src.cohort.models import Cohort


def risk_set_at(cohort: Cohort, t: float) -> np.ndarray:
    """Indices {i : E_i <= t <= Y_i}"""
    if not t > 0:
        raise ValueError(f"risk set time must be positive, got {t}")
    return np.flatnonzero((cohort.entry <= t) & (t <= cohort.time))


def distinct_event_times(cohort: Cohort) -> np.ndarray:
    return np.unique(cohort.time[cohort.event])


def at_risk_mass(
    cohort: Cohort,
    times: Sequence[float],
    weights: Optional[np.ndarray] = None,
    closed: bool = True,
) -> np.ndarray:
    """
    Weighted risk-set size at each time.

    Uses sorted cumulative sums: mass(t) = W(entered by t) - W(exited before t).
    Records with Y < E can never be at risk and are left out.
    """
    times = np.asarray(times, dtype=float)
    w = cohort.weight if weights is None else np.asarray(weights, dtype=float)
    keep = cohort.entry <= cohort.time
    entry, exit_, w = cohort.entry[keep], cohort.time[keep], w[keep]

    entry_order = np.argsort(entry, kind="stable")
    exit_order = np.argsort(exit_, kind="stable")
    entry_cum = np.concatenate([[0.0], np.cumsum(w[entry_order])])
    exit_cum = np.concatenate([[0.0], np.cumsum(w[exit_order])])

    entered = entry_cum[np.searchsorted(entry[entry_order], times, side="right" if closed else "left")]
    exited = exit_cum[np.searchsorted(exit_[exit_order], times, side="left")]
    return entered - exited
