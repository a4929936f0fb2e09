"""
Weighted, risk-set adjusted Kaplan-Meier estimation.

At each distinct event time x_j the conditional failure probability is

    F(x_j) = sum_i I(E_i <= x_j, Y_i = x_j) d_i w_i / sum_i I(E_i <= x_j <= Y_i) w_i

and survival follows the product form S(x_k) = prod_{j<=k} (1 - F(x_j)).
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.cohort.models import Array, Cohort
from src.cohort.risk_sets import at_risk_mass
from src.utils.errors import InconsistentArity, NonFiniteValue, ZeroRiskMass

logger = logging.getLogger(__name__)


class KMCurve(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    event_times: Array
    failure_probs: Array
    survival: Array
    at_risk_mass: Array
    n_events_mass: Array
    risk_set_adjusted: bool = True

    @property
    def is_empty(self) -> bool:
        return self.event_times.size == 0

    def survival_at(self, t: float) -> float:
        """Right-continuous step function, 1 before the first event"""
        k = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])

    def survival_on(self, times: Sequence[float]) -> np.ndarray:
        k = np.searchsorted(self.event_times, np.asarray(times, dtype=float), side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[k]

    def quantile(self, p: float) -> Optional[float]:
        """First event time where S <= 1 - p, None if the curve never gets there"""
        hit = np.flatnonzero(self.survival <= 1.0 - p)
        return float(self.event_times[hit[0]]) if hit.size else None


def fit_km(
    cohort: Cohort,
    risk_set_adjust: bool = True,
    weights: Optional[Sequence[float]] = None,
) -> KMCurve:
    """
    Fit the weighted Kaplan-Meier curve.

    With risk_set_adjust=False entry times are treated as 0 (the naive
    estimator that ignores delayed entry).
    """
    w = cohort.weight if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (cohort.n,):
        raise InconsistentArity(f"{w.size} weights for {cohort.n} records")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise NonFiniteValue("weights must be positive and finite")

    data = cohort if risk_set_adjust else cohort.without_entry()

    times, inverse = np.unique(data.time[data.event], return_inverse=True)
    if times.size == 0:
        empty = np.empty(0)
        return KMCurve(
            event_times=empty,
            failure_probs=empty,
            survival=empty,
            at_risk_mass=empty,
            n_events_mass=empty,
            risk_set_adjusted=risk_set_adjust,
        )

    events = data.event & (data.entry <= data.time)
    event_w = w[data.event] * events[data.event]
    numerator = np.bincount(inverse, weights=event_w, minlength=times.size)
    denominator = at_risk_mass(data, times, weights=w, closed=True)

    empty_risk = np.flatnonzero(denominator <= 0)
    if empty_risk.size:
        raise ZeroRiskMass(float(times[empty_risk[0]]))

    failure = np.clip(numerator / denominator, 0.0, 1.0)
    survival = np.cumprod(1.0 - failure)

    logger.debug(
        f"KM fit: {times.size} event times, adjusted={risk_set_adjust}, "
        f"final survival {survival[-1]:.4f}"
    )
    return KMCurve(
        event_times=times,
        failure_probs=failure,
        survival=survival,
        at_risk_mass=denominator,
        n_events_mass=numerator,
        risk_set_adjusted=risk_set_adjust,
    )


def median_survival(curve: KMCurve) -> Optional[float]:
    """Smallest event time with S <= 0.5"""
    return curve.quantile(0.5)


def summarize_curve(curve: KMCurve) -> dict:
    return {
        "event_times": curve.event_times.tolist(),
        "survival": curve.survival.tolist(),
    }
