"""
Weighted nonparametric bootstrap for Kaplan-Meier statistics.

Default scheme ("weighted"): draw n records with replacement with selection
probability proportional to w_i, then evaluate the *unweighted* risk-set
adjusted statistic on each resample. The "uniform_keep_weights" scheme
draws uniformly and keeps each record's weight.

Resample b uses its own generator seeded from (seed, b), so results do not
depend on evaluation order.
"""

import logging
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.cohort.models import Array, Cohort
from src.estimators.kaplan_meier import KMCurve, fit_km, median_survival
from src.utils.errors import DegenerateResample, InconsistentArity, NonFiniteValue

logger = logging.getLogger(__name__)

MAX_DEGENERATE_FRACTION = 0.05


class BootstrapMode(str, Enum):
    WEIGHTED = "weighted"
    UNIFORM_KEEP_WEIGHTS = "uniform_keep_weights"


class Statistic(str, Enum):
    MEDIAN = "median"
    SURVIVAL_AT = "survival_at"
    SURVIVAL_CURVE = "survival_curve"


class BootstrapInterval(BaseModel):
    estimate: Optional[float]
    lower: float
    upper: float
    level: float
    n_resamples: int
    n_degenerate: int = 0
    seed: int

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def wrapping_estimate(self) -> "BootstrapInterval":
        """Copy widened, when needed, so that lower <= estimate <= upper"""
        if self.estimate is None:
            return self
        return self.model_copy(
            update={"lower": min(self.lower, self.estimate), "upper": max(self.upper, self.estimate)}
        )


class ConfidenceBand(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    level: float = Field(gt=0, lt=1)
    times: Array
    point: Array
    lower: Array
    upper: Array
    n_resamples: int
    seed: int
    n_degenerate: int = 0


def resample_indices(n: int, weights: np.ndarray, mode: BootstrapMode, rng: np.random.Generator) -> np.ndarray:
    if mode == BootstrapMode.WEIGHTED:
        return rng.choice(n, size=n, replace=True, p=weights / weights.sum())
    return rng.integers(0, n, size=n)


def _percentile_interval(values: np.ndarray, level: float) -> np.ndarray:
    alpha = (1.0 - level) / 2.0
    return np.percentile(values, [100 * alpha, 100 * (1 - alpha)], axis=0)


def km_bootstrap_ci(
    cohort: Cohort,
    weights: Optional[Sequence[float]] = None,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    statistic: Statistic = Statistic.MEDIAN,
    time: Optional[float] = None,
    times: Optional[Sequence[float]] = None,
    mode: BootstrapMode = BootstrapMode.WEIGHTED,
):
    """
    Percentile bootstrap interval (or band) for a KM statistic.

    statistic="median"          -> BootstrapInterval for the median
    statistic="survival_at"     -> BootstrapInterval for S(time)
    statistic="survival_curve"  -> ConfidenceBand over `times`

    Resamples without events (or, for the median, whose curve never reaches
    0.5) are skipped; more than 5% of them aborts with DegenerateResample.
    """
    statistic = Statistic(statistic)
    mode = BootstrapMode(mode)
    if n_resamples < 1:
        raise ValueError("n_resamples must be at least 1")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")

    w = cohort.weight if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (cohort.n,):
        raise InconsistentArity(f"{w.size} weights for {cohort.n} records")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise NonFiniteValue("bootstrap weights must be positive and finite")

    if statistic == Statistic.SURVIVAL_AT and time is None:
        raise ValueError("survival_at needs a time")
    if statistic == Statistic.SURVIVAL_CURVE and times is None:
        raise ValueError("survival_curve needs a time grid")

    evaluate = _statistic_fn(statistic, time, times)
    point = evaluate(fit_km(cohort, risk_set_adjust=True, weights=w))

    draws = []
    n_degenerate = 0
    for b in range(n_resamples):
        rng = np.random.default_rng([seed, b])
        idx = resample_indices(cohort.n, w, mode, rng)
        sample = cohort.subset(idx)
        if not sample.event.any():
            n_degenerate += 1
            continue
        resample_weights = np.ones(sample.n) if mode == BootstrapMode.WEIGHTED else w[idx]
        value = evaluate(fit_km(sample, risk_set_adjust=True, weights=resample_weights))
        if value is None:
            n_degenerate += 1
            continue
        draws.append(value)

    if n_degenerate:
        logger.warning(f"Bootstrap: {n_degenerate}/{n_resamples} degenerate resamples skipped")
    if n_degenerate > MAX_DEGENERATE_FRACTION * n_resamples or not draws:
        raise DegenerateResample(
            f"{n_degenerate} of {n_resamples} resamples were degenerate "
            f"(limit {MAX_DEGENERATE_FRACTION:.0%})"
        )

    lower, upper = _percentile_interval(np.asarray(draws, dtype=float), level)

    if statistic == Statistic.SURVIVAL_CURVE:
        point = np.asarray(point)
        return ConfidenceBand(
            level=level,
            times=np.asarray(times, dtype=float),
            point=point,
            lower=np.minimum(lower, point),
            upper=np.maximum(upper, point),
            n_resamples=n_resamples,
            seed=seed,
            n_degenerate=n_degenerate,
        )

    return BootstrapInterval(
        estimate=point,
        lower=float(lower),
        upper=float(upper),
        level=level,
        n_resamples=n_resamples,
        n_degenerate=n_degenerate,
        seed=seed,
    )


def _statistic_fn(
    statistic: Statistic, time: Optional[float], times: Optional[Sequence[float]]
) -> Callable[[KMCurve], object]:
    if statistic == Statistic.MEDIAN:
        return median_survival
    if statistic == Statistic.SURVIVAL_AT:
        return lambda curve: curve.survival_at(time)
    grid = np.asarray(times, dtype=float)
    return lambda curve: curve.survival_on(grid)
