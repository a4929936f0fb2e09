"""
Covariate balance diagnostics (absolute standardized mean differences).

    SMD = |mean_ref - mean_trunc(w)| / sqrt((s2_ref + s2_trunc) / 2)

The pooled SD always comes from the unweighted samples, so the weighted and
unweighted SMDs share a denominator.
"""

import logging
import math
from typing import Annotated, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, BeforeValidator, PlainSerializer

from src.utils.errors import ArityMismatch, EmptyCohort, InconsistentArity, NonFiniteValue

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.1
CONSTANT_RTOL = 1e-9
CONSTANT_ATOL = 1e-12

# JSON has no infinity: an undefined SMD is written as null
Smd = Annotated[
    float,
    BeforeValidator(lambda v: math.inf if v is None else v),
    PlainSerializer(lambda v: v if math.isfinite(v) else None, return_type=Optional[float]),
]


class CovariateBalance(BaseModel):
    covariate: str
    unweighted_smd: Smd
    weighted_smd: Smd
    flagged: bool


class BalanceReport(BaseModel):
    threshold: float = DEFAULT_THRESHOLD
    covariates: List[CovariateBalance]

    @property
    def balanced(self) -> bool:
        return not any(c.flagged for c in self.covariates)

    @property
    def flagged(self) -> List[str]:
        return [c.covariate for c in self.covariates if c.flagged]

    def smd(self, covariate: str, weighted: bool = True) -> float:
        for c in self.covariates:
            if c.covariate == covariate:
                return c.weighted_smd if weighted else c.unweighted_smd
        raise KeyError(covariate)


def _variance(column: np.ndarray) -> float:
    return float(np.var(column, ddof=1)) if column.size > 1 else 0.0


def _smd(diff: float, pooled_sd: float) -> float:
    if pooled_sd > 0:
        return abs(diff) / pooled_sd
    return 0.0 if diff == 0 else math.inf


def _constant_smd(t: np.ndarray, r: np.ndarray) -> float:
    """SMD of a column constant in both samples: 0 when the constants agree"""
    same = math.isclose(float(t[0]), float(r[0]), rel_tol=CONSTANT_RTOL, abs_tol=CONSTANT_ATOL)
    return 0.0 if same else math.inf


def balance_report(
    truncated_Z: np.ndarray,
    reference_Z: np.ndarray,
    weights: Optional[Sequence[float]] = None,
    threshold: float = DEFAULT_THRESHOLD,
    names: Optional[Sequence[str]] = None,
) -> BalanceReport:
    """Unweighted and weighted SMD of each confounder, truncated vs reference"""
    T = np.asarray(truncated_Z, dtype=float)
    R = np.asarray(reference_Z, dtype=float)
    T = T.reshape(T.shape[0], -1)
    R = R.reshape(R.shape[0], -1)
    if T.shape[1] != R.shape[1]:
        raise ArityMismatch(f"truncated sample has {T.shape[1]} covariates, reference has {R.shape[1]}")
    if T.shape[0] == 0 or R.shape[0] == 0:
        raise EmptyCohort("balance needs rows in both samples")

    w = np.ones(T.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (T.shape[0],):
        raise InconsistentArity(f"{w.size} weights for {T.shape[0]} truncated rows")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise NonFiniteValue("balance weights must be positive and finite")

    names = list(names) if names is not None else [f"z{j + 1}" for j in range(T.shape[1])]
    if len(names) != T.shape[1]:
        raise InconsistentArity(f"{len(names)} covariate names for {T.shape[1]} columns")
    rows = []
    for j, name in enumerate(names):
        t, r = T[:, j], R[:, j]
        # np.var of a constant like 0.1 is rounding noise, not zero
        constant = np.ptp(t) == 0 and np.ptp(r) == 0
        if constant:
            unweighted = weighted = _constant_smd(t, r)
        else:
            pooled_sd = math.sqrt((_variance(t) + _variance(r)) / 2.0)
            unweighted = _smd(r.mean() - t.mean(), pooled_sd)
            weighted = _smd(r.mean() - np.average(t, weights=w), pooled_sd)
        if constant and math.isinf(weighted):
            logger.warning(f"Covariate '{name}' is constant in both samples but the means differ")
        rows.append(
            CovariateBalance(
                covariate=name,
                unweighted_smd=unweighted,
                weighted_smd=weighted,
                flagged=bool(weighted > threshold),
            )
        )
    return BalanceReport(threshold=threshold, covariates=rows)
