"""
Classifier-based density-ratio weights for a left-truncated sample.

The truncated confounders (Z | Y > E) and a non-truncated reference sample
(Z) are stacked with J = 1 for reference rows and J = 0 for truncated rows.
A probabilistic classifier for P(J = 1 | z) then gives

    w(z) = P(J=1|z) / P(J=0|z) * n_truncated / n_reference

which estimates pi(z) / pi(z | y > e). Reference rows keep weight 1.
"""

import logging
from typing import Any, Callable, List, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.cohort.models import Array
from src.utils.errors import ArityMismatch, EmptyCohort, NonFiniteValue
from src.weighting.balance import DEFAULT_THRESHOLD, BalanceReport, balance_report
from src.weighting.logistic import fit_logistic

logger = logging.getLogger(__name__)


class ProbabilisticClassifier(Protocol):
    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """P(J = 1 | features) for each row"""
        ...


ClassifierFactory = Callable[[np.ndarray, np.ndarray], ProbabilisticClassifier]


class DensityRatioFit(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    model: Any
    weights: Array
    sample_adjustment: float
    balance: BalanceReport
    n_reference: int
    trim_quantile: Optional[float] = None

    def all_weights(self) -> np.ndarray:
        """Reference rows (weight 1) followed by the truncated rows"""
        return np.concatenate([np.ones(self.n_reference), self.weights])


def _as_matrix(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    return Z.reshape(-1, 1) if Z.ndim == 1 else Z


def estimate_weights(
    truncated_Z: np.ndarray,
    reference_Z: np.ndarray,
    classifier: ClassifierFactory = fit_logistic,
    trim_quantile: Optional[float] = None,
    threshold: float = DEFAULT_THRESHOLD,
    names: Optional[Sequence[str]] = None,
) -> DensityRatioFit:
    """
    Estimate density-ratio weights for the truncated rows.

    `classifier(features, labels)` must return an object with
    predict_proba; the default is main-effects logistic regression.
    With `trim_quantile` (e.g. 0.99) weights are capped at that quantile.
    """
    T = _as_matrix(truncated_Z)
    R = _as_matrix(reference_Z)
    if T.shape[0] == 0 or R.shape[0] == 0:
        raise EmptyCohort("density-ratio estimation needs both samples to be nonempty")
    if T.shape[1] != R.shape[1]:
        raise ArityMismatch(f"truncated sample has {T.shape[1]} covariates, reference has {R.shape[1]}")
    if trim_quantile is not None and not 0 < trim_quantile <= 1:
        raise ValueError("trim_quantile must lie in (0, 1]")

    features = np.vstack([R, T])
    labels = np.concatenate([np.ones(R.shape[0]), np.zeros(T.shape[0])])
    model = classifier(features, labels)

    p = np.asarray(model.predict_proba(T), dtype=float)
    sample_adjustment = T.shape[0] / R.shape[0]
    weights = p / (1.0 - p) * sample_adjustment
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise NonFiniteValue("classifier produced probabilities outside (0, 1)")

    if trim_quantile is not None:
        cap = float(np.quantile(weights, trim_quantile))
        n_capped = int(np.sum(weights > cap))
        weights = np.minimum(weights, cap)
        logger.info(f"Trimmed {n_capped} weights at the {trim_quantile:.0%} quantile ({cap:.4g})")

    names: List[str] = list(names) if names is not None else [f"z{j + 1}" for j in range(T.shape[1])]
    balance = balance_report(T, R, weights, threshold=threshold, names=names)
    if not balance.balanced:
        logger.warning(f"Weighted SMD above {threshold:g} for: {', '.join(balance.flagged)}")

    logger.info(
        f"Density-ratio weights: {T.shape[0]} truncated vs {R.shape[0]} reference rows, "
        f"range [{weights.min():.4g}, {weights.max():.4g}]"
    )
    return DensityRatioFit(
        model=model,
        weights=weights,
        sample_adjustment=sample_adjustment,
        balance=balance,
        n_reference=R.shape[0],
        trim_quantile=trim_quantile,
    )
