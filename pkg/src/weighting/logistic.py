"""
Main-effects logistic regression fitted by Newton-Raphson (IRLS).
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from src.cohort.models import Array
from src.utils.errors import (
    InconsistentArity,
    NonConvergence,
    NonFiniteValue,
    RankDeficientDesign,
    SeparationDetected,
    SingleClass,
)

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
MAX_HALVINGS = 10
SEPARATION_LIMIT = 20.0
GRADIENT_TOLERANCE = 1e-8
PROBABILITY_FLOOR = 1e-15


class LogisticModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    # intercept first
    coefficients: Array
    converged: bool
    n_iterations: int
    log_likelihood: float
    feature_names: Optional[List[str]] = None

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """P(label = 1 | features), kept strictly inside (0, 1)"""
        X = _as_matrix(features)
        if X.shape[1] != self.coefficients.size - 1:
            raise InconsistentArity(
                f"model has {self.coefficients.size - 1} features, got {X.shape[1]}"
            )
        p = expit(self.coefficients[0] + X @ self.coefficients[1:])
        return np.clip(p, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)


def _as_matrix(features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def logistic_log_likelihood(beta: Sequence[float], features: np.ndarray, labels: Sequence[float]) -> float:
    """Bernoulli log-likelihood; beta includes the intercept"""
    A = _with_intercept(_as_matrix(features))
    y = np.asarray(labels, dtype=float)
    eta = A @ np.asarray(beta, dtype=float)
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_gradient(beta: Sequence[float], features: np.ndarray, labels: Sequence[float]) -> np.ndarray:
    A = _with_intercept(_as_matrix(features))
    y = np.asarray(labels, dtype=float)
    return A.T @ (y - expit(A @ np.asarray(beta, dtype=float)))


def _terms(beta: np.ndarray, A: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    eta = A @ beta
    mu = expit(eta)
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    grad = A.T @ (y - mu)
    info = A.T @ ((mu * (1.0 - mu))[:, None] * A)
    return ll, grad, info


def fit_logistic(
    features: np.ndarray,
    labels: Sequence[float],
    feature_names: Optional[Sequence[str]] = None,
    tol: float = GRADIENT_TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> LogisticModel:
    """
    Maximise the Bernoulli log-likelihood with an intercept.

    Newton steps are halved while the likelihood decreases; the fit
    converges when max|score| / n < tol.
    """
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise InconsistentArity(f"{X.shape[0]} feature rows for {y.size} labels")
    if not np.all(np.isfinite(X)):
        raise NonFiniteValue("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise SingleClass(f"all {y.size} labels are {int(y[0])}")

    A = _with_intercept(X)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise RankDeficientDesign("classifier design (with intercept) is not of full column rank")

    n = y.size
    beta = np.zeros(A.shape[1])
    ll, grad, info = _terms(beta, A, y)
    converged = bool(np.max(np.abs(grad)) / n < tol)
    iteration = 0

    while not converged and iteration < max_iter:
        iteration += 1
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise SeparationDetected("singular Fisher information; classes look separable") from None

        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            candidate = beta + step * delta
            c_ll, c_grad, c_info = _terms(candidate, A, y)
            if c_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step /= 2.0
        else:
            break

        beta, ll, grad, info = candidate, c_ll, c_grad, c_info
        if np.any(np.abs(beta) > SEPARATION_LIMIT):
            raise SeparationDetected(
                f"|coefficient| exceeded {SEPARATION_LIMIT:g}; the two samples are (quasi-)separated"
            )
        converged = bool(np.max(np.abs(grad)) / n < tol)

    if not converged:
        raise NonConvergence(f"logistic fit did not converge in {iteration} iterations")

    logger.debug(f"Logistic fit converged in {iteration} iterations (ll={ll:.4f})")
    return LogisticModel(
        coefficients=beta,
        converged=True,
        n_iterations=iteration,
        log_likelihood=ll,
        feature_names=list(feature_names) if feature_names is not None else None,
    )
