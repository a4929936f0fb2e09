"""
Data-generating process for the left-truncation simulation study.

Real-world (RW, trt = 0) arm and trial (reference, trt = 1) arm, confounders
Z1 ~ Bernoulli(1 - p_E) and Z2 ~ Normal(0, z2_sd):

    E = 0                                          if Z1 = 0
    E ~ Exponential(lambda_ebh * exp(beta_entry * Z2))   otherwise
    T, C ~ Exponential(lambda_bh * exp(beta_trt * trt + beta_z * (Z1 + Z2)))

Y = min(T, C), event = T <= C. Truncation keeps RW subjects with Y > E; the
trial arm always has E = 0. E and T are independent given (Z1, Z2).
"""

import logging
import math
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import optimize

from src.cohort.models import Array, Cohort
from src.utils.errors import BracketFailure, UnachievableTarget

logger = logging.getLogger(__name__)

COVARIATE_NAMES = ["Z1", "Z2"]
CALIBRATION_SEED = 20240917
CALIBRATION_TOLERANCE = 0.002
LOG_RATE_BRACKET = (-20.0, 20.0)
QUADRATURE_NODES = 80

Seed = Union[int, Sequence[int]]


class SimScenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    p_entry_at_baseline: float = Field(default=0.2, ge=0, lt=1)
    beta_entry: float = math.log(0.5)
    beta_trt: float = math.log(0.8)
    beta_z: float = math.log(2.0)
    lambda_bh: float = Field(default=1 / 12, gt=0)
    target_truncation: float = Field(default=0.5, gt=0, lt=1)
    n_rw_expected: int = Field(default=250, ge=1)
    n_trial: int = Field(default=250, ge=1)
    z2_sd: float = Field(default=0.5, gt=0)

    @property
    def key(self) -> str:
        """Stable identifier, ratio scale, used for file names"""
        return (
            f"trunc{self.target_truncation:g}"
            f"_entry{math.exp(self.beta_entry):.4g}"
            f"_z{math.exp(self.beta_z):.4g}"
        )

    @property
    def n_rw(self) -> int:
        """RW arm size before truncation"""
        return math.ceil(self.n_rw_expected / self.target_truncation)

    def event_rate(self, trt: np.ndarray, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return self.lambda_bh * np.exp(self.beta_trt * trt + self.beta_z * (z1 + z2))

    def entry_rate(self, lambda_ebh: float, z2: np.ndarray) -> np.ndarray:
        return lambda_ebh * np.exp(self.beta_entry * z2)


class GeneratedIteration(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    complete: Cohort
    truncated: Cohort
    # density ratio for the RW rows of `truncated`, in row order
    true_weights: Array
    lambda_ebh: float

    @property
    def n_rw_truncated(self) -> int:
        return int((~self.truncated.reference).sum())


def conditional_truncation_probability(
    scenario: SimScenario, lambda_ebh: float, z1: np.ndarray, z2: np.ndarray
) -> np.ndarray:
    """P(Y > E | z) in the RW arm: competing exponentials, Y ~ Exp(2 lambda_T)"""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    rate_e = scenario.entry_rate(lambda_ebh, z2)
    rate_y = 2.0 * scenario.event_rate(0.0, z1, z2)
    return np.where(z1 > 0, rate_e / (rate_e + rate_y), 1.0)


def truncation_probability(scenario: SimScenario, lambda_ebh: float) -> float:
    """Analytic P(Y > E | trt = 0), Gauss-Hermite over Z2"""
    nodes, weights = np.polynomial.hermite_e.hermegauss(QUADRATURE_NODES)
    weights = weights / math.sqrt(2.0 * math.pi)
    z2 = scenario.z2_sd * nodes
    p1 = float(np.sum(weights * conditional_truncation_probability(scenario, lambda_ebh, np.ones_like(z2), z2)))
    p_e = scenario.p_entry_at_baseline
    return p_e + (1.0 - p_e) * p1


def true_density_ratio(scenario: SimScenario, lambda_ebh: float, covariates: np.ndarray) -> np.ndarray:
    """pi(z) / pi(z | Y > E) = P(Y > E) / P(Y > E | z) for rows (Z1, Z2)"""
    Z = np.asarray(covariates, dtype=float).reshape(-1, 2)
    marginal = truncation_probability(scenario, lambda_ebh)
    return marginal / conditional_truncation_probability(scenario, lambda_ebh, Z[:, 0], Z[:, 1])


def calibrate_entry_rate(
    scenario: SimScenario,
    n_samples: int = 200_000,
    seed: int = CALIBRATION_SEED,
    tolerance: float = CALIBRATION_TOLERANCE,
) -> float:
    """
    Find lambda_ebh giving P(Y > E | trt = 0) = target.

    Bisection on log(lambda_ebh) over [-20, 20]; the probability is a Monte
    Carlo average over one fixed set of draws, so it is a monotone step
    function of lambda_ebh.
    """
    target = scenario.target_truncation
    p_e = scenario.p_entry_at_baseline
    if target <= p_e:
        raise UnachievableTarget(
            f"target truncation {target:g} is not above p_E = {p_e:g} "
            "(subjects entering at baseline are never truncated)"
        )

    rng = np.random.default_rng(seed)
    z1 = (rng.random(n_samples) < 1.0 - p_e).astype(float)
    z2 = rng.normal(0.0, scenario.z2_sd, n_samples)
    unit_entry = rng.exponential(size=n_samples) / np.exp(scenario.beta_entry * z2)
    rate = scenario.event_rate(0.0, z1, z2)
    observed = np.minimum(rng.exponential(size=n_samples), rng.exponential(size=n_samples)) / rate
    delayed = z1 > 0

    def untruncated_fraction(log_rate: float) -> float:
        entry = unit_entry / math.exp(log_rate)
        return float(np.mean(~delayed | (observed > entry)))

    lo, hi = LOG_RATE_BRACKET
    f_lo = untruncated_fraction(lo) - target
    f_hi = untruncated_fraction(hi) - target
    if f_lo * f_hi > 0:
        raise BracketFailure(
            f"no sign change over log-rate [{lo:g}, {hi:g}] "
            f"(P = {f_lo + target:.4f} .. {f_hi + target:.4f}, target {target:g})"
        )

    root = optimize.bisect(lambda x: untruncated_fraction(x) - target, lo, hi, xtol=1e-10, maxiter=200)
    achieved = untruncated_fraction(root)
    if abs(achieved - target) > tolerance:
        raise BracketFailure(f"calibration reached P = {achieved:.4f}, target {target:g} +/- {tolerance:g}")

    lambda_ebh = math.exp(root)
    logger.debug(f"Calibrated {scenario.key}: lambda_ebh={lambda_ebh:.6g} (P={achieved:.4f})")
    return lambda_ebh


def _draw_arm(scenario: SimScenario, lambda_ebh: float, n: int, trt: float, rng: np.random.Generator):
    z1 = (rng.random(n) < 1.0 - scenario.p_entry_at_baseline).astype(float)
    z2 = rng.normal(0.0, scenario.z2_sd, n)
    unit_entry = rng.exponential(size=n)
    unit_t = rng.exponential(size=n)
    unit_c = rng.exponential(size=n)

    rate = scenario.event_rate(trt, z1, z2)
    t, c = unit_t / rate, unit_c / rate
    if trt:
        entry = np.zeros(n)
    else:
        entry = np.where(z1 > 0, unit_entry / scenario.entry_rate(lambda_ebh, z2), 0.0)
    return entry, np.minimum(t, c), t <= c, np.column_stack([z1, z2])


def generate_iteration(scenario: SimScenario, lambda_ebh: float, seed: Seed) -> GeneratedIteration:
    """Draw one complete dataset and its truncated version (deterministic in seed)"""
    rng = np.random.default_rng(seed)
    n_rw = scenario.n_rw
    rw = _draw_arm(scenario, lambda_ebh, n_rw, 0.0, rng)
    trial = _draw_arm(scenario, lambda_ebh, scenario.n_trial, 1.0, rng)

    complete = Cohort.from_arrays(
        entry=np.concatenate([rw[0], trial[0]]),
        time=np.concatenate([rw[1], trial[1]]),
        event=np.concatenate([rw[2], trial[2]]),
        covariates=np.vstack([rw[3], trial[3]]),
        reference=np.concatenate([np.zeros(n_rw, dtype=bool), np.ones(scenario.n_trial, dtype=bool)]),
        covariate_names=COVARIATE_NAMES,
        require_truncation_consistency=False,
    )
    keep = complete.reference | (complete.time > complete.entry)
    truncated = complete.subset(keep)

    rw_rows = ~truncated.reference
    true_weights = true_density_ratio(scenario, lambda_ebh, truncated.covariates[rw_rows])
    return GeneratedIteration(
        complete=complete,
        truncated=truncated,
        true_weights=true_weights,
        lambda_ebh=lambda_ebh,
    )


def rw_arm(cohort: Cohort, weights: Optional[np.ndarray] = None) -> Cohort:
    """The RW (non-reference) rows, optionally carrying weights"""
    arm = cohort.subset(~cohort.reference)
    return arm if weights is None else arm.with_weights(weights)
