"""
Per-iteration estimation and aggregation for the simulation study.

Three estimands, each with per-iteration ground truth taken from the
complete (untruncated) data:

  conditional_hr   Cox(trt, Z1, Z2)   naive | adjusted
  marginal_hr      Cox(trt)           naive | adjusted | weighted
  rw_median        KM on the RW arm   naive | adjusted | weighted

"naive" ignores delayed entry, "adjusted" uses risk-set adjustment and
"weighted" adds density-ratio weights (RW confounders towards the trial arm).

Relative bias is always measured against the per-iteration truth. Coverage
is measured, by default, against a reference truth fitted once per scenario
on a large independent complete-data sample: the per-iteration truth shares
its draw with the estimate, so intervals judged against it over-cover.
"""

import logging
import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from src.cohort.models import ARM_COLUMN, Cohort
from src.estimators.bootstrap import km_bootstrap_ci
from src.estimators.cox import Ties, fit_cox, hazard_ratio_summary
from src.estimators.kaplan_meier import fit_km, median_survival
from src.simulation.generator import COVARIATE_NAMES, SimScenario, calibrate_entry_rate, generate_iteration, rw_arm
from src.utils.errors import AllFailed, DataError, EstimationError, UnachievableTarget
from src.weighting.density_ratio import estimate_weights

logger = logging.getLogger(__name__)

REFERENCE_SAMPLE_FACTOR = 100
REFERENCE_TRUTH_STREAM = 2**31 - 1


class Estimand(str, Enum):
    CONDITIONAL_HR = "conditional_hr"
    MARGINAL_HR = "marginal_hr"
    RW_MEDIAN = "rw_median"


class CoverageTruth(str, Enum):
    REFERENCE = "reference"
    PER_ITERATION = "per_iteration"


class Estimator(str, Enum):
    NAIVE = "naive"
    ADJUSTED = "adjusted"
    WEIGHTED = "weighted"


ESTIMATORS: Dict[Estimand, Tuple[Estimator, ...]] = {
    Estimand.CONDITIONAL_HR: (Estimator.NAIVE, Estimator.ADJUSTED),
    Estimand.MARGINAL_HR: (Estimator.NAIVE, Estimator.ADJUSTED, Estimator.WEIGHTED),
    Estimand.RW_MEDIAN: (Estimator.NAIVE, Estimator.ADJUSTED, Estimator.WEIGHTED),
}


class MedianNotReached(EstimationError):
    """Survival curve never drops to 0.5"""


class EstimatorOutcome(BaseModel):
    estimand: Estimand
    estimator: Estimator
    estimate: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    failure: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


class IterationResult(BaseModel):
    scenario_key: str
    iteration: int
    lambda_ebh: float
    # None marks a failed ground-truth fit
    truths: Dict[Estimand, Optional[float]]
    outcomes: List[EstimatorOutcome]
    # empty under CoverageTruth.PER_ITERATION
    coverage_truths: Dict[Estimand, Optional[float]] = {}

    def outcome(self, estimand: Estimand, estimator: Estimator) -> EstimatorOutcome:
        for o in self.outcomes:
            if o.estimand == estimand and o.estimator == estimator:
                return o
        raise KeyError((estimand, estimator))


class EstimatorSummary(BaseModel):
    estimand: Estimand
    estimator: Estimator
    n_iterations: int
    n_failures: int
    relative_bias: Optional[float] = None
    log_bias: Optional[float] = None
    mc_se: Optional[float] = None
    coverage: Optional[float] = None
    n_with_ci: int = 0
    status: Literal["ok", "all_failed"] = "ok"


class SimSummary(BaseModel):
    scenario_key: str
    scenario: SimScenario
    status: Literal["ok", "unachievable"] = "ok"
    lambda_ebh: Optional[float] = None
    n_iterations: int = 0
    coverage_truths: Dict[Estimand, Optional[float]] = {}
    rows: List[EstimatorSummary] = []

    def row(self, estimand: Estimand, estimator: Estimator) -> EstimatorSummary:
        for r in self.rows:
            if r.estimand == estimand and r.estimator == estimator:
                return r
        raise KeyError((estimand, estimator))


# --- one iteration -----------------------------------------------------------

def _cox_outcome(estimand, estimator, cohort: Cohort, covariates, ties, weights=None) -> EstimatorOutcome:
    fit = fit_cox(cohort, covariates, weights=weights, ties=ties, risk_set_adjust=estimator != Estimator.NAIVE)
    trt = hazard_ratio_summary(fit, robust=True)[0]
    return EstimatorOutcome(
        estimand=estimand,
        estimator=estimator,
        estimate=trt.hazard_ratio,
        ci_lower=trt.ci_lower,
        ci_upper=trt.ci_upper,
    )


def _median(cohort: Cohort, risk_set_adjust: bool, weights=None) -> float:
    median = median_survival(fit_km(cohort, risk_set_adjust=risk_set_adjust, weights=weights))
    if median is None:
        raise MedianNotReached("Kaplan-Meier curve stays above 0.5")
    return median


def _attempt(estimand: Estimand, estimator: Estimator, compute) -> EstimatorOutcome:
    try:
        return compute()
    except (EstimationError, DataError) as e:
        logger.warning(f"{estimand.value}/{estimator.value} failed: {type(e).__name__}: {e}")
        return EstimatorOutcome(estimand=estimand, estimator=estimator, failure=type(e).__name__)


def _truth(compute) -> Optional[float]:
    try:
        return compute()
    except (EstimationError, DataError) as e:
        logger.warning(f"ground truth failed: {type(e).__name__}: {e}")
        return None


def _bootstrap_seed(seed: Sequence[int]) -> int:
    return int(np.random.SeedSequence(list(seed)).generate_state(1)[0])


def complete_data_truths(complete: Cohort, ties: Ties = Ties.BRESLOW) -> Dict[Estimand, Optional[float]]:
    """Every estimand fitted on untruncated data; None where the fit fails"""
    conditional = [ARM_COLUMN, *COVARIATE_NAMES]
    return {
        Estimand.CONDITIONAL_HR: _truth(
            lambda: float(np.exp(fit_cox(complete, conditional, ties=ties, risk_set_adjust=False).coefficients[0]))
        ),
        Estimand.MARGINAL_HR: _truth(
            lambda: float(np.exp(fit_cox(complete, [ARM_COLUMN], ties=ties, risk_set_adjust=False).coefficients[0]))
        ),
        Estimand.RW_MEDIAN: _truth(lambda: _median(rw_arm(complete), risk_set_adjust=False)),
    }


def reference_truth_seed(master_seed: int, scenario_index: int) -> List[int]:
    # outside the iteration range, so never shared with an iteration's draw
    return [master_seed, scenario_index, REFERENCE_TRUTH_STREAM]


def reference_truths(
    scenario: SimScenario,
    lambda_ebh: float,
    seed: Sequence[int],
    sample_factor: int = REFERENCE_SAMPLE_FACTOR,
    ties: Ties = Ties.BRESLOW,
) -> Dict[Estimand, Optional[float]]:
    """Truths from one complete-data draw `sample_factor` times the scenario's size"""
    large = scenario.model_copy(update={
        "n_rw_expected": scenario.n_rw_expected * sample_factor,
        "n_trial": scenario.n_trial * sample_factor,
    })
    complete = generate_iteration(large, lambda_ebh, seed).complete
    truths = complete_data_truths(complete, ties)
    logger.info(
        f"Reference truths for {scenario.key} (n={complete.n}): "
        + ", ".join(f"{e.value}={v:.4g}" for e, v in truths.items() if v is not None)
    )
    return truths


def run_iteration(
    scenario: SimScenario,
    lambda_ebh: float,
    seed: Sequence[int],
    bootstrap_resamples: int = 200,
    ties: Ties = Ties.BRESLOW,
    iteration: int = 0,
    coverage_truths: Optional[Dict[Estimand, Optional[float]]] = None,
) -> IterationResult:
    data = generate_iteration(scenario, lambda_ebh, seed)
    complete, truncated = data.complete, data.truncated
    conditional = [ARM_COLUMN, *COVARIATE_NAMES]
    marginal = [ARM_COLUMN]

    truths = complete_data_truths(complete, ties)

    outcomes: List[EstimatorOutcome] = []
    for estimator in ESTIMATORS[Estimand.CONDITIONAL_HR]:
        outcomes.append(_attempt(
            Estimand.CONDITIONAL_HR, estimator,
            lambda: _cox_outcome(Estimand.CONDITIONAL_HR, estimator, truncated, conditional, ties),
        ))
    for estimator in (Estimator.NAIVE, Estimator.ADJUSTED):
        outcomes.append(_attempt(
            Estimand.MARGINAL_HR, estimator,
            lambda: _cox_outcome(Estimand.MARGINAL_HR, estimator, truncated, marginal, ties),
        ))

    rw = rw_arm(truncated)
    for estimator, adjust in ((Estimator.NAIVE, False), (Estimator.ADJUSTED, True)):
        outcomes.append(_attempt(
            Estimand.RW_MEDIAN, estimator,
            lambda: EstimatorOutcome(
                estimand=Estimand.RW_MEDIAN, estimator=estimator, estimate=_median(rw, adjust)
            ),
        ))

    # RW rows are reweighted towards the trial arm's confounder distribution
    try:
        density = estimate_weights(
            truncated.covariates[~truncated.reference],
            truncated.covariates[truncated.reference],
            names=COVARIATE_NAMES,
        )
    except (EstimationError, DataError) as e:
        logger.warning(f"weight estimation failed: {type(e).__name__}: {e}")
        for estimand in (Estimand.MARGINAL_HR, Estimand.RW_MEDIAN):
            outcomes.append(EstimatorOutcome(estimand=estimand, estimator=Estimator.WEIGHTED, failure=type(e).__name__))
    else:
        weights = np.ones(truncated.n)
        weights[~truncated.reference] = density.weights
        outcomes.append(_attempt(
            Estimand.MARGINAL_HR, Estimator.WEIGHTED,
            lambda: _cox_outcome(Estimand.MARGINAL_HR, Estimator.WEIGHTED, truncated, marginal, ties, weights),
        ))

        def weighted_median() -> EstimatorOutcome:
            estimate = _median(rw, True, density.weights)
            ci = km_bootstrap_ci(
                rw, weights=density.weights, n_resamples=bootstrap_resamples, seed=_bootstrap_seed(seed),
            ).wrapping_estimate()
            return EstimatorOutcome(
                estimand=Estimand.RW_MEDIAN, estimator=Estimator.WEIGHTED,
                estimate=estimate, ci_lower=ci.lower, ci_upper=ci.upper,
            )

        outcomes.append(_attempt(Estimand.RW_MEDIAN, Estimator.WEIGHTED, weighted_median))

    return IterationResult(
        scenario_key=scenario.key,
        iteration=iteration,
        lambda_ebh=lambda_ebh,
        truths=truths,
        outcomes=outcomes,
        coverage_truths=coverage_truths or {},
    )


# --- aggregation -------------------------------------------------------------

def _summarize_estimator(results: Sequence[IterationResult], estimand: Estimand, estimator: Estimator) -> EstimatorSummary:
    relative, log_diff, covered = [], [], []
    n_failures = 0
    for result in results:
        outcome = result.outcome(estimand, estimator)
        truth = result.truths.get(estimand)
        if outcome.failed or truth is None or outcome.estimate is None:
            n_failures += 1
            continue
        relative.append((outcome.estimate - truth) / truth)
        log_diff.append(math.log(outcome.estimate) - math.log(truth))
        target = result.coverage_truths.get(estimand) if result.coverage_truths else truth
        if outcome.ci_lower is not None and outcome.ci_upper is not None and target is not None:
            covered.append(outcome.ci_lower <= target <= outcome.ci_upper)

    n = len(results)
    if not relative:
        return EstimatorSummary(
            estimand=estimand, estimator=estimator, n_iterations=n, n_failures=n_failures, status="all_failed",
        )
    relative = np.asarray(relative)
    mc_se = float(np.std(relative, ddof=1) / math.sqrt(relative.size)) if relative.size > 1 else None
    return EstimatorSummary(
        estimand=estimand,
        estimator=estimator,
        n_iterations=n,
        n_failures=n_failures,
        relative_bias=float(relative.mean()),
        log_bias=float(np.mean(log_diff)),
        mc_se=mc_se,
        coverage=float(np.mean(covered)) if covered else None,
        n_with_ci=len(covered),
    )


def summarize(
    results: Sequence[IterationResult],
    scenario: SimScenario,
    strict: bool = False,
) -> SimSummary:
    """
    Relative bias (HR scale), log-scale bias, coverage and MC standard error
    per estimator. Failed iterations are counted and excluded. With
    strict=True an estimator without any successful iteration raises AllFailed.
    """
    results = sorted(results, key=lambda r: r.iteration)
    rows = [
        _summarize_estimator(results, estimand, estimator)
        for estimand, estimators in ESTIMATORS.items()
        for estimator in estimators
    ]
    failed = [f"{r.estimand.value}/{r.estimator.value}" for r in rows if r.status == "all_failed"]
    if failed:
        if strict:
            raise AllFailed(f"{scenario.key}: every iteration failed for {', '.join(failed)}")
        logger.warning(f"{scenario.key}: every iteration failed for {', '.join(failed)}")
    return SimSummary(
        scenario_key=scenario.key,
        scenario=scenario,
        lambda_ebh=results[0].lambda_ebh if results else None,
        n_iterations=len(results),
        coverage_truths=results[0].coverage_truths if results else {},
        rows=rows,
    )


def iteration_seed(master_seed: int, scenario_index: int, iteration: int) -> List[int]:
    return [master_seed, scenario_index, iteration]


def run_scenario(
    scenario: SimScenario,
    n_iterations: int,
    master_seed: int,
    scenario_index: int,
    bootstrap_resamples: int = 200,
    calibration_samples: int = 200_000,
    ties: Ties = Ties.BRESLOW,
    coverage_truth: CoverageTruth = CoverageTruth.REFERENCE,
    reference_sample_factor: int = REFERENCE_SAMPLE_FACTOR,
) -> Tuple[SimSummary, List[IterationResult]]:
    """Calibrate, fit the reference truths, run every iteration and summarise one scenario"""
    try:
        lambda_ebh = calibrate_entry_rate(scenario, n_samples=calibration_samples)
    except UnachievableTarget as e:
        logger.warning(f"{scenario.key}: {e}")
        return SimSummary(scenario_key=scenario.key, scenario=scenario, status="unachievable"), []

    coverage_truths = None
    if CoverageTruth(coverage_truth) == CoverageTruth.REFERENCE:
        coverage_truths = reference_truths(
            scenario, lambda_ebh, reference_truth_seed(master_seed, scenario_index),
            sample_factor=reference_sample_factor, ties=ties,
        )

    results = [
        run_iteration(
            scenario,
            lambda_ebh,
            iteration_seed(master_seed, scenario_index, i),
            bootstrap_resamples=bootstrap_resamples,
            ties=ties,
            iteration=i,
            coverage_truths=coverage_truths,
        )
        for i in range(n_iterations)
    ]
    summary = summarize(results, scenario)
    logger.info(f"✅ Scenario {scenario.key}: {n_iterations} iterations (lambda_ebh={lambda_ebh:.4g})")
    return summary, results
