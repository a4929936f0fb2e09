from unittest.mock import patch

import numpy as np
import pytest

from src.simulation.generator import SimScenario
from src.simulation.harness import (
    ESTIMATORS,
    CoverageTruth,
    Estimand,
    Estimator,
    EstimatorOutcome,
    IterationResult,
    iteration_seed,
    reference_truth_seed,
    reference_truths,
    run_iteration,
    run_scenario,
    summarize,
)
from src.utils.errors import AllFailed, ZeroRiskMass

SMALL = SimScenario(n_rw_expected=100, n_trial=100)


def constructed_result(iteration, truth=2.0, factor=1.1, covered=True, failed=(), coverage_truth=None):
    outcomes = []
    for estimand, estimators in ESTIMATORS.items():
        for estimator in estimators:
            if (estimand, estimator) in failed:
                outcomes.append(EstimatorOutcome(estimand=estimand, estimator=estimator, failure="NonConvergence"))
                continue
            estimate = factor * truth
            lower, upper = (truth * 0.5, truth * 1.5) if covered else (truth * 1.2, truth * 1.5)
            outcomes.append(EstimatorOutcome(
                estimand=estimand, estimator=estimator, estimate=estimate, ci_lower=lower, ci_upper=upper,
            ))
    return IterationResult(
        scenario_key=SMALL.key,
        iteration=iteration,
        lambda_ebh=0.2,
        truths={estimand: truth for estimand in Estimand},
        outcomes=outcomes,
        coverage_truths={} if coverage_truth is None else {estimand: coverage_truth for estimand in Estimand},
    )


class TestSummarize:
    """Relative bias and coverage aggregation"""

    def test_constant_relative_bias(self):
        summary = summarize([constructed_result(i) for i in range(10)], SMALL)
        for row in summary.rows:
            assert row.relative_bias == pytest.approx(0.10, abs=1e-12)
            assert row.log_bias == pytest.approx(np.log(1.1), abs=1e-12)
            assert row.coverage == 1.0
            assert row.n_failures == 0

    def test_unbiased(self):
        summary = summarize([constructed_result(i, factor=1.0) for i in range(4)], SMALL)
        assert summary.row(Estimand.MARGINAL_HR, Estimator.WEIGHTED).relative_bias == 0.0
        assert summary.row(Estimand.MARGINAL_HR, Estimator.WEIGHTED).mc_se == 0.0

    def test_coverage_fraction(self):
        results = [constructed_result(i, covered=i % 2 == 0) for i in range(10)]
        row = summarize(results, SMALL).row(Estimand.CONDITIONAL_HR, Estimator.ADJUSTED)
        assert row.coverage == 0.5
        assert row.n_with_ci == 10

    def test_failures_excluded(self):
        failed = {(Estimand.RW_MEDIAN, Estimator.WEIGHTED)}
        results = [constructed_result(0, failed=failed)] + [constructed_result(i) for i in range(1, 5)]
        row = summarize(results, SMALL).row(Estimand.RW_MEDIAN, Estimator.WEIGHTED)
        assert row.n_failures == 1
        assert row.n_iterations == 5
        assert row.relative_bias == pytest.approx(0.1)

    def test_all_failed(self):
        failed = {(Estimand.RW_MEDIAN, Estimator.NAIVE)}
        results = [constructed_result(i, failed=failed) for i in range(3)]
        row = summarize(results, SMALL).row(Estimand.RW_MEDIAN, Estimator.NAIVE)
        assert row.status == "all_failed"
        assert row.relative_bias is None
        with pytest.raises(AllFailed):
            summarize(results, SMALL, strict=True)

    def test_order_independent(self):
        results = [constructed_result(i, factor=1.0 + 0.01 * i) for i in range(6)]
        assert summarize(results, SMALL) == summarize(list(reversed(results)), SMALL)

    def test_coverage_against_reference_truths(self):
        results = [constructed_result(i, coverage_truth=2.0 * 1.6) for i in range(5)]
        summary = summarize(results, SMALL)
        row = summary.row(Estimand.MARGINAL_HR, Estimator.WEIGHTED)
        assert row.coverage == 0.0
        assert row.relative_bias == pytest.approx(0.10)
        assert summary.coverage_truths[Estimand.MARGINAL_HR] == pytest.approx(3.2)

    def test_missing_reference_truth_skips_coverage(self):
        results = [constructed_result(i) for i in range(3)]
        for result in results:
            result.coverage_truths = {estimand: None for estimand in Estimand}
        row = summarize(results, SMALL).row(Estimand.CONDITIONAL_HR, Estimator.ADJUSTED)
        assert row.coverage is None
        assert row.n_with_ci == 0
        assert row.relative_bias == pytest.approx(0.10)


class TestRunIteration:
    """One iteration of every estimator against the complete-data truth"""

    def test_deterministic(self):
        seed = iteration_seed(5, 0, 3)
        a = run_iteration(SMALL, 0.2, seed, bootstrap_resamples=20, iteration=3)
        b = run_iteration(SMALL, 0.2, seed, bootstrap_resamples=20, iteration=3)
        assert a == b

    def test_every_estimator_reported(self):
        result = run_iteration(SMALL, 0.2, iteration_seed(5, 0, 0), bootstrap_resamples=20)
        pairs = {(o.estimand, o.estimator) for o in result.outcomes}
        expected = {(e, s) for e, estimators in ESTIMATORS.items() for s in estimators}
        assert pairs == expected
        assert result.scenario_key == SMALL.key
        for estimand in (Estimand.CONDITIONAL_HR, Estimand.MARGINAL_HR):
            assert result.truths[estimand] > 0

    def test_hazard_ratio_intervals_wrap_estimates(self):
        result = run_iteration(SMALL, 0.2, iteration_seed(5, 0, 1), bootstrap_resamples=20)
        for outcome in result.outcomes:
            if outcome.estimand != Estimand.RW_MEDIAN and not outcome.failed:
                assert outcome.ci_lower <= outcome.estimate <= outcome.ci_upper

    def test_failures_are_recorded_not_raised(self):
        with patch("src.simulation.harness.fit_km", side_effect=ZeroRiskMass(1.0)):
            result = run_iteration(SMALL, 0.2, iteration_seed(5, 0, 2), bootstrap_resamples=20)
        assert result.truths[Estimand.RW_MEDIAN] is None
        for estimator in ESTIMATORS[Estimand.RW_MEDIAN]:
            assert result.outcome(Estimand.RW_MEDIAN, estimator).failure == "ZeroRiskMass"

    def test_seeds(self):
        assert iteration_seed(2024, 3, 7) == [2024, 3, 7]


class TestRunScenario:
    def test_unachievable_target(self):
        summary, results = run_scenario(SimScenario(target_truncation=0.1), 5, 1, 0, calibration_samples=5000)
        assert summary.status == "unachievable"
        assert summary.rows == []
        assert results == []

    def test_small_run(self):
        summary, results = run_scenario(
            SMALL, 3, 1, 0, bootstrap_resamples=10, calibration_samples=20000, reference_sample_factor=10,
        )
        assert summary.status == "ok"
        assert summary.n_iterations == 3
        assert [r.iteration for r in results] == [0, 1, 2]
        assert summary.lambda_ebh == results[0].lambda_ebh

    @pytest.mark.slow
    def test_risk_set_adjustment_reduces_conditional_bias(self):
        summary, _ = run_scenario(SimScenario(), 60, 11, 0, bootstrap_resamples=20)
        naive = summary.row(Estimand.CONDITIONAL_HR, Estimator.NAIVE)
        adjusted = summary.row(Estimand.CONDITIONAL_HR, Estimator.ADJUSTED)
        assert abs(adjusted.relative_bias) < abs(naive.relative_bias)
        assert abs(adjusted.relative_bias) < 0.1

    def test_reference_truths_shared_by_iterations(self):
        summary, results = run_scenario(
            SMALL, 2, 1, 0, bootstrap_resamples=10, calibration_samples=20000, reference_sample_factor=5,
        )
        expected = reference_truths(SMALL, summary.lambda_ebh, reference_truth_seed(1, 0), sample_factor=5)
        assert summary.coverage_truths == expected
        assert all(r.coverage_truths == expected for r in results)
        assert results[0].truths != expected

    def test_per_iteration_coverage_truth(self):
        summary, results = run_scenario(
            SMALL, 2, 1, 0, bootstrap_resamples=10, calibration_samples=20000,
            coverage_truth=CoverageTruth.PER_ITERATION,
        )
        assert summary.coverage_truths == {}
        assert all(r.coverage_truths == {} for r in results)


class TestReferenceTruths:
    """Scenario-level truths from one large independent complete-data draw"""

    def test_deterministic(self):
        a = reference_truths(SMALL, 0.2, reference_truth_seed(4, 2), sample_factor=5)
        b = reference_truths(SMALL, 0.2, reference_truth_seed(4, 2), sample_factor=5)
        assert a == b

    def test_seed_stream_outside_iterations(self):
        seed = reference_truth_seed(2024, 3)
        assert seed[:2] == [2024, 3]
        assert seed != iteration_seed(2024, 3, 999)

    def test_conditional_hazard_ratio_near_generating_value(self, default_scenario):
        truths = reference_truths(default_scenario, 0.2, reference_truth_seed(8, 0))
        assert truths[Estimand.CONDITIONAL_HR] == pytest.approx(0.8, abs=0.05)

    def test_unconfounded_median_matches_exponential(self, null_scenario):
        truths = reference_truths(null_scenario, 0.2, reference_truth_seed(8, 1))
        assert truths[Estimand.RW_MEDIAN] == pytest.approx(np.log(2.0) / null_scenario.lambda_bh, rel=0.03)


@pytest.fixture(scope="module")
def default_study():
    """500 iterations of the default scenario, coverage against reference truths"""
    return run_scenario(SimScenario(), 500, 2024, 0, bootstrap_resamples=50)


@pytest.mark.slow
class TestDefaultScenarioStudy:
    """Bias and coverage of every estimator in the default scenario"""

    def test_weighted_marginal_hazard_ratio(self, default_study):
        summary, _ = default_study
        naive = summary.row(Estimand.MARGINAL_HR, Estimator.NAIVE)
        adjusted = summary.row(Estimand.MARGINAL_HR, Estimator.ADJUSTED)
        weighted = summary.row(Estimand.MARGINAL_HR, Estimator.WEIGHTED)
        assert abs(weighted.relative_bias) < 0.05
        assert 0.92 <= weighted.coverage <= 0.975
        assert abs(adjusted.relative_bias) >= 2 * abs(weighted.relative_bias)
        assert abs(naive.relative_bias) > abs(adjusted.relative_bias)

    def test_adjusted_conditional_hazard_ratio(self, default_study):
        summary, _ = default_study
        adjusted = summary.row(Estimand.CONDITIONAL_HR, Estimator.ADJUSTED)
        naive = summary.row(Estimand.CONDITIONAL_HR, Estimator.NAIVE)
        assert abs(adjusted.relative_bias) < 0.03
        assert 0.92 <= adjusted.coverage <= 0.975
        assert naive.coverage < 0.85

    def test_weighted_median(self, default_study):
        summary, _ = default_study
        adjusted = summary.row(Estimand.RW_MEDIAN, Estimator.ADJUSTED)
        weighted = summary.row(Estimand.RW_MEDIAN, Estimator.WEIGHTED)
        assert abs(weighted.relative_bias) < 0.05
        assert abs(adjusted.relative_bias) > abs(weighted.relative_bias)

    def test_reference_truths_recorded(self, default_study):
        summary, results = default_study
        assert summary.coverage_truths[Estimand.CONDITIONAL_HR] == pytest.approx(0.8, abs=0.05)
        assert all(r.coverage_truths == summary.coverage_truths for r in results)


@pytest.mark.slow
def test_weights_inert_without_survival_confounding():
    _, results = run_scenario(
        SimScenario(beta_z=0.0), 200, 2024, 0, bootstrap_resamples=10, coverage_truth=CoverageTruth.PER_ITERATION,
    )
    differences = []
    for result in results:
        adjusted = result.outcome(Estimand.MARGINAL_HR, Estimator.ADJUSTED)
        weighted = result.outcome(Estimand.MARGINAL_HR, Estimator.WEIGHTED)
        if not (adjusted.failed or weighted.failed):
            differences.append(abs(np.log(adjusted.estimate) - np.log(weighted.estimate)))
    assert len(differences) >= 190
    assert np.median(differences) < 0.02
