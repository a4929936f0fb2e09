import math

import numpy as np
import pytest

from src.estimators.kaplan_meier import fit_km, median_survival, summarize_curve
from src.utils.errors import InconsistentArity, NonFiniteValue, ZeroRiskMass
from tests.conftest import make_cohort


def textbook_km(entry, time, event, weights):
    """Direct evaluation of the product-limit formula, one event time at a time"""
    times = sorted(set(time[event]))
    survival, s = [], 1.0
    for t in times:
        died = sum(w for e, y, d, w in zip(entry, time, event, weights) if d and y == t and e <= t)
        at_risk = sum(w for e, y, w in zip(entry, time, weights) if e <= t <= y)
        s *= 1.0 - died / at_risk
        survival.append(s)
    return np.array(times), np.array(survival)


def exponential_cohort(n, rate, seed, delayed_share=0.0, max_entry=4.0):
    rng = np.random.default_rng(seed)
    entry = np.where(rng.random(n) < delayed_share, rng.uniform(0, max_entry, n), 0.0)
    t = rng.exponential(1.0 / rate, n)
    keep = t > entry
    return make_cohort(entry=entry[keep], time=t[keep], event=np.ones(keep.sum()))


class TestFitKm:
    """Weighted, risk-set adjusted Kaplan-Meier"""

    def test_delayed_entry_example(self, three_record_cohort):
        curve = fit_km(three_record_cohort)
        np.testing.assert_array_equal(curve.event_times, [2, 3, 5])
        np.testing.assert_allclose(curve.failure_probs, [0.5, 1.0, 1.0])
        np.testing.assert_allclose(curve.survival, [0.5, 0.0, 0.0])
        np.testing.assert_allclose(curve.at_risk_mass, [2, 1, 1])

    def test_naive_ignores_entry(self, three_record_cohort):
        curve = fit_km(three_record_cohort, risk_set_adjust=False)
        np.testing.assert_allclose(curve.failure_probs, [1 / 3, 1 / 2, 1.0])
        assert not curve.risk_set_adjusted

    def test_single_record(self):
        curve = fit_km(make_cohort(entry=[0], time=[5], event=[1]))
        np.testing.assert_array_equal(curve.survival, [0.0])
        assert median_survival(curve) == 5.0

    def test_all_censored(self):
        curve = fit_km(make_cohort(entry=[0, 1], time=[3, 4], event=[0, 0]))
        assert curve.is_empty
        assert median_survival(curve) is None
        assert curve.survival_at(10.0) == 1.0

    def test_matches_textbook(self, delayed_cohort):
        w = np.random.default_rng(3).uniform(0.2, 3.0, delayed_cohort.n)
        curve = fit_km(delayed_cohort, weights=w)
        times, survival = textbook_km(
            delayed_cohort.entry, delayed_cohort.time, delayed_cohort.event, w
        )
        np.testing.assert_array_equal(curve.event_times, times)
        np.testing.assert_allclose(curve.survival, survival, rtol=1e-10)

    def test_survival_monotone_and_bounded(self, delayed_cohort):
        survival = fit_km(delayed_cohort).survival
        assert np.all(np.diff(survival) <= 0)
        assert np.all((survival >= 0) & (survival <= 1))

    def test_weight_scale_invariance(self, delayed_cohort):
        w = np.random.default_rng(4).uniform(0.5, 2.0, delayed_cohort.n)
        base = fit_km(delayed_cohort, weights=w)
        np.testing.assert_array_equal(fit_km(delayed_cohort, weights=2.0 * w).survival, base.survival)
        np.testing.assert_allclose(fit_km(delayed_cohort, weights=3.7 * w).survival, base.survival, rtol=1e-12)

    def test_unit_weights_default(self, delayed_cohort):
        np.testing.assert_array_equal(
            fit_km(delayed_cohort).survival, fit_km(delayed_cohort, weights=np.ones(delayed_cohort.n)).survival
        )

    def test_bad_weights(self, three_record_cohort):
        with pytest.raises(InconsistentArity):
            fit_km(three_record_cohort, weights=[1.0, 1.0])
        with pytest.raises(NonFiniteValue):
            fit_km(three_record_cohort, weights=[1.0, np.inf, 1.0])

    def test_zero_risk_mass(self):
        cohort = make_cohort(entry=[3], time=[2], event=[1], consistent=False)
        with pytest.raises(ZeroRiskMass) as exc:
            fit_km(cohort)
        assert exc.value.time == 2.0

    def test_entry_on_event_time_is_at_risk(self):
        cohort = make_cohort(entry=[0, 2], time=[2, 3], event=[1, 0])
        curve = fit_km(cohort)
        np.testing.assert_allclose(curve.failure_probs, [0.5])

    def test_summarize_curve(self, three_record_cohort):
        summary = summarize_curve(fit_km(three_record_cohort))
        assert summary == {"event_times": [2.0, 3.0, 5.0], "survival": [0.5, 0.0, 0.0]}


class TestStepFunction:
    def test_survival_at(self, three_record_cohort):
        curve = fit_km(three_record_cohort)
        assert curve.survival_at(1.0) == 1.0
        assert curve.survival_at(2.0) == 0.5
        assert curve.survival_at(2.9) == 0.5
        assert curve.survival_at(3.0) == 0.0

    def test_survival_on_grid(self, three_record_cohort):
        curve = fit_km(three_record_cohort)
        np.testing.assert_array_equal(curve.survival_on([0.5, 2.0, 4.0]), [1.0, 0.5, 0.0])


class TestMedian:
    def test_median_uses_less_or_equal(self):
        curve = fit_km(make_cohort(entry=[0, 0], time=[1, 2], event=[1, 1]))
        assert median_survival(curve) == 1.0

    def test_median_not_reached(self):
        curve = fit_km(make_cohort(entry=[0, 0, 0], time=[1, 2, 3], event=[1, 0, 0]))
        assert median_survival(curve) is None

    def test_exponential_median(self):
        curve = fit_km(exponential_cohort(20000, rate=1 / 12, seed=2024))
        assert median_survival(curve) == pytest.approx(12 * math.log(2), abs=0.3)

    def test_adjustment_removes_truncation_bias(self):
        cohort = exponential_cohort(40000, rate=1 / 12, seed=99, delayed_share=0.5)
        adjusted = median_survival(fit_km(cohort))
        naive = median_survival(fit_km(cohort, risk_set_adjust=False))
        assert adjusted == pytest.approx(12 * math.log(2), abs=0.4)
        assert naive > adjusted + 0.4
