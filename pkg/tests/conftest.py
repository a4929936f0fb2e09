from typing import Sequence

import numpy as np
import pytest

from src.cohort.models import Cohort
from src.simulation.generator import SimScenario


def make_cohort(
    entry: Sequence[float],
    time: Sequence[float],
    event: Sequence[int],
    covariates=None,
    names=None,
    weight=None,
    reference=None,
    consistent: bool = True,
) -> Cohort:
    return Cohort.from_arrays(
        entry=entry,
        time=time,
        event=np.asarray(event, dtype=bool),
        covariates=None if covariates is None else np.asarray(covariates, dtype=float),
        covariate_names=names,
        weight=weight,
        reference=reference,
        require_truncation_consistency=consistent,
    )


@pytest.fixture
def three_record_cohort():
    """Delayed-entry example with risk sets {0,1}, {1}, {2} at times 2, 3, 5"""
    return make_cohort(entry=[0, 1, 4], time=[2, 3, 5], event=[1, 1, 1])


@pytest.fixture
def delayed_cohort():
    """Small cohort with delayed entry, censoring, a tie and one covariate"""
    rng = np.random.default_rng(11)
    n = 60
    x = rng.normal(size=n)
    entry = np.where(rng.random(n) < 0.5, rng.exponential(2.0, n), 0.0)
    t = rng.exponential(5.0 * np.exp(-0.5 * x))
    c = rng.exponential(8.0, n)
    time = entry + np.round(np.minimum(t, c), 1) + 0.1
    event = t <= c
    return make_cohort(entry=entry, time=time, event=event, covariates=x.reshape(-1, 1), names=["x"])


@pytest.fixture
def default_scenario():
    return SimScenario()


@pytest.fixture
def null_scenario():
    """No confounding of entry or survival"""
    return SimScenario(beta_entry=0.0, beta_z=0.0)


@pytest.fixture
def simulated_csvs(tmp_path):
    """Truncated RW arm and trial-arm reference sample written as CSV files"""
    from src.cohort.loader import write_cohort_csv
    from src.simulation.generator import generate_iteration, rw_arm

    scenario = SimScenario(n_rw_expected=400, n_trial=400)
    data = generate_iteration(scenario, 0.2, seed=[77])
    truncated = write_cohort_csv(rw_arm(data.truncated), tmp_path / "truncated.csv")
    reference = write_cohort_csv(data.truncated.subset(data.truncated.reference), tmp_path / "reference.csv")
    return truncated, reference
