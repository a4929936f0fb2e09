import json
from unittest.mock import patch

import pandas as pd
import pytest

from src.pipelines.simulation_pipeline import (
    CSV_COLUMNS,
    SUMMARY_COLUMNS,
    results_from_csv,
    results_to_csv,
    run_grid,
    simulate,
)
from src.simulation.config import load_simulation_config, parse_simulation_config, scenario_grid
from src.simulation.harness import ESTIMATORS, CoverageTruth, Estimand, EstimatorOutcome, IterationResult
from src.utils.errors import ConfigError

TINY = {
    "master_seed": 3,
    "n_iterations": 2,
    "bootstrap_resamples": 10,
    "calibration_samples": 20000,
    "reference_sample_factor": 20,
    "base": {"n_rw_expected": 100, "n_trial": 100},
    "grid": {"truncation": [0.5], "beta_entry_ratios": [0.5], "beta_z_ratios": [2.0]},
}


def stub_iteration(scenario, lambda_ebh, seed, bootstrap_resamples=200, ties=None, iteration=0, coverage_truths=None):
    outcomes = [
        EstimatorOutcome(estimand=estimand, estimator=estimator, estimate=1.0, ci_lower=0.5, ci_upper=2.0)
        for estimand, estimators in ESTIMATORS.items()
        for estimator in estimators
    ]
    return IterationResult(
        scenario_key=scenario.key,
        iteration=iteration,
        lambda_ebh=lambda_ebh,
        truths={estimand: 1.0 for estimand in Estimand},
        outcomes=outcomes,
        coverage_truths=coverage_truths or {},
    )


class TestSimulationConfig:
    """Config parsing and grid expansion"""

    def test_defaults(self):
        config = parse_simulation_config({})
        assert config.master_seed == 2024
        assert config.n_iterations == 1000
        assert len(scenario_grid(config)) == 63

    def test_grid_order(self):
        config = parse_simulation_config({"grid": {"truncation": [0.3, 0.5], "beta_z_ratios": [1.0, 2.0]}})
        keys = [s.key for s in scenario_grid(config)]
        assert keys[0] == "trunc0.3_entry0.5_z1"
        assert keys[1] == "trunc0.3_entry0.5_z2"
        assert len(keys) == 12

    def test_out_of_range_truncation(self):
        with pytest.raises(ConfigError) as exc:
            parse_simulation_config({"grid": {"truncation": [1.5]}})
        assert exc.value.field == "grid.truncation.0"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_simulation_config({"n_iteration": 5})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_simulation_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_simulation_config(path)

    def test_hash_is_stable(self):
        assert parse_simulation_config(TINY).hash == parse_simulation_config(dict(TINY)).hash

    def test_coverage_truth_modes(self):
        assert parse_simulation_config({}).coverage_truth == CoverageTruth.REFERENCE
        config = parse_simulation_config({"coverage_truth": "per_iteration", "reference_sample_factor": 5})
        assert config.coverage_truth == CoverageTruth.PER_ITERATION
        with pytest.raises(ConfigError) as exc:
            parse_simulation_config({"coverage_truth": "same_draw"})
        assert exc.value.field == "coverage_truth"


class TestResultsCsv:
    def test_columns_and_reload(self, default_scenario):
        results = [stub_iteration(default_scenario, 0.2, [0], iteration=i) for i in range(3)]
        text = results_to_csv(results)
        assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
        assert len(text.splitlines()) == 1 + 3 * 8

    def test_failures_survive_reload(self, default_scenario, tmp_path):
        result = stub_iteration(default_scenario, 0.2, [0])
        result.outcomes[0] = EstimatorOutcome(
            estimand=result.outcomes[0].estimand, estimator=result.outcomes[0].estimator, failure="NonConvergence",
        )
        result.truths[Estimand.RW_MEDIAN] = None
        path = tmp_path / "s.csv"
        path.write_text(results_to_csv([result]))
        assert results_from_csv(path, default_scenario.key) == [result]

    def test_coverage_truths_survive_reload(self, default_scenario, tmp_path):
        reference = {Estimand.CONDITIONAL_HR: 0.8, Estimand.MARGINAL_HR: 0.85, Estimand.RW_MEDIAN: None}
        results = [stub_iteration(default_scenario, 0.2, [0], iteration=i, coverage_truths=reference) for i in range(2)]
        path = tmp_path / "s.csv"
        path.write_text(results_to_csv(results))
        reloaded = results_from_csv(path, default_scenario.key)
        assert reloaded == results
        assert reloaded[0].coverage_truths[Estimand.MARGINAL_HR] == 0.85

    def test_per_iteration_mode_reloads_without_coverage_truths(self, default_scenario, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text(results_to_csv([stub_iteration(default_scenario, 0.2, [0])]))
        assert results_from_csv(path, default_scenario.key)[0].coverage_truths == {}


@pytest.mark.integration
class TestRunGrid:
    """End-to-end grid runs on small scenarios"""

    @pytest.mark.asyncio
    async def test_writes_outputs(self, tmp_path):
        config = parse_simulation_config(TINY)
        summaries = await run_grid(config, tmp_path, max_workers=1)
        assert len(summaries) == 1
        assert summaries[0].status == "ok"
        assert (tmp_path / "scenarios" / f"{summaries[0].scenario_key}.csv").exists()
        payload = json.loads((tmp_path / "summary.json").read_text())
        assert payload["config"]["master_seed"] == 3
        assert payload["provenance"]["seed"] == 3
        table = pd.read_csv(tmp_path / "summary.csv")
        assert list(table.columns) == SUMMARY_COLUMNS
        assert len(table) == 8

    @pytest.mark.asyncio
    async def test_reproducible(self, tmp_path):
        config = parse_simulation_config(TINY)
        await run_grid(config, tmp_path / "a", max_workers=1)
        await run_grid(config, tmp_path / "b", max_workers=1)
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
        key = scenario_grid(config)[0].key
        assert (tmp_path / "a" / "scenarios" / f"{key}.csv").read_bytes() == (
            tmp_path / "b" / "scenarios" / f"{key}.csv"
        ).read_bytes()

    @pytest.mark.asyncio
    async def test_resumes_from_scenario_csv(self, tmp_path):
        config = parse_simulation_config(TINY)
        first = await run_grid(config, tmp_path, max_workers=1)
        with patch("src.pipelines.simulation_pipeline.run_scenario", side_effect=AssertionError("recomputed")):
            second = await run_grid(config, tmp_path, max_workers=1)
        assert second == first

    @pytest.mark.asyncio
    async def test_default_grid_unachievable_scenarios(self, tmp_path):
        config = parse_simulation_config(
            {"n_iterations": 1, "calibration_samples": 5000, "coverage_truth": "per_iteration"}
        )
        with patch("src.simulation.harness.run_iteration", side_effect=stub_iteration):
            summaries = await run_grid(config, tmp_path, max_workers=1)
        assert len(summaries) == 63
        unachievable = [s for s in summaries if s.status == "unachievable"]
        assert len(unachievable) == 18
        assert {s.scenario.target_truncation for s in unachievable} == {0.1, 0.2}
        table = pd.read_csv(tmp_path / "summary.csv")
        assert len(table) == 45 * 8 + 18
        assert len(list((tmp_path / "scenarios").glob("*.csv"))) == 63

    @pytest.mark.asyncio
    async def test_plots(self, tmp_path):
        config = parse_simulation_config({**TINY, "plots": True})
        with patch("src.simulation.harness.run_iteration", side_effect=stub_iteration):
            await run_grid(config, tmp_path, max_workers=1)
        plots = sorted(p.name for p in (tmp_path / "plots").glob("*.svg"))
        assert len(plots) == 3
        assert "rw_median_entry0.5_z2.svg" in plots


class TestSimulate:
    def test_config_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(TINY))
        with patch("src.simulation.harness.run_iteration", side_effect=stub_iteration):
            assert simulate(path, tmp_path / "out", master_seed=9) == 0
        payload = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert payload["config"]["master_seed"] == 9

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"grid": {"truncation": [1.5]}}))
        with pytest.raises(ConfigError):
            simulate(path, tmp_path / "out")
