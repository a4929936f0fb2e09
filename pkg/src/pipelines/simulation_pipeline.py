"""
Simulation Pipeline

Runs the scenario grid of a SimulationConfig:
1. Calibrates each scenario's entry rate
2. Runs the iterations (process pool when MAX_WORKERS > 1)
3. Writes one CSV per scenario (atomic, resumable)
4. Writes summary.json / summary.csv and optional bias plots

Scenario CSVs already present in the output directory are reloaded instead
of recomputed, so an interrupted study resumes where it stopped.
"""

import asyncio
import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd

from src.simulation.config import SimulationConfig, load_simulation_config, scenario_grid
from src.simulation.generator import SimScenario
from src.simulation.harness import (
    ESTIMATORS,
    Estimand,
    EstimatorOutcome,
    EstimatorSummary,
    IterationResult,
    SimSummary,
    run_scenario,
    summarize,
)
from src.utils.io import canonical_json, write_atomic, write_atomic_async
from src.utils.provenance import build_provenance
from src.utils.settings import get_settings

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "iteration", "lambda_ebh", "estimand", "estimator", "truth",
    "estimate", "ci_lower", "ci_upper", "failure", "coverage_truth",
]
SUMMARY_COLUMNS = [
    "scenario_key", "target_truncation", "beta_entry_ratio", "beta_z_ratio", "status",
    "estimand", "estimator", "n_iterations", "n_failures", "relative_bias",
    "log_bias", "mc_se", "coverage",
]
_SUMMARY_FIELDS = {c for c in SUMMARY_COLUMNS if c in EstimatorSummary.model_fields}


def _number(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _optional(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def results_to_csv(results: List[IterationResult]) -> str:
    rows = []
    for result in results:
        for outcome in result.outcomes:
            rows.append({
                "iteration": result.iteration,
                "lambda_ebh": _number(result.lambda_ebh),
                "estimand": outcome.estimand.value,
                "estimator": outcome.estimator.value,
                "truth": _number(result.truths.get(outcome.estimand)),
                "estimate": _number(outcome.estimate),
                "ci_lower": _number(outcome.ci_lower),
                "ci_upper": _number(outcome.ci_upper),
                "failure": outcome.failure or "",
                "coverage_truth": _number(result.coverage_truths.get(outcome.estimand)) if result.coverage_truths else "",
            })
    return pd.DataFrame(rows, columns=CSV_COLUMNS).to_csv(index=False, lineterminator="\n")


def results_from_csv(path: Union[str, Path], scenario_key: str) -> List[IterationResult]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    results = []
    for iteration, rows in frame.groupby(frame["iteration"].astype(int), sort=True):
        truths: Dict[Estimand, Optional[float]] = {}
        coverage_truths: Dict[Estimand, Optional[float]] = {}
        outcomes = []
        for _, row in rows.iterrows():
            estimand = Estimand(row["estimand"])
            truths[estimand] = _optional(row["truth"])
            coverage_truths[estimand] = _optional(row.get("coverage_truth", ""))
            outcomes.append(EstimatorOutcome(
                estimand=estimand,
                estimator=row["estimator"],
                estimate=_optional(row["estimate"]),
                ci_lower=_optional(row["ci_lower"]),
                ci_upper=_optional(row["ci_upper"]),
                failure=row["failure"] or None,
            ))
        results.append(IterationResult(
            scenario_key=scenario_key,
            iteration=int(iteration),
            lambda_ebh=float(rows["lambda_ebh"].iloc[0]),
            truths=truths,
            outcomes=outcomes,
            # an all-blank column means the study ran against per-iteration truths
            coverage_truths=coverage_truths if any(v is not None for v in coverage_truths.values()) else {},
        ))
    return results


def summary_table(summaries: List[SimSummary]) -> pd.DataFrame:
    rows = []
    for summary in summaries:
        scenario = summary.scenario
        base = {
            "scenario_key": summary.scenario_key,
            "target_truncation": scenario.target_truncation,
            "beta_entry_ratio": math.exp(scenario.beta_entry),
            "beta_z_ratio": math.exp(scenario.beta_z),
            "status": summary.status,
        }
        if not summary.rows:
            rows.append(base)
        for row in summary.rows:
            rows.append({**base, **row.model_dump(mode="json", include=_SUMMARY_FIELDS)})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


class SimulationPipeline:
    def __init__(
        self,
        config: SimulationConfig,
        out_dir: Union[str, Path],
        max_workers: Optional[int] = None,
        plots: Optional[bool] = None,
    ):
        settings = get_settings()
        self.config = config
        self.out_dir = Path(out_dir)
        self.scenario_dir = self.out_dir / "scenarios"
        self.max_workers = max_workers or settings.max_workers
        self.bootstrap_resamples = config.bootstrap_resamples or settings.harness_bootstrap_resamples
        self.calibration_samples = config.calibration_samples or settings.calibration_samples
        self.plots = config.plots if plots is None else plots

    def _executor(self) -> Executor:
        if self.max_workers > 1:
            return ProcessPoolExecutor(max_workers=self.max_workers)
        return ThreadPoolExecutor(max_workers=1)

    async def _run_one(self, index: int, scenario: SimScenario, executor: Executor) -> SimSummary:
        path = self.scenario_dir / f"{scenario.key}.csv"
        if path.exists():
            results = results_from_csv(path, scenario.key)
            if results:
                logger.info(f"Resuming {scenario.key} from {path} ({len(results)} iterations)")
                return summarize(results, scenario)

        loop = asyncio.get_running_loop()
        job = partial(
            run_scenario,
            scenario,
            self.config.n_iterations,
            self.config.master_seed,
            index,
            bootstrap_resamples=self.bootstrap_resamples,
            calibration_samples=self.calibration_samples,
            ties=self.config.ties,
            coverage_truth=self.config.coverage_truth,
            reference_sample_factor=self.config.reference_sample_factor,
        )
        summary, results = await loop.run_in_executor(executor, job)
        await write_atomic_async(path, results_to_csv(results))
        return summary

    async def run_grid(self) -> List[SimSummary]:
        """Run (or resume) every scenario; results keep grid order"""
        scenarios = scenario_grid(self.config)
        logger.info(f"Simulation grid: {len(scenarios)} scenarios x {self.config.n_iterations} iterations")
        with self._executor() as executor:
            summaries = await asyncio.gather(
                *(self._run_one(i, s, executor) for i, s in enumerate(scenarios))
            )
        summaries = list(summaries)

        self.write_summary(summaries)
        if self.plots:
            self.write_plots(summaries)
        unachievable = sum(s.status == "unachievable" for s in summaries)
        logger.info(f"✅ Simulation complete: {len(summaries)} scenarios ({unachievable} unachievable)")
        return summaries

    def write_summary(self, summaries: List[SimSummary]) -> Tuple[Path, Path]:
        config_payload = self.config.model_dump(mode="json")
        payload = {
            "schema_version": 1,
            "provenance": build_provenance(self.config.master_seed, config_payload).model_dump(mode="json"),
            "config": config_payload,
            "scenarios": [s.model_dump(mode="json") for s in summaries],
        }
        json_path = write_atomic(self.out_dir / "summary.json", canonical_json(payload))
        csv_path = write_atomic(
            self.out_dir / "summary.csv",
            summary_table(summaries).to_csv(index=False, lineterminator="\n"),
        )
        return json_path, csv_path

    def write_plots(self, summaries: List[SimSummary]) -> List[Path]:
        from src.utils.plots import plot_bias_by_truncation

        groups: Dict[Tuple[float, float], List[SimSummary]] = {}
        for summary in summaries:
            if summary.status != "ok":
                continue
            key = (math.exp(summary.scenario.beta_entry), math.exp(summary.scenario.beta_z))
            groups.setdefault(key, []).append(summary)

        written = []
        for (entry_ratio, z_ratio), group in sorted(groups.items()):
            for estimand, estimators in ESTIMATORS.items():
                series = {}
                for estimator in estimators:
                    points = []
                    for summary in group:
                        row = summary.row(estimand, estimator)
                        if row.relative_bias is not None:
                            points.append((summary.scenario.target_truncation, row.relative_bias))
                    series[estimator.value] = points
                name = f"{estimand.value}_entry{entry_ratio:.4g}_z{z_ratio:.4g}.svg"
                written.append(plot_bias_by_truncation(series, self.out_dir / "plots" / name))
        return written


async def run_grid(config: SimulationConfig, out_dir: Union[str, Path], max_workers: Optional[int] = None) -> List[SimSummary]:
    return await SimulationPipeline(config, out_dir, max_workers=max_workers).run_grid()


def simulate(
    config_path: Union[str, Path],
    out_dir: Union[str, Path],
    plots: Optional[bool] = None,
    master_seed: Optional[int] = None,
) -> int:
    """Load the config, run the grid and write every output; returns the exit status"""
    config = load_simulation_config(config_path)
    if master_seed is not None:
        config = config.model_copy(update={"master_seed": master_seed})
    pipeline = SimulationPipeline(config, out_dir, plots=plots)
    asyncio.run(pipeline.run_grid())
    return 0
