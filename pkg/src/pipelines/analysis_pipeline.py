"""
Analysis Pipeline

End-to-end workflow for a left-truncated real-world cohort plus a
non-truncated reference sample:
1. Naive and risk-set adjusted Kaplan-Meier
2. Marginal test of entry-time dependence
3. Conditional test given the confounders
4. Density-ratio weights (reference vs truncated confounders)
5. Balance diagnostics (warning when a weighted SMD exceeds the threshold)
6. Weighted, risk-set adjusted Kaplan-Meier with bootstrap CI and band

Any stage failure is re-raised as StageError tagged with the stage name.
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from src.cohort.loader import load_cohort_csv, load_covariates_csv
from src.cohort.models import Cohort
from src.estimators.bootstrap import BootstrapInterval, ConfidenceBand, Statistic, km_bootstrap_ci
from src.estimators.cox import TestResult, Ties, test_conditional_dependence, test_marginal_dependence
from src.estimators.kaplan_meier import KMCurve, fit_km, median_survival
from src.utils.errors import StageError, TruncSurvError
from src.utils.io import canonical_json, write_atomic
from src.utils.provenance import Provenance, build_provenance
from src.weighting.balance import DEFAULT_THRESHOLD, BalanceReport
from src.weighting.density_ratio import estimate_weights

logger = logging.getLogger(__name__)


class AnalysisConfig(BaseModel):
    confounders: List[str]
    seed: int
    bootstrap_resamples: int = 1000
    level: float = 0.95
    ties: Ties = Ties.BRESLOW
    balance_threshold: float = DEFAULT_THRESHOLD
    trim_quantile: Optional[float] = None
    filter_expr: Optional[str] = None
    require_truncation_consistency: bool = True


class IntervalSummary(BaseModel):
    lower: float
    upper: float
    level: float
    n_resamples: int
    n_degenerate: int


class BandSummary(BaseModel):
    level: float
    times: List[float]
    lower: List[float]
    upper: List[float]


class KMSummary(BaseModel):
    risk_set_adjusted: bool
    weighted: bool
    n: int
    n_events: int
    median: Optional[float]
    median_ci: Optional[IntervalSummary] = None
    event_times: List[float]
    survival: List[float]
    band: Optional[BandSummary] = None


class WeightSummary(BaseModel):
    n_truncated: int
    n_reference: int
    sample_adjustment: float
    min: float
    max: float
    mean: float
    trim_quantile: Optional[float] = None


class AnalysisReport(BaseModel):
    schema_version: Literal[1] = 1
    naive_km: KMSummary
    adjusted_km: KMSummary
    marginal_test: TestResult
    conditional_test: TestResult
    weights: WeightSummary
    balance: BalanceReport
    weighted_km: KMSummary
    provenance: Provenance

    def to_json(self) -> str:
        return canonical_json(self.model_dump(mode="json"))


def _interval(ci: BootstrapInterval) -> IntervalSummary:
    ci = ci.wrapping_estimate()
    return IntervalSummary(
        lower=ci.lower, upper=ci.upper, level=ci.level, n_resamples=ci.n_resamples, n_degenerate=ci.n_degenerate
    )


def _km_summary(
    cohort: Cohort,
    curve: KMCurve,
    weighted: bool,
    ci: Optional[BootstrapInterval] = None,
    band: Optional[ConfidenceBand] = None,
) -> KMSummary:
    return KMSummary(
        risk_set_adjusted=curve.risk_set_adjusted,
        weighted=weighted,
        n=cohort.n,
        n_events=cohort.n_events,
        median=median_survival(curve),
        median_ci=_interval(ci) if ci is not None else None,
        event_times=curve.event_times.tolist(),
        survival=curve.survival.tolist(),
        band=BandSummary(
            level=band.level, times=band.times.tolist(), lower=band.lower.tolist(), upper=band.upper.tolist()
        ) if band is not None else None,
    )


class AnalysisPipeline:
    def __init__(self, config: AnalysisConfig):
        self.config = config
        self.curves: Dict[str, KMCurve] = {}
        self.bands: Dict[str, ConfidenceBand] = {}

    @contextmanager
    def stage(self, name: str):
        logger.info(f"Stage {name}...")
        try:
            yield
        except StageError:
            raise
        except (TruncSurvError, FileNotFoundError) as e:
            raise StageError(name, e) from e
        logger.info(f"✅ Stage {name} done")

    def _median_ci(self, cohort: Cohort, curve: KMCurve, weights: np.ndarray, seed: int) -> Optional[BootstrapInterval]:
        if median_survival(curve) is None:
            logger.warning("Median not reached; no bootstrap interval for it")
            return None
        return km_bootstrap_ci(
            cohort, weights=weights, n_resamples=self.config.bootstrap_resamples,
            level=self.config.level, seed=seed, statistic=Statistic.MEDIAN,
        )

    def run(self, truncated_csv: Union[str, Path], reference_csv: Union[str, Path]) -> AnalysisReport:
        cfg = self.config

        with self.stage("load"):
            cohort = load_cohort_csv(
                truncated_csv,
                require_truncation_consistency=cfg.require_truncation_consistency,
                filter_expr=cfg.filter_expr,
            )
            reference_Z = load_covariates_csv(reference_csv, cfg.confounders)
            truncated_Z = cohort.design(cfg.confounders)
        unit = np.ones(cohort.n)

        with self.stage("adjusted_km"):
            naive = fit_km(cohort, risk_set_adjust=False, weights=unit)
            adjusted = fit_km(cohort, risk_set_adjust=True, weights=unit)
            adjusted_ci = self._median_ci(cohort, adjusted, unit, cfg.seed)
            self.curves.update({"naive": naive, "risk-set adjusted": adjusted})

        with self.stage("marginal_test"):
            marginal = test_marginal_dependence(cohort, ties=cfg.ties)
            if marginal.rejects():
                logger.info("Entry time is marginally associated with survival")

        with self.stage("conditional_test"):
            conditional = test_conditional_dependence(cohort, cfg.confounders, ties=cfg.ties)
            if conditional.rejects():
                logger.warning(
                    "Entry time remains associated with survival given the confounders; "
                    "conditionally independent truncation is doubtful"
                )

        with self.stage("weights"):
            density = estimate_weights(
                truncated_Z, reference_Z,
                trim_quantile=cfg.trim_quantile,
                threshold=cfg.balance_threshold,
                names=cfg.confounders,
            )
            w = density.weights

        with self.stage("balance"):
            balance = density.balance
            if not balance.balanced:
                logger.warning(f"Covariates out of balance after weighting: {', '.join(balance.flagged)}")

        with self.stage("weighted_km"):
            weighted = fit_km(cohort, risk_set_adjust=True, weights=w)
            weighted_ci = self._median_ci(cohort, weighted, w, cfg.seed + 1)
            band = None
            if not weighted.is_empty:
                band = km_bootstrap_ci(
                    cohort, weights=w, n_resamples=cfg.bootstrap_resamples, level=cfg.level,
                    seed=cfg.seed + 2, statistic=Statistic.SURVIVAL_CURVE, times=weighted.event_times,
                )
                self.bands["weighted"] = band
            self.curves["weighted"] = weighted

        report = AnalysisReport(
            naive_km=_km_summary(cohort, naive, weighted=False),
            adjusted_km=_km_summary(cohort, adjusted, weighted=False, ci=adjusted_ci),
            marginal_test=marginal,
            conditional_test=conditional,
            weights=WeightSummary(
                n_truncated=int(w.size),
                n_reference=int(density.n_reference),
                sample_adjustment=density.sample_adjustment,
                min=float(w.min()),
                max=float(w.max()),
                mean=float(w.mean()),
                trim_quantile=density.trim_quantile,
            ),
            balance=balance,
            weighted_km=_km_summary(cohort, weighted, weighted=True, ci=weighted_ci, band=band),
            provenance=build_provenance(
                cfg.seed,
                cfg.model_dump(mode="json"),
                inputs={"truncated": truncated_csv, "reference": reference_csv},
            ),
        )
        return report

    def write(self, report: AnalysisReport, out_dir: Union[str, Path], plots: bool = False) -> List[Path]:
        out_dir = Path(out_dir)
        written = [write_atomic(out_dir / "report.json", report.to_json())]
        if plots:
            from src.utils.plots import plot_balance, plot_survival_curves

            written.append(plot_survival_curves(self.curves, out_dir / "survival.svg", bands=self.bands))
            written.append(plot_balance(report.balance, out_dir / "balance.svg"))
        logger.info(f"Report written to {out_dir}")
        return written


def analyze(
    truncated_csv: Union[str, Path],
    reference_csv: Union[str, Path],
    confounder_names: Sequence[str],
    config: Optional[AnalysisConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    plots: bool = False,
) -> AnalysisReport:
    """Run the full workflow; writes report.json (and SVGs) when out_dir is given"""
    if config is None:
        config = AnalysisConfig(confounders=list(confounder_names), seed=0)
    elif list(config.confounders) != list(confounder_names):
        config = config.model_copy(update={"confounders": list(confounder_names)})
    pipeline = AnalysisPipeline(config)
    report = pipeline.run(truncated_csv, reference_csv)
    if out_dir is not None:
        pipeline.write(report, out_dir, plots=plots)
    return report
