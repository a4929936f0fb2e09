#!/usr/bin/env python3
"""
Truncation Survival Analyzer - command line entry point

Subcommands:
  km               Kaplan-Meier curve (risk-set adjusted by default)
  cox              Cox proportional hazards fit
  test-truncation  Marginal / conditional test of entry-time dependence
  weights          Density-ratio weights for a truncated cohort
  balance          Covariate balance of a (weighted) truncated cohort
  analyze          Full workflow, JSON report and optional SVG plots
  simulate         Simulation study over a scenario grid

Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.cohort.loader import cohort_to_frame, load_cohort_csv, load_covariates_csv
from src.estimators.bootstrap import km_bootstrap_ci
from src.estimators.cox import Ties, fit_cox, hazard_ratio_summary, test_conditional_dependence, test_marginal_dependence
from src.estimators.kaplan_meier import fit_km, median_survival
from src.pipelines.analysis_pipeline import AnalysisConfig, analyze
from src.pipelines.simulation_pipeline import simulate
from src.utils.errors import ConfigError, TruncSurvError, exit_code_for
from src.utils.io import canonical_json, write_atomic
from src.utils.settings import get_settings
from src.weighting.balance import DEFAULT_THRESHOLD, balance_report
from src.weighting.density_ratio import estimate_weights

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _names(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> CliParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (drawn and recorded when absent)")
    common.add_argument("--out", default=None, help="Output file (directory for analyze/simulate)")
    common.add_argument("--format", choices=["json", "csv"], default="json")
    common.add_argument("--plots", action="store_true", help="Write SVG plots")
    common.add_argument("--bootstrap-n", type=int, default=None, help="Bootstrap resamples")
    common.add_argument("--ties", choices=[t.value for t in Ties], default=Ties.BRESLOW.value)
    common.add_argument("--filter", dest="filter_expr", default=None, help="pandas query applied to the input rows")
    common.add_argument(
        "--require-truncation-consistency",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Reject rows with time <= entry_time",
    )

    parser = CliParser(description="Survival analysis under left truncation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    km = sub.add_parser("km", parents=[common], help="Kaplan-Meier curve")
    km.add_argument("input")
    km.add_argument("--naive", action="store_true", help="Ignore delayed entry")
    km.add_argument("--weighted", action="store_true", help="Use the weight column")

    cox = sub.add_parser("cox", parents=[common], help="Cox proportional hazards")
    cox.add_argument("input")
    cox.add_argument("--covariates", type=_names, default=None, help="Comma-separated names (trt, entry_time allowed)")
    cox.add_argument("--naive", action="store_true", help="Ignore delayed entry")
    cox.add_argument("--weighted", action="store_true", help="Use the weight column")
    cox.add_argument("--level", type=float, default=0.95)

    test = sub.add_parser("test-truncation", parents=[common], help="Entry-time dependence tests")
    test.add_argument("input")
    test.add_argument("--conditional", action="store_true")
    test.add_argument("--confounders", type=_names, default=[])

    weights = sub.add_parser("weights", parents=[common], help="Density-ratio weights")
    weights.add_argument("truncated")
    weights.add_argument("reference")
    weights.add_argument("--confounders", type=_names, required=True)
    weights.add_argument("--trim-quantile", type=float, default=None)

    balance = sub.add_parser("balance", parents=[common], help="Covariate balance diagnostics")
    balance.add_argument("truncated")
    balance.add_argument("reference")
    balance.add_argument("--confounders", type=_names, required=True)
    balance.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)

    an = sub.add_parser("analyze", parents=[common], help="Full analysis workflow")
    an.add_argument("truncated")
    an.add_argument("reference")
    an.add_argument("--confounders", type=_names, required=True)
    an.add_argument("--trim-quantile", type=float, default=None)
    an.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    an.add_argument("--level", type=float, default=0.95)

    sim = sub.add_parser("simulate", parents=[common], help="Simulation study")
    sim.add_argument("config", nargs="?", default="config/simulation_grid.json")

    return parser


def _emit(args, payload: dict, table: pd.DataFrame) -> None:
    text = canonical_json(payload) if args.format == "json" else table.to_csv(index=False, lineterminator="\n")
    if args.out:
        write_atomic(args.out, text)
        logger.info(f"Wrote {args.out}")
    else:
        sys.stdout.write(text)


def _plot_path(args) -> Optional[Path]:
    """SVG written next to --out; only km and balance have plot output"""
    if not args.plots:
        return None
    if args.command not in ("km", "balance"):
        raise ConfigError("plots", f"{args.command} has no plot output")
    if not args.out:
        raise ConfigError("plots", "--plots needs --out to place the SVG")
    return Path(args.out).with_suffix(".svg")


def _load(args, path: str):
    return load_cohort_csv(
        path,
        require_truncation_consistency=args.require_truncation_consistency,
        filter_expr=args.filter_expr,
    )


def cmd_km(args) -> int:
    plot_path = _plot_path(args)
    cohort = _load(args, args.input)
    weights = cohort.weight if args.weighted else np.ones(cohort.n)
    curve = fit_km(cohort, risk_set_adjust=not args.naive, weights=weights)
    median = median_survival(curve)
    payload = {"median": median, "risk_set_adjusted": curve.risk_set_adjusted, "weighted": args.weighted}
    if median is not None and not args.naive:
        ci = km_bootstrap_ci(cohort, weights=weights, n_resamples=args.bootstrap_n, seed=args.seed)
        payload["median_ci"] = ci.wrapping_estimate().model_dump(mode="json")
    table = pd.DataFrame({
        "time": curve.event_times,
        "survival": curve.survival,
        "at_risk": curve.at_risk_mass,
        "events": curve.n_events_mass,
    })
    payload["curve"] = table.to_dict(orient="list")
    _emit(args, payload, table)
    if plot_path is not None:
        from src.utils.plots import plot_survival_curves

        label = "weighted" if args.weighted else ("naive" if args.naive else "adjusted")
        plot_survival_curves({label: curve}, plot_path)
    return 0


def cmd_cox(args) -> int:
    _plot_path(args)
    cohort = _load(args, args.input)
    covariates = args.covariates or cohort.covariate_names
    weights = cohort.weight if args.weighted else np.ones(cohort.n)
    fit = fit_cox(cohort, covariates, weights=weights, ties=Ties(args.ties), risk_set_adjust=not args.naive)
    rows = [hr.model_dump(mode="json") for hr in hazard_ratio_summary(fit, level=args.level)]
    payload = {
        "coefficients": rows,
        "log_partial_likelihood": fit.log_partial_likelihood,
        "n_iterations": fit.n_iterations,
        "n_events": fit.n_events,
        "risk_set_adjusted": fit.risk_set_adjusted,
    }
    _emit(args, payload, pd.DataFrame(rows))
    return 0


def cmd_test_truncation(args) -> int:
    _plot_path(args)
    if args.conditional and not args.confounders:
        raise ConfigError("confounders", "--conditional needs --confounders")
    cohort = _load(args, args.input)
    if args.conditional:
        result = test_conditional_dependence(cohort, args.confounders, ties=Ties(args.ties))
    else:
        result = test_marginal_dependence(cohort, ties=Ties(args.ties))
    payload = result.model_dump(mode="json")
    _emit(args, payload, pd.DataFrame([{**payload, "adjusted_for": ",".join(result.adjusted_for)}]))
    return 0


def cmd_weights(args) -> int:
    _plot_path(args)
    cohort = _load(args, args.truncated)
    density = estimate_weights(
        cohort.design(args.confounders),
        load_covariates_csv(args.reference, args.confounders),
        trim_quantile=args.trim_quantile,
        names=args.confounders,
    )
    payload = {
        "weights": density.weights.tolist(),
        "sample_adjustment": density.sample_adjustment,
        "balance": density.balance.model_dump(mode="json"),
    }
    # CSV: the truncated cohort with its weight column replaced, ready for km/cox --weighted
    _emit(args, payload, cohort_to_frame(cohort.with_weights(density.weights)))
    return 0


def cmd_balance(args) -> int:
    plot_path = _plot_path(args)
    cohort = _load(args, args.truncated)
    report = balance_report(
        cohort.design(args.confounders),
        load_covariates_csv(args.reference, args.confounders),
        weights=cohort.weight,
        threshold=args.threshold,
        names=args.confounders,
    )
    if not report.balanced:
        logger.warning(f"Weighted SMD above {args.threshold:g} for: {', '.join(report.flagged)}")
    payload = report.model_dump(mode="json")
    _emit(args, payload, pd.DataFrame(payload["covariates"]))
    if plot_path is not None:
        from src.utils.plots import plot_balance

        plot_balance(report, plot_path)
    return 0


def cmd_analyze(args) -> int:
    config = AnalysisConfig(
        confounders=args.confounders,
        seed=args.seed,
        bootstrap_resamples=args.bootstrap_n,
        level=args.level,
        ties=Ties(args.ties),
        balance_threshold=args.threshold,
        trim_quantile=args.trim_quantile,
        filter_expr=args.filter_expr,
        require_truncation_consistency=args.require_truncation_consistency,
    )
    analyze(args.truncated, args.reference, args.confounders, config=config, out_dir=args.out or "output", plots=args.plots)
    return 0


def cmd_simulate(args) -> int:
    master_seed = args.seed if args.seed_given else None
    return simulate(args.config, args.out or "output/simulation", plots=args.plots or None, master_seed=master_seed)


COMMANDS = {
    "km": cmd_km,
    "cox": cmd_cox,
    "test-truncation": cmd_test_truncation,
    "weights": cmd_weights,
    "balance": cmd_balance,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    args = build_parser().parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % 2**31)
        logger.info(f"No --seed given; using {args.seed}")
    if args.bootstrap_n is None:
        args.bootstrap_n = settings.bootstrap_resamples

    try:
        return COMMANDS[args.command](args)
    except TruncSurvError as e:
        logger.error(str(e))
        return exit_code_for(e)
    except FileNotFoundError as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
