"""
CSV ingestion and emission for cohorts.

Expected columns (names remappable through `schema_mapping`):
    entry_time, time, event (0/1), weight (optional), arm (optional)
All remaining columns are covariates. UTF-8, comma-delimited, '.' decimals.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.cohort.models import Arm, Cohort
from src.utils.errors import ConfigError, MissingColumn, ParseError, ValidationError
from src.utils.io import write_atomic

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {
    "entry_time": "entry_time",
    "time": "time",
    "event": "event",
    "weight": "weight",
    "arm": "arm",
}
REQUIRED_FIELDS = ("entry_time", "time", "event")

_EVENT_VALUES = {"0": False, "1": True}
_ARM_VALUES = {
    "reference": True,
    "truncated": False,
    "1": True,
    "0": False,
}


def _read_raw(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ParseError(1, "missing header row") from None
    # Line numbers as seen in the file: header is line 1
    raw.index = pd.RangeIndex(2, len(raw) + 2)
    return raw


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(line, f"column '{column}': cannot parse '{value}' as a number") from None


def _parse_choice(value: str, choices: Dict[str, bool], column: str, line: int) -> bool:
    key = value.strip().lower()
    if key not in choices:
        allowed = "/".join(choices)
        raise ParseError(line, f"column '{column}': expected one of {allowed}, got '{value}'")
    return choices[key]


def load_cohort_csv(
    path: Union[str, Path],
    schema_mapping: Optional[Dict[str, str]] = None,
    covariates: Optional[Sequence[str]] = None,
    require_truncation_consistency: bool = True,
    filter_expr: Optional[str] = None,
) -> Cohort:
    """Load a cohort CSV, reporting bad rows with their line number"""
    schema = {**DEFAULT_SCHEMA, **(schema_mapping or {})}
    raw = _read_raw(path)

    for field in REQUIRED_FIELDS:
        if schema[field] not in raw.columns:
            raise MissingColumn(f"{path}: missing required column '{schema[field]}'")

    reserved = {schema[f] for f in DEFAULT_SCHEMA}
    if covariates is None:
        covariate_names = [c for c in raw.columns if c not in reserved]
    else:
        covariate_names = list(covariates)
        missing = [c for c in covariate_names if c not in raw.columns]
        if missing:
            raise MissingColumn(f"{path}: missing covariate column(s) {', '.join(missing)}")

    rows: List[dict] = []
    for line, row in raw.iterrows():
        parsed = {
            "entry_time": _parse_float(row[schema["entry_time"]], schema["entry_time"], line),
            "time": _parse_float(row[schema["time"]], schema["time"], line),
            "event": _parse_choice(row[schema["event"]], _EVENT_VALUES, schema["event"], line),
            "weight": 1.0,
            "reference": False,
        }
        if schema["weight"] in raw.columns and row[schema["weight"]] != "":
            parsed["weight"] = _parse_float(row[schema["weight"]], schema["weight"], line)
        if schema["arm"] in raw.columns and row[schema["arm"]] != "":
            parsed["reference"] = _parse_choice(row[schema["arm"]], _ARM_VALUES, schema["arm"], line)
        for name in covariate_names:
            parsed[name] = _parse_float(row[name], name, line)
        rows.append(parsed)

    frame = pd.DataFrame(rows, index=raw.index)
    if filter_expr:
        before = len(frame)
        try:
            frame = frame.query(filter_expr)
        except Exception as e:
            raise ConfigError("filter", f"cannot apply '{filter_expr}': {e}") from None
        logger.info(f"Filter '{filter_expr}' kept {len(frame)}/{before} rows")

    for line, row in frame.iterrows():
        reason = _row_problem(row, require_truncation_consistency)
        if reason:
            raise ValidationError(line, reason)

    if frame.empty:
        raise ValidationError(1, "no data rows")

    cohort = Cohort.from_arrays(
        entry=frame["entry_time"].to_numpy(float),
        time=frame["time"].to_numpy(float),
        event=frame["event"].to_numpy(bool),
        covariates=frame[covariate_names].to_numpy(float) if covariate_names else None,
        weight=frame["weight"].to_numpy(float),
        reference=frame["reference"].to_numpy(bool),
        covariate_names=covariate_names,
        require_truncation_consistency=require_truncation_consistency,
    )
    logger.info(f"Loaded {cohort.n} records ({cohort.n_events} events) from {path}")
    return cohort


def _row_problem(row: pd.Series, require_truncation_consistency: bool) -> Optional[str]:
    values = row.drop(labels=["event", "reference"]).to_numpy(float)
    if not np.all(np.isfinite(values)):
        return "non-finite value"
    if row["entry_time"] < 0:
        return f"entry_time {row['entry_time']:g} is negative"
    if row["time"] <= 0:
        return f"time {row['time']:g} is not positive"
    if row["weight"] <= 0:
        return f"weight {row['weight']:g} is not positive"
    if require_truncation_consistency and row["time"] <= row["entry_time"]:
        return f"time {row['time']:g} <= entry_time {row['entry_time']:g}"
    return None


def load_covariates_csv(path: Union[str, Path], names: Sequence[str]) -> np.ndarray:
    """Read only the named confounder columns (reference samples need nothing else)"""
    raw = _read_raw(path)
    missing = [n for n in names if n not in raw.columns]
    if missing:
        raise MissingColumn(f"{path}: missing confounder column(s) {', '.join(missing)}")
    matrix = np.empty((len(raw), len(names)))
    for i, (line, row) in enumerate(raw.iterrows()):
        for j, name in enumerate(names):
            value = _parse_float(row[name], name, line)
            if not np.isfinite(value):
                raise ValidationError(line, f"column '{name}': non-finite value")
            matrix[i, j] = value
    if matrix.shape[0] == 0:
        raise ValidationError(1, "no data rows")
    return matrix


def cohort_to_frame(cohort: Cohort) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "entry_time": cohort.entry,
            "time": cohort.time,
            "event": cohort.event.astype(int),
            "weight": cohort.weight,
            "arm": np.where(cohort.reference, Arm.REFERENCE.value, Arm.TRUNCATED.value),
        }
    )
    for j, name in enumerate(cohort.covariate_names):
        frame[name] = cohort.covariates[:, j]
    return frame


def write_cohort_csv(cohort: Cohort, path: Union[str, Path]) -> Path:
    frame = cohort_to_frame(cohort)
    # repr gives the shortest string that round-trips exactly
    for column in frame.columns:
        if frame[column].dtype.kind == "f":
            frame[column] = frame[column].map(lambda v: repr(float(v)))
    return write_atomic(path, frame.to_csv(index=False, lineterminator="\n"))
