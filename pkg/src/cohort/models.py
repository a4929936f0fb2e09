"""
Cohort data model for left-truncated, right-censored survival data.

A Cohort stores its records column-wise as numpy arrays; SurvivalRecord is
the row view used at the edges (CSV, tests, ad-hoc construction).
"""

import logging
from enum import Enum
from typing import Annotated, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PlainSerializer

from src.utils.errors import (
    CovariateNotFound,
    EmptyCohort,
    InconsistentArity,
    NonFiniteValue,
    TruncationViolation,
)

logger = logging.getLogger(__name__)

# Reserved design-matrix names
ARM_COLUMN = "trt"
ENTRY_COLUMN = "entry_time"

# numpy arrays serialise as plain lists
Array = Annotated[np.ndarray, PlainSerializer(lambda a: np.asarray(a).tolist(), return_type=list)]


class Arm(str, Enum):
    REFERENCE = "reference"
    TRUNCATED = "truncated"


class SurvivalRecord(BaseModel):
    """One subject: entry time E, observed time Y, event flag, covariates Z"""

    model_config = ConfigDict(frozen=True)

    entry_time: float = 0.0
    observed_time: float
    event: bool
    covariates: List[float] = []
    weight: float = 1.0
    arm: Arm = Arm.TRUNCATED


class Cohort(BaseModel):
    """Validated, immutable column store of survival records"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    entry: Array
    time: Array
    event: Array
    covariates: Array
    weight: Array
    reference: Array
    covariate_names: List[str]

    # --- construction ----------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        entry: Sequence[float],
        time: Sequence[float],
        event: Sequence[bool],
        covariates: Optional[np.ndarray] = None,
        weight: Optional[Sequence[float]] = None,
        reference: Optional[Sequence[bool]] = None,
        covariate_names: Optional[Sequence[str]] = None,
        require_truncation_consistency: bool = True,
    ) -> "Cohort":
        time = np.asarray(time, dtype=float).ravel()
        n = time.size
        if n == 0:
            raise EmptyCohort("cohort has no records")

        entry = np.asarray(entry, dtype=float).ravel()
        event = np.asarray(event, dtype=bool).ravel()
        if covariates is None:
            covariates = np.empty((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(n, -1)
        weight = np.ones(n) if weight is None else np.asarray(weight, dtype=float).ravel()
        reference = np.zeros(n, dtype=bool) if reference is None else np.asarray(reference, dtype=bool).ravel()

        for name, column in (("entry_time", entry), ("event", event), ("weight", weight), ("arm", reference)):
            if column.size != n:
                raise InconsistentArity(f"{name} has {column.size} values for {n} records")
        if covariates.shape[0] != n:
            raise InconsistentArity(f"covariates have {covariates.shape[0]} rows for {n} records")

        names = list(covariate_names) if covariate_names is not None else [
            f"z{j + 1}" for j in range(covariates.shape[1])
        ]
        if len(names) != covariates.shape[1]:
            raise InconsistentArity(
                f"{len(names)} covariate names for {covariates.shape[1]} covariate columns"
            )

        for name, column in (("entry_time", entry), ("observed_time", time), ("weight", weight)):
            bad = np.flatnonzero(~np.isfinite(column))
            if bad.size:
                raise NonFiniteValue(f"record {bad[0]}: {name} is not finite")
        bad_rows = np.flatnonzero(~np.isfinite(covariates).all(axis=1))
        if bad_rows.size:
            raise NonFiniteValue(f"record {bad_rows[0]}: covariates are not finite")

        bad = np.flatnonzero(entry < 0)
        if bad.size:
            raise TruncationViolation(f"record {bad[0]}: negative entry_time {entry[bad[0]]:g}")
        bad = np.flatnonzero(time <= 0)
        if bad.size:
            raise NonFiniteValue(f"record {bad[0]}: observed_time must be positive, got {time[bad[0]]:g}")
        bad = np.flatnonzero(weight <= 0)
        if bad.size:
            raise NonFiniteValue(f"record {bad[0]}: weight must be positive, got {weight[bad[0]]:g}")

        if require_truncation_consistency:
            bad = np.flatnonzero(time <= entry)
            if bad.size:
                i = bad[0]
                raise TruncationViolation(
                    f"record {i}: observed_time {time[i]:g} <= entry_time {entry[i]:g}"
                )

        return cls(
            entry=entry,
            time=time,
            event=event,
            covariates=covariates,
            weight=weight,
            reference=reference,
            covariate_names=names,
        )

    # --- views -----------------------------------------------------------

    @property
    def n(self) -> int:
        return int(self.time.size)

    @property
    def arity(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def has_delayed_entry(self) -> bool:
        return bool(np.any(self.entry > 0))

    def records(self) -> Iterator[SurvivalRecord]:
        for i in range(self.n):
            yield SurvivalRecord(
                entry_time=float(self.entry[i]),
                observed_time=float(self.time[i]),
                event=bool(self.event[i]),
                covariates=self.covariates[i].tolist(),
                weight=float(self.weight[i]),
                arm=Arm.REFERENCE if self.reference[i] else Arm.TRUNCATED,
            )

    def column(self, name: str) -> np.ndarray:
        if name == ARM_COLUMN:
            return self.reference.astype(float)
        if name == ENTRY_COLUMN:
            return self.entry.copy()
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise CovariateNotFound(
                f"covariate '{name}' not in cohort (have {', '.join(self.covariate_names) or 'none'})"
            ) from None
        return self.covariates[:, j].copy()

    def design(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(name) for name in names])

    # --- derivations -----------------------------------------------------

    def subset(self, mask: np.ndarray) -> "Cohort":
        mask = np.asarray(mask)
        return Cohort.from_arrays(
            entry=self.entry[mask],
            time=self.time[mask],
            event=self.event[mask],
            covariates=self.covariates[mask],
            weight=self.weight[mask],
            reference=self.reference[mask],
            covariate_names=self.covariate_names,
            require_truncation_consistency=False,
        )

    def with_weights(self, weights: Sequence[float]) -> "Cohort":
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.n,):
            raise InconsistentArity(f"{weights.size} weights for {self.n} records")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise NonFiniteValue("weights must be positive and finite")
        return self.model_copy(update={"weight": weights})

    def without_entry(self) -> "Cohort":
        """Same cohort with every entry time set to 0 (no delayed entry)"""
        return self.model_copy(update={"entry": np.zeros(self.n)})


def validate_cohort(
    records: Sequence[SurvivalRecord],
    require_truncation_consistency: bool = True,
    covariate_names: Optional[Sequence[str]] = None,
) -> Cohort:
    """Check every cohort invariant and build the column store"""
    if not records:
        raise EmptyCohort("cohort has no records")

    arity = len(records[0].covariates)
    for i, record in enumerate(records):
        if len(record.covariates) != arity:
            raise InconsistentArity(
                f"record {i} has {len(record.covariates)} covariates, expected {arity}"
            )

    covariates = np.array([r.covariates for r in records], dtype=float).reshape(len(records), arity)
    cohort = Cohort.from_arrays(
        entry=[r.entry_time for r in records],
        time=[r.observed_time for r in records],
        event=[r.event for r in records],
        covariates=covariates,
        weight=[r.weight for r in records],
        reference=[r.arm == Arm.REFERENCE for r in records],
        covariate_names=covariate_names,
        require_truncation_consistency=require_truncation_consistency,
    )
    logger.debug(f"Validated cohort: {cohort.n} records, {cohort.n_events} events, arity {arity}")
    return cohort
