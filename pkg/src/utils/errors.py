"""
Exception hierarchy for the truncation survival analyzer.

Three families map onto CLI exit codes: data problems (2), numerical
failures (3) and configuration/usage problems (1).
"""

from typing import Optional


class TruncSurvError(Exception):
    """Base class for every error raised by this package"""

    exit_code = 1


# --- Data errors -----------------------------------------------------------

class DataError(TruncSurvError):
    exit_code = 2


class EmptyCohort(DataError):
    pass


class InconsistentArity(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class TruncationViolation(DataError):
    """A record with observed_time <= entry_time in a truncated cohort"""


class ArityMismatch(DataError):
    pass


class CovariateNotFound(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class PreconditionError(DataError):
    pass


class MissingColumn(DataError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(DataError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


# --- Numerical errors --------------------------------------------------------

class EstimationError(TruncSurvError):
    exit_code = 3


class ZeroRiskMass(EstimationError):
    def __init__(self, time: float):
        self.time = time
        super().__init__(f"event at t={time:g} has zero at-risk weight")


class NonConvergence(EstimationError):
    pass


class MonotoneLikelihood(EstimationError):
    """Coefficient diverging; usually separation in the design"""


class RankDeficientDesign(EstimationError):
    pass


class SeparationDetected(EstimationError):
    pass


class SingleClass(EstimationError):
    pass


class DegenerateResample(EstimationError):
    pass


class UnachievableTarget(EstimationError):
    pass


class BracketFailure(EstimationError):
    pass


class AllFailed(EstimationError):
    pass


# --- Configuration ---------------------------------------------------------

class ConfigError(TruncSurvError):
    exit_code = 1

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class StageError(TruncSurvError):
    """Wraps a failure inside a named pipeline stage"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


def exit_code_for(error: Optional[BaseException]) -> int:
    if error is None:
        return 0
    return getattr(error, "exit_code", 1)
