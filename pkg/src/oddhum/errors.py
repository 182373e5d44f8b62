"""Exception hierarchy.

Every error carries a stable ``error_class`` string so that the CLI, sweeps
and CI logs can triage failures without parsing messages.
"""

from __future__ import annotations


class OddHumError(Exception):
    error_class = "ODDHUM_ERROR"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"error_class": self.error_class, "message": str(self), "details": self.details}


class ParameterError(OddHumError, ValueError):
    error_class = "PARAMETER_ERROR"


class DomainError(OddHumError, ValueError):
    error_class = "DOMAIN_ERROR"


class GeometryError(OddHumError, ValueError):
    error_class = "GEOMETRY_ERROR"


class ShapeError(OddHumError, ValueError):
    error_class = "SHAPE_ERROR"


class WeightSingularityError(OddHumError, ZeroDivisionError):
    error_class = "WEIGHT_SINGULARITY"


class ConstraintError(OddHumError, ValueError):
    """One or more exponent constraints are violated.

    ``violations`` lists every failed inequality, each as ``"<name>: <inequality> violated"``.
    """

    error_class = "CONSTRAINT_VIOLATION"

    def __init__(self, violations: list[str], **details):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations), violations=self.violations, **details)


class BlowUpError(OddHumError, RuntimeError):
    error_class = "BLOW_UP_GUARD"


class OptimizationError(OddHumError, RuntimeError):
    error_class = "OPTIMIZATION_FAILURE"


class ControllabilityResidualError(OddHumError, RuntimeError):
    error_class = "CONTROLLABILITY_RESIDUAL"


class SmallnessError(OddHumError, RuntimeError):
    error_class = "SMALLNESS_VIOLATION"


class FixedPointError(OddHumError, RuntimeError):
    error_class = "FIXED_POINT_FAILURE"


class PreconditionError(OddHumError, ValueError):
    error_class = "PRECONDITION_FAILED"


class OddCouplingError(PreconditionError):
    """Cascade requested with an even coupling power."""

    error_class = "N2_MUST_BE_ODD"


class ConfigError(OddHumError, ValueError):
    error_class = "CONFIG_INVALID"


class StepError(OddHumError, RuntimeError):
    """Wraps a failure inside one step of the cascade pipeline."""

    def __init__(self, step: str, cause: OddHumError):
        self.step = step
        self.cause = cause
        self.error_class = cause.error_class
        super().__init__(f"[{step}] {cause}", step=step, cause=cause.to_dict())
