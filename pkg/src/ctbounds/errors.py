"""Exception and warning types.

Validation errors (bad input, impossible configuration) derive from
:class:`ValidationError`; failures that happen while fitting on valid input
derive from :class:`EstimationError`.  The command-line tool maps the two
families to different exit codes.
"""


class CTBError(Exception):
    """Base class for all package errors."""


class ValidationError(CTBError, ValueError):
    pass


class EstimationError(CTBError, RuntimeError):
    pass


class MissingColumn(ValidationError):
    pass


class NonBinaryFlag(ValidationError):
    pass


class MissingOutcomeForResponder(ValidationError):
    pass


class MissingCovariateCell(ValidationError):
    pass


class PropensityOutOfRange(ValidationError):
    pass


class PropensityMissing(ValidationError):
    pass


class TooFewUnits(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidTrim(ValidationError):
    pass


class DegenerateConditional(ValidationError):
    pass


class NotTreatedResponder(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NonConvergentNuisance(EstimationError):
    pass


class EmptySupport(EstimationError):
    pass


class SingularDesign(EstimationError):
    pass


class CTBWarning(UserWarning):
    """Emitted for recoverable problems (clipping, crossed bounds, ...)."""


class DegenerateTarget(CTBWarning):
    pass


class MonotonicityWarning(CTBWarning):
    pass
