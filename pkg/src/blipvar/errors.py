"""Exception hierarchy. Each family maps to a CLI exit code."""


class BlipvarError(Exception):
    exit_code = 1


class InputFileError(BlipvarError):
    """File missing or unreadable."""

    exit_code = 2


class ValidationError(BlipvarError, ValueError):
    exit_code = 3


class MissingColumnError(ValidationError):
    pass


class NonNumericError(ValidationError):
    pass


class MissingValueError(ValidationError):
    pass


class NonBinaryTreatmentError(ValidationError):
    pass


class OutOfRangeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericError(BlipvarError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericError):
    pass


class SingularMatrixError(NumericError):
    pass


class LearnerFailure(NumericError):
    pass
