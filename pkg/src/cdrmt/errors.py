"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class CdrmtError(Exception):
    exit_code = 1


class ValidationError(CdrmtError, ValueError):
    exit_code = 3


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class ContractError(ValidationError):
    """A documented precondition was violated by the caller."""


class EmptyExpressionError(ValidationError):
    pass


class InsufficientSetError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericError(CdrmtError, ArithmeticError):
    exit_code = 4


class DeterminismError(NumericError):
    pass


class CheckpointError(CdrmtError, OSError):
    exit_code = 5
    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    code = "bad-magic"


class CheckpointVersionError(CheckpointError):
    code = "bad-version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"
