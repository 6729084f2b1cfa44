"""
Error taxonomy for the load-margin assessment
User-input problems are ValidationErrors; numerical failures derive from NumericalError
"""

from django.core.exceptions import ValidationError


class CaseFormatError(ValidationError):
    """Syntax error in a MATPOWER-style case file."""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message, code='case_format')


class CaseValidationError(ValidationError):
    """Semantically invalid network case (dangling branch, islands, ...)."""

    def __init__(self, message: str):
        super().__init__(message, code='case_invalid')


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class StageError(DomainError):
    """Design matrix is at the wrong stage of the sampling chain."""


class NumericalError(Exception):
    """Base class for numerical failures (CLI exit code 3)."""


class SingularJacobianError(NumericalError):
    pass


class BaseCaseInfeasibleError(NumericalError):
    pass


class CopulaInversionError(NumericalError):
    """Numeric h-function inversion did not converge."""

    def __init__(self, message: str, w=None, v=None):
        self.w = w
        self.v = v
        super().__init__(message)


class FactorizationError(NumericalError):
    """Kernel matrix could not be Cholesky-factorized."""

    def __init__(self, message: str, condition_number: float = None):
        self.condition_number = condition_number
        if condition_number is not None:
            message = f'{message} (condition number {condition_number:.3e})'
        super().__init__(message)


class RankDeficientBasisError(NumericalError):
    pass


class AssessmentAbortedError(NumericalError):
    pass
