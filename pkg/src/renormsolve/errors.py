"""Exception hierarchy shared by all modules.

Every failure raised on purpose by the library derives from
:class:`RenormError`; the CLI maps each subclass to one exit code.
"""

from __future__ import annotations

import copy


class RenormError(Exception):
    """Base class for library errors."""

    exit_code = 1
    kind = "internal"

    def in_context(self, prefix: str) -> "RenormError":
        """Copy of this error, same type and payload, with ``prefix`` prepended to the message."""
        err = copy.copy(self)
        err.args = (f"{prefix}: {self}",) + self.args[1:]
        return err


class InvalidParameterError(RenormError, ValueError):
    exit_code = 2
    kind = "invalid-parameter"


class InvalidDomainError(InvalidParameterError):
    kind = "invalid-domain"


class ConfigError(InvalidParameterError):
    """Schema or value problem in a run configuration."""

    kind = "config"

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class NumericError(RenormError, ArithmeticError):
    """A non-finite value appeared during quadrature or assembly."""

    exit_code = 4
    kind = "numeric"

    def __init__(self, message: str, element: int | None = None):
        if element is not None:
            message = f"{message} (element {element})"
        super().__init__(message)
        self.element = element


class ValidationError(RenormError):
    """A structural assumption on the operator or the data is violated."""

    exit_code = 6
    kind = "validation"


class CompatibilityError(ValidationError):
    """The datum does not integrate to zero although no zero-order term is present."""

    kind = "compatibility"


class NonConvergenceError(RenormError):
    """Newton or Picard iteration failed; carries the iterate history."""

    exit_code = 3
    kind = "non-convergence"

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = list(history or [])


class ReportIOError(RenormError, OSError):
    exit_code = 5
    kind = "io"
