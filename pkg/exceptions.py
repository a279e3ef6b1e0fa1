#!/usr/bin/env python3
"""
SCSA Engine - Exceptions Module

All error kinds raised by the tensor engine, the attention modules, the
harness and the CLI. Every exception derives from ScsaError and also from
the closest builtin (ValueError / ArithmeticError) so callers that only know
the builtin hierarchy still catch them.

The CLI maps exceptions to process exit codes with exit_code_for():
    0  ok
    1  validation (configuration, shape, bad flags)
    2  numerical failure (non-finite values, degenerate statistics,
       divergence, failed gradient checks)
    3  I/O (missing files, malformed dumps)
"""

from typing import Final, Optional, Sequence, Tuple

__version__ = "1.0.0"


# ============================================================================
# EXIT CODES
# ============================================================================

EXIT_OK: Final[int] = 0
EXIT_VALIDATION: Final[int] = 1
EXIT_NUMERICAL: Final[int] = 2
EXIT_IO: Final[int] = 3


# ============================================================================
# EXCEPTION HIERARCHY
# ============================================================================

class ScsaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ScsaError, ValueError):
    """A tensor rank or extent does not match what an operation requires."""


class ConfigurationError(ScsaError, ValueError):
    """
    A configuration value is invalid.

    Attributes:
        key_path: Dotted path of the offending key (e.g. "scsa.pcsa.heads"),
                  or None when the error is not tied to a config file key.
    """

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.detail = message
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)

    def under(self, prefix: str) -> "ConfigurationError":
        """Return the same error with its key path nested under prefix."""
        if not prefix:
            return self
        path = f"{prefix}.{self.key_path}" if self.key_path else prefix
        return ConfigurationError(self.detail, path)


class NumericalError(ScsaError, ArithmeticError):
    """Base class for numerical failures."""


class DegenerateStatisticsError(NumericalError):
    """Batch statistics requested over fewer than two elements."""


class NonFiniteError(NumericalError):
    """
    NaN or Inf encountered.

    Attributes:
        coordinates: Flat or multi-dimensional indices of offending values
                     (truncated to the first few for readability).
    """

    def __init__(self, message: str, coordinates: Sequence[Tuple[int, ...]] = ()):
        self.coordinates = list(coordinates)
        if self.coordinates:
            shown = ", ".join(str(c) for c in self.coordinates[:8])
            more = "" if len(self.coordinates) <= 8 else f" (+{len(self.coordinates) - 8} more)"
            message = f"{message} at {shown}{more}"
        super().__init__(message)


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")


class GradcheckFailure(NumericalError):
    """One or more gradient checks exceeded their tolerance."""


class DumpFormatError(ScsaError, OSError):
    """A tensor dump or checkpoint file is malformed."""


# ============================================================================
# EXIT CODE MAPPING
# ============================================================================

def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        exc: The exception that ended a command

    Returns:
        int: 1 for validation errors, 2 for numerical errors, 3 for I/O
    """
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (OSError, DumpFormatError)):
        return EXIT_IO
    return EXIT_VALIDATION
