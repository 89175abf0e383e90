"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and file-format problems
exit with 2, numeric and degenerate-input failures with 3.
"""

from __future__ import annotations


class LaffError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class ConfigError(LaffError, ValueError):
    """Invalid configuration value or combination of values."""

    exit_code = 2


class DimensionError(ConfigError):
    """Two operands disagree on shape."""

    def __init__(self, op: str, left: tuple[int, ...], right: tuple[int, ...]) -> None:
        super().__init__(f"{op}: shape mismatch {left} vs {right}")
        self.left = left
        self.right = right


class FormatError(LaffError, ValueError):
    """Malformed feature, manifest or model file."""

    exit_code = 2

    def __init__(self, path: str, offset: int | str, message: str) -> None:
        super().__init__(f"{path} @ {offset}: {message}")
        self.path = path
        self.offset = offset


class DegenerateInputError(LaffError, ValueError):
    """Input that admits no meaningful result (zero vector, empty stream, ...)."""


class NumericError(LaffError, ArithmeticError):
    """Non-finite values or divergence during training."""


class UnsupportedOperationError(LaffError):
    """Operation not defined for the configured model."""

    exit_code = 2
