"""Exception hierarchy for chaoscope.

The CLI maps `ConfigError` to exit code 2 and `NumericalError` to exit code 1.
"""

from typing import Any


class ChaoscopeError(Exception):
    """Base class for all chaoscope errors."""


class ConfigError(ChaoscopeError):
    """Invalid configuration, unknown key, or missing file."""


class NumericalError(ChaoscopeError):
    """A computation produced an unusable numerical result."""


class NonFiniteStateError(NumericalError):
    """A state became NaN or infinite."""

    def __init__(self, message: str = "non-finite state", *, step: int | None = None) -> None:
        """Store the step index at which the state stopped being finite."""
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class DegenerateBasisError(NumericalError):
    """Perturbation vectors lost linear independence."""

    def __init__(self, message: str = "degenerate perturbation set") -> None:
        """Create the error with the canonical message."""
        super().__init__(message)


class NotDifferentiableError(NumericalError):
    """A derivative was requested at a declared non-smooth point."""


class NonFiniteLossError(NumericalError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, *, diagnostics: dict[str, Any]) -> None:
        """Keep the diagnostics dump next to the message."""
        self.diagnostics = diagnostics
        super().__init__(message)


class PolicyError(ChaoscopeError, ValueError):
    """Policy evaluated with the wrong shapes or without a sampler."""


class WeightFileError(ConfigError):
    """Malformed policy weight file."""

    def __init__(self, message: str, *, line: int | None = None) -> None:
        """Prefix the message with the offending line number."""
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
