"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericFailure -> 3,
I/O problems (plain OSError) -> 4.
"""


class RflabError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(RflabError):
    """Invalid or inconsistent configuration (bad keys, missing hook, ...)."""


class ShapeMismatch(RflabError):
    """Operands with incompatible shapes."""


class DomainError(RflabError):
    """Argument outside the mathematically valid range (e.g. t=0)."""


class NumericFailure(RflabError):
    """A numeric computation produced NaN/Inf or diverged."""


class IntegrationFailure(NumericFailure):
    """Non-finite state encountered while integrating an ODE trajectory."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


class TrainingFailure(NumericFailure):
    """Training aborted (NaN loss or divergence)."""

    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")
