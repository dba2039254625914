"""Exception hierarchy shared across the package."""


class ProbekitError(Exception):
    """Base class for all package errors."""


class ShapeError(ProbekitError, ValueError):
    """Operand dimensions are incompatible."""


class NumericError(ProbekitError, ArithmeticError):
    """A non-finite value entered or left a computation."""


class ContractError(ProbekitError):
    """A call violated a documented precondition."""


class OracleError(ProbekitError):
    """A test oracle could not be evaluated reliably."""


class ConfigError(ProbekitError, ValueError):
    """Invalid or unknown configuration."""


class DependencyError(ProbekitError):
    """A pipeline stage was requested before its upstream stages ran."""

    def __init__(self, stage: str, missing: list[str]):
        self.stage = stage
        self.missing = list(missing)
        super().__init__(f"stage {stage!r} requires upstream stage(s): {', '.join(self.missing)}")


class TrainingError(ProbekitError, ArithmeticError):
    """Training diverged (loss became non-finite)."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")


class FormatError(ProbekitError, ValueError):
    """A binary artifact could not be decoded."""
