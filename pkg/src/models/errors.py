"""
Exception hierarchy shared by the models and controllers.
"""

from typing import Optional


class IdentificationError(Exception):
    """Base exception for all RotIR errors."""
    pass


class InvalidArgumentError(IdentificationError, ValueError):
    """Raised when an operation receives arguments outside its contract."""
    pass


class ConfigValidationError(InvalidArgumentError):
    """Raised when an experiment configuration fails validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__(f"Configuration validation failed: {'; '.join(self.problems)}")

    def __reduce__(self):
        return (self.__class__, (self.problems,))


class NumericalFailureError(IdentificationError, ArithmeticError):
    """Raised when a computation produces non-finite values."""

    def __init__(
        self,
        message: str,
        frame: Optional[int] = None,
        running_loss: Optional[float] = None
    ):
        """
        Initialize the failure.

        Args:
            message: Description of the failure
            frame: Time index at which the failure occurred
            running_loss: Accumulated loss up to the failing frame
        """
        self.message = message
        self.frame = frame
        self.running_loss = running_loss
        context = []
        if frame is not None:
            context.append(f"frame={frame}")
        if running_loss is not None:
            context.append(f"running_loss={running_loss!r}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")

    def __reduce__(self):
        # Survives the trip back from worker processes with its context
        return (self.__class__, (self.message, self.frame, self.running_loss))


class InternalError(IdentificationError, RuntimeError):
    """Raised when internal bookkeeping is inconsistent (e.g. a mismatched cache)."""
    pass


class ArtifactIOError(IdentificationError, OSError):
    """Raised when reading or writing an artifact fails."""

    def __init__(self, message: str, path=None):
        self.message = message
        self.path = str(path) if path is not None else None
        super().__init__(f"{message}: {self.path}" if self.path else message)

    def __reduce__(self):
        return (self.__class__, (self.message, self.path))
