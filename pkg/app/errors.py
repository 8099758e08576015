"""Exception hierarchy shared by the engine and the command line.

Every error carries the process exit code the CLI should return and a
``details()`` mapping that is merged into the machine-readable error JSON.
"""

from typing import Any, Optional


class LotError(Exception):
    """Base class for all engine errors"""

    exit_code = 2

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self._details = details

    def details(self) -> dict[str, Any]:
        return dict(self._details)


class ConfigError(LotError):
    """Malformed or inconsistent run configuration"""

    exit_code = 1

    def __init__(self, message: str, key: Optional[str] = None, **details: Any):
        super().__init__(message, key=key, **details)
        self.key = key


class InputError(LotError):
    """Invalid measures, shapes or queries"""

    exit_code = 1


class DomainError(LotError):
    """A point lies outside the chart domain of its manifold"""


class AmbiguityError(LotError):
    """A quantity is not uniquely defined (cut locus, antipodal pair, c-transform tie)"""


class NumericalError(LotError):
    """A numerical routine failed to reach its tolerance"""

    def __init__(self, message: str, residual: Optional[float] = None, **details: Any):
        super().__init__(message, residual=residual, **details)
        self.residual = residual


class ConvergenceError(NumericalError):
    """Shooting and direct minimization both failed"""

    def __init__(
        self,
        message: str,
        residual: Optional[float] = None,
        index: Optional[tuple[int, int]] = None,
        **details: Any,
    ):
        super().__init__(message, residual=residual, index=list(index) if index is not None else None, **details)
        self.index = index


class IntegrationError(NumericalError):
    """A flow step produced a non-finite state"""

    def __init__(self, message: str, step: int, time: float, last_norm: float, **details: Any):
        super().__init__(message, step=step, time=time, last_norm=last_norm, **details)
        self.step = step
        self.time = time


class PreconditionError(LotError):
    """A certificate precondition does not hold"""
