"""Exception types shared across the package."""


class GspdeError(Exception):
    """Base class for all errors raised by gspde."""


class DomainError(GspdeError, ValueError):
    """A parameter lies outside the admissible range of a constructor."""


class QuadratureError(GspdeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class DimensionMismatch(GspdeError, ValueError):
    """Two objects that must share a coefficient space do not."""


class FactorizationError(GspdeError):
    """A covariance matrix is indefinite beyond jitter repair."""


class InnerSolveError(GspdeError):
    """The implicit time step did not converge within the iteration budget."""

    def __init__(self, step: int, residual: float, message: str | None = None):
        self.step = step
        self.residual = residual
        super().__init__(
            message or f"inner solve failed at step {step}: residual {residual:.3e}"
        )


class ContractError(GspdeError):
    """The time step violates dt * max(0, c) < 1 for the declared constant c."""


class RangeError(GspdeError, ValueError):
    """A noise path has components outside the admissible coefficient space."""


class ConfigError(GspdeError, ValueError):
    """An experiment configuration failed validation.

    ``field`` carries the dotted path of the offending entry so CLI error
    messages can point at it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
