"""Exception hierarchy shared across the package."""


class StochSolError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(StochSolError):
    """A model, payoff or configuration violates a precondition."""


class NonFiniteEvaluation(ValidationError):
    """sigma returned a non-finite value at a probe point."""


class GrowthViolation(ValidationError):
    """A payoff exceeds its declared linear-growth bound or its parent payoff."""


class NumericalError(StochSolError):
    """A numerical routine failed to deliver a trustworthy answer."""


class QuadratureFailure(NumericalError):
    """Adaptive quadrature did not converge within its subdivision cap."""


class ClockOverflow(NumericalError):
    """The time-change clock could not be advanced to the horizon."""


class NonFiniteState(NumericalError):
    """A simulated path left the finite floating-point range."""


class SingularSystem(NumericalError):
    """A tridiagonal solve failed or the diffusion vanished inside the domain."""


class GridMismatch(NumericalError):
    """Two PDE surfaces were compared on different grids."""


class EnvelopeFailure(NumericalError):
    """An envelope level could not meet its gap condition within the rebuild budget."""


class CertificationFailure(NumericalError):
    """An approximation ladder violates one of its certified conditions."""

    def __init__(self, condition: str, level: int, witness: float, margin: float):
        self.condition = condition
        self.level = level
        self.witness = witness
        self.margin = margin
        super().__init__(
            f"condition {condition} violated at level n={level}, x={witness!r} (margin {margin:.3e})"
        )


class LadderExhausted(NumericalError):
    """Levels or caps ran out before the limit ladder met its tolerance.

    The partially filled result is available as ``self.result``.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class InvariantViolation(NumericalError):
    """A computed quantity broke an invariant it is guaranteed to satisfy."""


class ConfigError(ValidationError):
    """A run configuration failed schema validation.

    ``path`` is the JSON path of the offending field, e.g. ``.T``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
