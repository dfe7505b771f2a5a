"""Martingality, stochastic solutions and their approximation for dX = sigma(X) dW absorbed at 0."""

__version__ = "0.1.0"

from .errors import (
    CertificationFailure,
    ConfigError,
    EnvelopeFailure,
    LadderExhausted,
    NumericalError,
    StochSolError,
    ValidationError,
)
from .model import (
    Call,
    Capped,
    Composite,
    Constant,
    Identity,
    LogCorrectedPower,
    PiecewiseLinearTable,
    PowerLaw,
    Put,
    TablePayoff,
    Truncated,
    VolatilityModel,
    evaluate_payoff,
    evaluate_sigma,
    validate_standing,
)

__all__ = [
    "__version__",
    "Call",
    "Capped",
    "CertificationFailure",
    "Composite",
    "ConfigError",
    "Constant",
    "EnvelopeFailure",
    "Identity",
    "LadderExhausted",
    "LogCorrectedPower",
    "NumericalError",
    "PiecewiseLinearTable",
    "PowerLaw",
    "Put",
    "StochSolError",
    "TablePayoff",
    "Truncated",
    "ValidationError",
    "VolatilityModel",
    "evaluate_payoff",
    "evaluate_sigma",
    "validate_standing",
]
