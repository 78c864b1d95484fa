# errors.py
"""Exception hierarchy shared by every module.

Each family maps onto one CLI exit code (see ``cli.EXIT_CODES``).
"""


class HybridSensError(Exception):
    """Base class for all errors raised by this project."""


# --- Validation (exit 2) ---

class ValidationError(HybridSensError):
    """A document, expression or scaling failed validation."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class SchemaError(ValidationError):
    pass


class ExpressionSyntaxError(ValidationError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnknownIdentifierError(ValidationError):
    def __init__(self, symbol, offset=None):
        super().__init__(f"unknown identifier '{symbol}'")
        self.symbol = symbol
        self.offset = offset


class DerivationError(ValidationError):
    """The PDMP reduction cannot be derived from the given scaling."""


class QsaRequiredError(DerivationError):
    def __init__(self, reactions):
        self.reactions = list(reactions)
        super().__init__(
            "fast reactions change discrete species: "
            + ", ".join(self.reactions)
            + ". Eliminate them first (quasi-stationary reduction) and supply the reduced model."
        )


# --- Numeric failures (exit 3) ---

class NumericError(HybridSensError):
    pass


class NumericDomainError(NumericError):
    def __init__(self, message, position=None):
        where = f" at offset {position}" if position is not None else ""
        super().__init__(f"{message}{where}")
        self.position = position


class IntegrationError(NumericError):
    def __init__(self, message, time=None):
        stamp = f" at t={time!r}" if time is not None else ""
        super().__init__(f"{message}{stamp}")
        self.time = time


# --- Simulation limits (exit 3) ---

class SimulationError(HybridSensError):
    pass


class TruncatedPathError(SimulationError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class BudgetError(SimulationError):
    pass


# --- Comparison (exit 4) ---

class ComparisonError(HybridSensError):
    pass
