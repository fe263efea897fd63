"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a precondition (bad shape, odd width, ...)."""


class NumericsError(ArithmeticError):
    """A numerical contract was violated (NaN/Inf in a computation)."""


class ContractError(ValueError):
    """An operation was called with inputs that break its documented contract."""


class BudgetError(RuntimeError):
    """A sampling budget ran out before both label classes were filled.

    Carries the counts achieved so the caller can report or retry with a
    larger budget.
    """

    def __init__(self, message: str, positives: int, negatives: int):
        super().__init__(message)
        self.positives = positives
        self.negatives = negatives


class DegeneratePriorError(ValueError):
    """Class prior is exactly 0 or 1; guidance is undefined."""


class SchemaError(ValueError):
    """A serialized artifact has an unknown or incompatible schema."""
