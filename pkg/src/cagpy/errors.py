"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges, signs)."""


class NotPositiveDefinite(ArithmeticError):
    """Cholesky failed even after the full jitter ladder."""

    def __init__(self, message, jitter=None, condition=None):
        super().__init__(message)
        self.jitter = jitter
        self.condition = condition


class RankDeficient(ArithmeticError):
    """Action matrix does not have full column rank."""


class OracleTooLarge(ContractViolation):
    """Problem exceeds the size cap of a dense O(n^3) oracle."""


class NonFiniteGradient(ArithmeticError):
    def __init__(self, coordinate, value):
        super().__init__(f"non-finite gradient at coordinate {coordinate}: {value}")
        self.coordinate = coordinate
        self.value = value


class ParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class ConfigError(ValueError):
    pass


class Diverged(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, records=None):
        super().__init__(f"loss diverged at epoch {epoch}")
        self.epoch = epoch
        self.records = records or []
