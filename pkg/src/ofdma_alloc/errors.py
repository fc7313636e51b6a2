"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid constants or configuration input."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class InfeasibleError(RuntimeError):
    """No allocation satisfies the constraints (rate, deadline, range...)."""

    def __init__(self, message: str, device: int | None = None):
        self.device = device
        super().__init__(message)


class DomainError(ValueError):
    """Argument outside the mathematical domain of a conversion."""


class SamplingError(RuntimeError):
    """Rejection sampler exhausted its attempt budget."""


class BudgetError(RuntimeError):
    """Grid enumeration would exceed the configured evaluation budget."""

    def __init__(self, message: str, estimated: int):
        self.estimated = estimated
        super().__init__(message)
