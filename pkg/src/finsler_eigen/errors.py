"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument lies outside the domain where the operation is defined."""


class ConfigError(ValueError):
    """Invalid norm, domain or study configuration."""


class KinkError(ValueError):
    """Rearranged profile is not differentiable at the requested measure."""


class SolverError(RuntimeError):
    """Eigen-solver failure; ``trace`` holds the quotient history."""

    def __init__(self, message, trace=None, result=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.result = result
