"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ConfigurationError(ValueError):
    """A configuration is invalid or internally inconsistent."""


class OrderingError(ValueError):
    """Two noise levels were supplied in the wrong order."""


class QuadratureError(ArithmeticError):
    """A numerical integral failed to converge."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numerical problem."""
