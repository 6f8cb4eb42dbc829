"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid input: bad parameters, malformed configs, violated preconditions."""


class ResourceError(ValidationError):
    """A request that would exceed an enumeration or memory guard."""


class NumericError(ArithmeticError):
    """A numerical procedure failed (degenerate weights, bracket failure, ...)."""


class NonUniqueError(ValidationError):
    """The most favorable subset is not unique where uniqueness is required."""
