"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands disagree in shape; silent broadcasting is never allowed."""


class RankDeficient(ArithmeticError):
    """Ridge-free least squares hit a numerically singular normal system."""


class NonFinite(FloatingPointError):
    """A state or result left the finite floating-point range."""


class CovarianceDivergence(RuntimeError):
    """Adaptation gain matrix exceeded its configured eigenvalue cap."""


class OutOfRange(ValueError):
    """Query outside the domain of a schedule or table."""


class BadParams(ValueError):
    """Structurally invalid generator or controller parameters."""
