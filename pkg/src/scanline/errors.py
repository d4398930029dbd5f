"""Exception types shared across the package."""


class ScanlineError(Exception):
    """Base class for all package errors."""


class GeometryOutOfBounds(ScanlineError, ValueError):
    pass


class InvalidPrior(ScanlineError, ValueError):
    pass


class ShapeMismatch(ScanlineError, ValueError):
    pass


class LengthMismatch(ScanlineError, ValueError):
    pass


class BudgetExceedsWidth(ScanlineError, ValueError):
    pass


class ConfigError(ScanlineError, ValueError):
    pass


class DegenerateDistance(ScanlineError, ArithmeticError):
    """Both anchors coincide, so the distance has no gradient there."""


class DegenerateLikelihood(RuntimeWarning):
    """Every particle got zero likelihood; weights were reset to uniform."""
