"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Shapes of the operands do not agree."""


class NumericalError(ValueError):
    """Non-finite values entered or escaped a computation."""


class FormatError(ValueError):
    """A dataset or cache file does not match its binary layout."""


class EmptySelectionError(ValueError):
    """Filter selection produced no filters."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class InsufficientStatisticsError(ValueError):
    """Too few samples or windows for the requested statistic."""
