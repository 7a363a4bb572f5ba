import numpy as np


class MaracError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MaracError, ValueError):
    pass


class ContractError(MaracError, ValueError):
    """A documented precondition was violated."""


class SingularityError(MaracError, np.linalg.LinAlgError):
    pass


class InsufficientDataError(ContractError):
    pass


class ConvergenceError(MaracError, RuntimeError):
    """Raised when the objective increases, which exact block updates rule out."""


class FormatError(MaracError, ValueError):
    pass


class StationarityError(MaracError, ValueError):
    pass
