"""Matrix autoregression with auxiliary covariates.

The main entry points are :func:`marac.fit` (functional) and
:class:`marac.MARAC` (scikit-learn style). Baseline forecasters live in
:mod:`marac.baselines`; the synthetic generator in :mod:`marac.simulator`.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ContractError,
    ConvergenceError,
    FormatError,
    InsufficientDataError,
    MaracError,
    ShapeError,
    SingularityError,
    StationarityError,
)
from .kernels import GridSpec, KernelContext, LebedevKernel, ProductKernel  # noqa: E402
from .model import MaracModel  # noqa: E402
from .series import MatrixSeries, rmse  # noqa: E402
from .estimator import MARAC, FitOptions, FitReport, fit, tune_lambda  # noqa: E402
from .selection import select_lags  # noqa: E402
from .stationarity import check_stationarity  # noqa: E402
from .simulator import SimConfig, simulate  # noqa: E402

__all__ = [
    "MARAC",
    "ContractError",
    "ConvergenceError",
    "FitOptions",
    "FitReport",
    "FormatError",
    "GridSpec",
    "InsufficientDataError",
    "KernelContext",
    "LebedevKernel",
    "MaracError",
    "MaracModel",
    "MatrixSeries",
    "ProductKernel",
    "ShapeError",
    "SimConfig",
    "SingularityError",
    "StationarityError",
    "check_stationarity",
    "fit",
    "rmse",
    "select_lags",
    "simulate",
    "tune_lambda",
]
