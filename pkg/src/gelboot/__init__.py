"""Generalized empirical likelihood estimation and bootstrap inference.

The estimators (EL, ET and ETEL) solve overidentified moment-condition
models; inference uses a misspecification-robust sandwich variance and a
non-recentered percentile-t bootstrap.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BootstrapError,
    DomainError,
    EstimationError,
    GelbootError,
    InnerLoopError,
    InputError,
    VarianceError,
)
from .gel import GelFit, SolveOptions, estimate, inner_loop, profile_objective, ubc_diagnostic  # noqa: E402
from .models import (  # noqa: E402
    Dataset,
    FunctionMomentModel,
    LinearIVModel,
    MatchingMomentModel,
    MomentModel,
    PanelMomentModel,
    evaluate,
    load_csv,
)
from .rho import Kind  # noqa: E402
from .variance import RobustCovariance, StackedBeta, covariance, psi, psi_jacobian  # noqa: E402

__all__ = [
    "__version__",
    "BootstrapError",
    "DomainError",
    "EstimationError",
    "GelbootError",
    "InnerLoopError",
    "InputError",
    "VarianceError",
    "GelFit",
    "SolveOptions",
    "estimate",
    "inner_loop",
    "profile_objective",
    "ubc_diagnostic",
    "Dataset",
    "FunctionMomentModel",
    "LinearIVModel",
    "MatchingMomentModel",
    "MomentModel",
    "PanelMomentModel",
    "evaluate",
    "load_csv",
    "Kind",
    "RobustCovariance",
    "StackedBeta",
    "covariance",
    "psi",
    "psi_jacobian",
]
