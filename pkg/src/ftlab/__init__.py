"""Stochastic transport equations driven by fractional Brownian motion.

Characteristic flows, the representation of the solution, Malliavin
derivatives of the inverse flow, and Monte Carlo density experiments.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DomainError,
    FactorizationError,
    FlowSolverError,
    FtlabError,
    GridMismatchError,
    InversionError,
    UnsupportedError,
)
from .fbm import (  # noqa: E402
    FbmPath,
    FbmVectorPath,
    HurstVector,
    TimeGrid,
    covariance,
    gram_matrix,
    kernel_K,
    ou_couple,
    sample_ensemble,
    sample_fbm,
    sample_fbm_vector,
)
from .fields import get_datum, get_drift, get_reaction, list_presets  # noqa: E402
from .flow import (  # noqa: E402
    SolverOptions,
    flow_jacobian,
    forward_flow,
    inverse_flow,
    invert_pointwise,
)
from .malliavin import (  # noqa: E402
    cross_inner_product,
    derivative_bound_constants,
    derivative_u,
    derivative_Y,
    h_inner_product,
)
from .transport import (  # noqa: E402
    evaluate_solution,
    solve_Z,
    symmetric_integral,
    weak_form_residual,
)
