"""Branching random walks in a time-random environment: simulation,
martingale diagnostics and expansion verification."""

__version__ = "0.1.0"

from .edgeworth import (
    CumulantWindow,
    EdgeworthCoefficients,
    GridConvolutionOracle,
    MonteCarloOracle,
    edgeworth_cdf,
    full_window,
    lambda_coeffs,
    oracle_cdf,
    q1_closed,
    q2_closed,
    q3_closed,
    q_poly_generic,
)
from .environment import (
    EnvironmentModel,
    EnvState,
    ExplicitPmf,
    Gaussian,
    GeometricTruncated,
    PoissonTruncated,
    RealizedEnvironment,
    ShiftedExponential,
    TwoPoint,
    Uniform,
    cumulants_from_central_moments,
    sample_environment,
    state_moments,
    validate_model,
)
from .expansion import ab_decompose, residual_suite, rhs
from .martingales import (
    compute_series,
    compute_truncated,
    convergence_diagnostic,
    estimate_limits,
)
from .simulator import (
    SimConfig,
    Trajectory,
    counting_measure,
    normalized_lhs,
    simulate,
)
from .special import (
    hermite_coefficients,
    hermite_explicit,
    hermite_recurrence,
    std_normal_cdf,
    std_normal_pdf,
)
