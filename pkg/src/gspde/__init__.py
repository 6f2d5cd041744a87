"""Simulation of monotone SPDEs driven by Wiener noise plus an
infinite-dimensional fractional-type Gaussian forcing, with statistical
verification of the covariance identities the construction rests on."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionMismatch,
    DomainError,
    FactorizationError,
    GspdeError,
    InnerSolveError,
    QuadratureError,
    RangeError,
)
from .kernel import (
    CovarianceKernel,
    covariance_matrix,
    covariance_R,
    covariance_R_quadrature,
    empirical_bound_check,
    increment_covariance,
    make_fbm_kernel,
    make_general_kernel,
    make_stationary_kernel,
    weighted_double_integral,
)
from .gaussian import (
    GaussianEnsemble,
    NoiseSpec,
    OperatorValuedIntegrand,
    TimeGrid,
    continuity_proxy,
    covariance_fidelity,
    ensemble_from_binary,
    ensemble_to_binary,
    ensemble_to_csv,
    integrate_operator,
    integrate_scalar,
    normality_check,
    sample_G,
    sample_scalar,
    verify_isometry,
    verify_covariance_identities,
)
from .operators import (
    DiffusionOperator,
    DriftConstants,
    DriftOperator,
    GalerkinSpace,
    check_hemicontinuity,
    check_weak_monotonicity,
    check_coercivity,
    check_boundedness,
    constant_diffusion,
    h_minus_one_space,
    linear_diffusion,
    make_linear_heat,
    make_p_laplace,
    make_porous_medium,
    shift_operators,
    w1p_space,
    zero_diffusion,
    zero_drift,
)
from .solver import (
    RateTable,
    SolutionPath,
    SolverConfig,
    build_grid,
    convergence_study,
    estimate_moments,
    solution_to_csv,
    solve_many,
    solve_spde,
    solve_transformed,
    wiener_increments,
)

__version__ = "0.1.0"
