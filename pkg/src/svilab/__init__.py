"""Stochastic variational inequality solvers and a Monte Carlo verification
lab for their asymptotic normality."""

__version__ = "0.1.0"

from .geometry import (
    Ball,
    BallIntersection,
    Box,
    Halfspace,
    IndicatorProx,
    Manifold,
    OneNormProx,
    ZeroProx,
    pinv_on_subspace,
    prox,
    project_manifold,
    project_set,
    tangent_basis,
    tangent_projector,
)
from .problems import (
    Constraint,
    InstanceBundle,
    NLPProblem,
    StochasticVIProblem,
    build_two_ball_instance,
    evaluate_noise,
    get_instance,
    nlp_to_vi,
)
from .solvers import (
    SAASettings,
    SolverConfig,
    StepSchedule,
    Trajectory,
    generalized_gradient,
    run_saa,
    run_sfb,
    step_size,
)
from .asymptotics import (
    AsymptoticsReport,
    KKTReport,
    active_set,
    covariant_hessian,
    kkt_report,
    lagrange_multipliers,
    predicted_covariance,
    solution_jacobian,
)
from .diagnostics import (
    CLTReport,
    DecayReport,
    RegularityReport,
    ShadowReport,
    check_regularity,
    distance_decay,
    ks_statistic,
    monte_carlo_clt,
    monte_carlo_shadow,
    shadow_residuals,
)
