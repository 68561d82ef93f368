"""Maximum-likelihood estimation of one-to-one matching markets with transfers."""

from .model import (
    BasisSpec,
    BasisSystem,
    CallableBasis,
    MatchSample,
    ProductBasis,
    Theta,
    alpha_value,
    eval_basis,
    gamma_value,
    phi_matrix,
)
from .equilibrium import (
    LinearSolveError,
    MatchingDensity,
    NonConvergenceError,
    NumericalError,
    Potentials,
    SolverConfig,
    SolverError,
    differentiate_potentials,
    matching_density,
    sample_wages,
    solve_potentials,
)
from .likelihood import (
    LikelihoodBreakdown,
    LikelihoodEvaluator,
    RankDeficiencyError,
    concentrated_log_likelihood,
    gradient,
    log_l1,
    log_l2,
    log_likelihood,
)
from .estimator import (
    EstimationReport,
    OptimizerConfig,
    estimate,
    estimate_concentrated,
    lr_test,
    standard_errors,
)
from .simulate import GroundTruthMarket, build_market, draw_sample
from .analysis import (
    ConfigurationError,
    CounterfactualResult,
    HedonicFit,
    counterfactual,
    gini,
    hedonic_baseline,
    vsl,
)
from .io import (
    DatasetSchema,
    load_config,
    load_sample,
    save_sample,
    schema_from_config,
    spec_from_config,
    theta_from_config,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "BasisSystem",
    "CallableBasis",
    "MatchSample",
    "ProductBasis",
    "Theta",
    "alpha_value",
    "eval_basis",
    "gamma_value",
    "phi_matrix",
    "LinearSolveError",
    "MatchingDensity",
    "NonConvergenceError",
    "NumericalError",
    "Potentials",
    "SolverConfig",
    "SolverError",
    "differentiate_potentials",
    "matching_density",
    "sample_wages",
    "solve_potentials",
    "LikelihoodBreakdown",
    "LikelihoodEvaluator",
    "RankDeficiencyError",
    "concentrated_log_likelihood",
    "gradient",
    "log_l1",
    "log_l2",
    "log_likelihood",
    "EstimationReport",
    "OptimizerConfig",
    "estimate",
    "estimate_concentrated",
    "lr_test",
    "standard_errors",
    "GroundTruthMarket",
    "build_market",
    "draw_sample",
    "ConfigurationError",
    "CounterfactualResult",
    "HedonicFit",
    "counterfactual",
    "gini",
    "hedonic_baseline",
    "vsl",
    "DatasetSchema",
    "load_config",
    "load_sample",
    "save_sample",
    "schema_from_config",
    "spec_from_config",
    "theta_from_config",
    "__version__",
]
