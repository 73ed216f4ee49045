"""pgamm: penalized generalized additive mixed models for longitudinal data.

Fits GAMMs by penalized generalized estimating equations with a double
SCAD penalty (linear coefficients individually, spline components
groupwise), solving the estimating equation by Monte Carlo Newton-Raphson
with Metropolis sampling of the random effects, and tuning the penalty by
generalized cross validation.
"""

__version__ = "0.1.0"

from .basis import (
    BasisSet,
    SplineBasisSpec,
    build_basis,
    build_basis_set,
    default_knot_count,
    evaluate_g_hat,
)
from .correlation import (
    CorrelationSpec,
    correlation_inverse,
    correlation_matrix,
    estimate_rho,
)
from .data import (
    ColumnRoleConfig,
    LongitudinalDataset,
    StandardizationRecord,
    SubjectBlock,
    from_arrays,
    load_csv,
    standardize,
)
from .families import Family, estimate_dispersion
from .gcv import GcvReport, find_lambda_max, gcv, marginal_covariance, select_lambda
from .penalty import (
    PenaltyConfig,
    group_norm,
    lqa_weight_matrix,
    scad_derivative,
    scad_penalty,
    threshold_groups,
)
from .sampling import (
    ChainDraws,
    McConfig,
    RandomEffectsModel,
    mc_expectation,
    metropolis_sweep,
    run_chain,
    update_sigma,
)
from .simulate import (
    MetricsReport,
    SimDesign,
    compare_models,
    example1_design,
    example2_design,
    example3_design,
    generate,
    model_spec_for,
    run_replications,
)
from .solver import (
    Design,
    FitState,
    ModelSpec,
    SolverConfig,
    assemble_S_H,
    fit,
    newton_step,
    sandwich_covariance,
)

__all__ = [
    "__version__",
    "BasisSet", "SplineBasisSpec", "build_basis", "build_basis_set",
    "default_knot_count", "evaluate_g_hat",
    "CorrelationSpec", "correlation_inverse", "correlation_matrix",
    "estimate_rho",
    "ColumnRoleConfig", "LongitudinalDataset", "StandardizationRecord",
    "SubjectBlock", "from_arrays", "load_csv", "standardize",
    "Family", "estimate_dispersion",
    "GcvReport", "find_lambda_max", "gcv", "marginal_covariance",
    "select_lambda",
    "PenaltyConfig", "group_norm", "lqa_weight_matrix", "scad_derivative",
    "scad_penalty", "threshold_groups",
    "ChainDraws", "McConfig", "RandomEffectsModel", "mc_expectation",
    "metropolis_sweep", "run_chain", "update_sigma",
    "MetricsReport", "SimDesign", "compare_models", "example1_design",
    "example2_design", "example3_design", "generate", "model_spec_for",
    "run_replications",
    "Design", "FitState", "ModelSpec", "SolverConfig", "assemble_S_H",
    "fit", "newton_step", "sandwich_covariance",
]
