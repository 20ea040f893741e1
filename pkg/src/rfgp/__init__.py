"""RF-GP: random forests with GLS splitting and Gaussian-process machinery
for binary geospatial data."""

from .core import (
    EvaluationReport,
    SpatialDataset,
    load_dataset,
    mise,
    misclassification,
    relative_mse,
    save_dataset,
)
from .covariance import CovarianceSpec, covariance_matrix, kernel, sample_gp
from .forest import Forest, ForestParams, fit_forest, predict_mean, predict_mean_batch
from .link import (
    CovariateEffectEstimator,
    CvGrid,
    CvOptions,
    SpatialParams,
    estimate_covariate_effect,
    estimate_spatial_params,
    invert_link,
    marginal_link,
    phi_cdf,
    phi_quantile,
)
from .nngp import (
    SparseCholeskyFactor,
    WorkingCorrelationSpec,
    apply_Q,
    build_factor,
    check_diagonal_dominance,
    order_locations,
    restrict_factor,
)
from .prediction import MvnCdfProblem, RfgpModel, build_context, mvn_cdf, predict_batch
from .simulate import (
    SimulationConfig,
    fit_baseline,
    friedman_m,
    generate_dataset,
    repeated_split_benchmark,
    run_benchmark,
)
from .tree import (
    Cut,
    GlsTree,
    GrowParams,
    MembershipMatrix,
    classification_split_criterion,
    gini_impurity,
    gls_beta,
    gls_split_criterion,
    grow_tree,
    predict_tree,
    regression_split_criterion,
)

__version__ = "0.1.0"
