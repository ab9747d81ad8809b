"""Covariate-tightened trimming bounds with honest random forests."""

from .dataset import Dataset, FoldPlan, Observation, Schema, load_csv, make_folds, summary
from .errors import (
    CTBError,
    CTBWarning,
    EstimationError,
    MonotonicityWarning,
    ValidationError,
)
from .estimator import (
    BoundsResult,
    ConditionalBounds,
    EstimatorConfig,
    MonotonicityPartition,
    PointEstimate,
    classify_monotonicity,
    estimate_aggregated,
    estimate_basic_tb,
    estimate_conditional,
    ipw_ate,
    ols_ate,
)
from .forest import Forest, ForestConfig, fit_forest, kernel_weights, predict_mean, predict_quantile
from .moments import NuisanceAt, TargetAt
from .simulation import (
    DgpSpec,
    MonteCarloReport,
    OracleTruths,
    generate,
    oracle_truths,
    run_monte_carlo,
)

__version__ = "0.1.0"
