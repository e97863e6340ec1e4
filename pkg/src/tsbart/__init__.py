"""BART with targeted smoothing: sum-of-trees regression with smooth leaf functions in one covariate."""

__version__ = "0.1.0"

from .data import (
    BaselineFunction,
    Dataset,
    PersonPeriodTable,
    Schema,
    TimeGrid,
    build_time_grid,
    case_control_sample,
    estimate_alpha,
    expand_survival,
    load_csv,
    write_csv,
)
from .exceptions import ConfigError, DataError, NumericalError, TsbartError
from .kernel import (
    KernelSpec,
    LeafPrior,
    build_leaf_prior,
    expected_crossings,
    length_scale_from_crossings,
    squared_exponential,
)
from .sampler import (
    FitConfig,
    PosteriorDraws,
    build_model,
    predict,
    rescale_hazard,
    run_chain,
)
from .trees import LeafStats, Tree, TreePriorConfig, leaf_log_marginal, sample_leaf_function
from .tuning import CrossingsGrid, TuningBudget, tune_crossings, waic

__all__ = [
    "BaselineFunction", "ConfigError", "DataError", "Dataset", "FitConfig", "KernelSpec",
    "LeafPrior", "LeafStats", "NumericalError", "PersonPeriodTable", "PosteriorDraws",
    "Schema", "TimeGrid", "Tree", "TreePriorConfig", "TsbartError", "CrossingsGrid", "TuningBudget", "build_leaf_prior",
    "build_model", "build_time_grid", "case_control_sample", "estimate_alpha",
    "expand_survival", "expected_crossings", "leaf_log_marginal", "length_scale_from_crossings",
    "load_csv", "predict", "rescale_hazard", "run_chain", "sample_leaf_function",
    "squared_exponential", "tune_crossings", "waic", "write_csv",
]
