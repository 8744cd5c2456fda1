"""Domain generalization benchmark: environments, synthetic shifts, objectives,
model selection and an experiment harness."""

from .envdata import (Environment, EnvironmentSuite, FeatureSchema, SeedBundle, SyntheticConfig,
                      build_environment_suite, generate_synthetic_suite, load_suite, save_suite,
                      split_suite)
from .estimator import DGClassifier
from .evalmetrics import (accuracy, aggregate_runs, auroc, fairness_report, max_f1_threshold,
                          mcc, mean_auroc_multilabel)
from .exceptions import (ConfigurationError, DataError, DGBenchError, FeatureTypeError,
                         InfeasibilityError, NumericError, RangeError, SchemaError,
                         UndefinedMetricError, UnsupportedModeError)
from .harness import (emit_plot_data, emit_table, parse_config, run_experiment, sweep_cmnist,
                      sweep_lambda)
from .models import ModelSpec, build_model, train_model
from .objectives import ALGORITHMS, ORACLES, make_objective
from .selection import RunSettings, SelectionStrategy, random_search
from .shifts import ShiftPlan, apply_shift, generate_colored_mnist, make_plan

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "ORACLES", "ConfigurationError", "DataError", "DGBenchError", "DGClassifier",
    "Environment", "EnvironmentSuite", "FeatureSchema", "FeatureTypeError",
    "InfeasibilityError", "ModelSpec", "NumericError", "RangeError", "RunSettings",
    "SchemaError", "SeedBundle", "SelectionStrategy", "ShiftPlan", "SyntheticConfig",
    "UndefinedMetricError", "UnsupportedModeError", "accuracy", "aggregate_runs",
    "apply_shift", "auroc", "build_environment_suite", "build_model", "emit_plot_data",
    "emit_table", "fairness_report", "generate_colored_mnist", "generate_synthetic_suite",
    "load_suite", "make_objective", "make_plan", "max_f1_threshold", "mcc",
    "mean_auroc_multilabel", "parse_config", "random_search", "run_experiment", "save_suite",
    "split_suite", "sweep_cmnist", "sweep_lambda", "train_model",
]
