"""Lattice-based quantile regression with non-crossing and rate constraints."""

from .data import ColumnSpec, Dataset, Schema, SimSpec, generate_sim, load_csv, split, write_csv
from .errors import ConfigError, InputError, NumericalError, QRLatticeError
from .lattice import Grid, MonotoneSpec, check_monotone, project_monotone
from .loss import TauDistribution, expected_pinball_batch, pinball
from .metrics import build_report, crossing_rate, harrell_davis, quantile_mse, sample_quantile
from .model import (FeatureSpec, ModelConfig, QuantileModel, check_model, init_model, load_model,
                    location_scale_residual, predict, predict_curve, save_model)
from .rates import RateConstraintSpec
from .train import DEFAULT_EVAL_TAUS, History, TrainConfig, fit

__all__ = [
    "ColumnSpec", "Dataset", "Schema", "SimSpec", "generate_sim", "load_csv", "split", "write_csv",
    "ConfigError", "InputError", "NumericalError", "QRLatticeError",
    "Grid", "MonotoneSpec", "check_monotone", "project_monotone",
    "TauDistribution", "expected_pinball_batch", "pinball",
    "build_report", "crossing_rate", "harrell_davis", "quantile_mse", "sample_quantile",
    "FeatureSpec", "ModelConfig", "QuantileModel", "check_model", "init_model", "load_model",
    "location_scale_residual", "predict", "predict_curve", "save_model",
    "RateConstraintSpec", "DEFAULT_EVAL_TAUS", "History", "TrainConfig", "fit",
]
