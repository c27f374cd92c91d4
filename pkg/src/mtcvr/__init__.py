"""Unbiased post-click conversion rate estimation with multi-task learning.

Submodules: :mod:`autodiff` (tensors, Adam, checkpoints), :mod:`data`
(synthetic generator and CSV I/O), :mod:`model` (shared-embedding
network), :mod:`estimators` (losses and training), :mod:`analysis` (exact
and Monte Carlo bias), :mod:`metrics` (AUC, GAUC) and :mod:`experiments`
(the commands behind the CLI).
"""

from .analysis import BiasReport, FrozenInstance, bias_report, exact_expected_value
from .data import ExposureDataset, GroundTruth, SyntheticConfig, generate_synthetic
from .errors import (CalibrationError, ConfigError, ContractError, DimensionError,
                     DivergenceError, InputError, UndefinedMetricError)
from .estimators import EstimatorSpec, HyperParams, train
from .metrics import auc, evaluate, gauc
from .model import Architecture, MultiTaskNet

__version__ = "0.1.0"
