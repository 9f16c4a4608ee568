"""Continuous-time hourly forecasting on gridded atmospheric fields.

Learns a data-to-data velocity field on 6-hour analysis pairs, fine-tunes
it through an explicit Euler solver on hourly sequences, and evaluates the
rollouts with latitude-weighted RMSE, zonal spectra, column energy budgets,
discontinuity scoring, and cyclone tracking.
"""

__version__ = "0.1.0"

from .grid import (
    GridSpec,
    NormStats,
    StateField,
    VariableRegistry,
    compute_norm_stats,
    denormalize,
    latitude_weights,
    normalize,
    tp_inverse,
    tp_transform,
)
from .paths import PathParams, PathSample, dynamic_path_sample, ot_path_sample

__all__ = [
    "GridSpec",
    "NormStats",
    "StateField",
    "VariableRegistry",
    "compute_norm_stats",
    "denormalize",
    "latitude_weights",
    "normalize",
    "tp_inverse",
    "tp_transform",
    "PathParams",
    "PathSample",
    "dynamic_path_sample",
    "ot_path_sample",
    "__version__",
]
