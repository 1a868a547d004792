"""Local-in-time error diagnostics for variational quantum dynamics."""

from .diagnostics import (ErrorReport, StationaryState, accumulate_bound, guided_error,
                          local_error, r_index, relevant_split, standard_gauge_derivative)
from .exact import NumericalFailure, Trajectory, distance, observable_error_bounds, propagate_exact
from .grid import (Axis, Grid, GridMismatchError, HamiltonianSpec, NormalizationError,
                   PreconditionWarning, WaveState, apply_h, energy_moments, inner)

__version__ = "0.1.0"

__all__ = [
    "Axis", "Grid", "WaveState", "HamiltonianSpec", "GridMismatchError", "NormalizationError",
    "PreconditionWarning", "inner", "apply_h", "energy_moments",
    "NumericalFailure", "Trajectory", "propagate_exact", "distance", "observable_error_bounds",
    "ErrorReport", "StationaryState", "local_error", "r_index", "relevant_split",
    "standard_gauge_derivative", "accumulate_bound", "guided_error",
]
