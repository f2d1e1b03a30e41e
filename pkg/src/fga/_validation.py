"""Error types and small input-validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np


class FGAError(Exception):
    """Base class for all package errors."""


class ResolutionError(FGAError, ValueError):
    """A sampling grid is too coarse for the requested packet width."""


class DataError(FGAError, ValueError):
    """Input samples are malformed (non-finite, wrong shape, escaping support)."""


class SingularityError(FGAError, ValueError):
    """Evaluation requested at the p = 0 singularity of the symbol."""


class HyperbolicityError(FGAError, ValueError):
    """Eigenvalues of the symbol are not separated by the required gap."""


class StepSizeError(FGAError, RuntimeError):
    """An ODE step was rejected; retry with a smaller time step."""


class TrajectoryError(FGAError, RuntimeError):
    """A trajectory became invalid where it carries non-negligible mass."""


class GridError(FGAError, ValueError):
    """Grids are incompatible or of an unsupported layout."""


class QuadratureError(FGAError, RuntimeError):
    """An adaptive quadrature did not reach its tolerance."""


class ConfigError(FGAError, ValueError):
    """Experiment configuration is invalid."""


def check_positive(name: str, value, *, allow_zero: bool = False) -> float:
    """Return ``value`` as float after checking it is a finite positive real."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_int(name: str, value, *, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_vector(name: str, value, d: int) -> np.ndarray:
    """Coerce ``value`` to a float array of shape ``(d,)``."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (d,):
        raise ValueError(f"{name} must have shape ({d},), got {arr.shape}")
    return check_finite(name, arr)


def check_points(name: str, value, d: int) -> np.ndarray:
    """Coerce ``value`` to a float array of shape ``(M, d)``; a single point is promoted."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == d:
        arr = arr[None, :]
    elif d == 1 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ValueError(f"{name} must have shape (M, {d}), got {np.shape(value)}")
    return check_finite(name, arr)
