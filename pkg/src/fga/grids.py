"""Uniform spatial grids and vector-valued wave fields sampled on them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import DataError, GridError, ResolutionError, check_positive


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid on the box ``[origin, origin + extent)``.

    Points are ``origin + k * spacing`` with ``spacing = extent / n`` and
    ``k = 0..n-1``; the box is read as one period when used by FFT solvers.
    """

    origin: tuple
    extent: tuple
    n_per_dim: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        extent = tuple(float(v) for v in np.atleast_1d(self.extent))
        n = tuple(int(v) for v in np.atleast_1d(self.n_per_dim))
        if not (len(origin) == len(extent) == len(n)) or len(n) == 0:
            raise GridError("origin, extent and n_per_dim must have equal length d >= 1")
        if any(v < 2 for v in n):
            raise GridError(f"need at least 2 points per dimension, got {n}")
        if any(not np.isfinite(v) or v <= 0 for v in extent):
            raise GridError(f"extent must be positive, got {extent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "n_per_dim", n)

    @classmethod
    def from_bounds(cls, lo, hi, spacing: float, *, power_of_two: bool = False) -> "SpatialGrid":
        """Grid covering ``[lo, hi]`` per dimension with at most the given spacing.

        With ``power_of_two`` the point counts are rounded up to powers of two and the
        box is widened symmetrically so that the spacing is kept exactly.
        """
        spacing = check_positive("spacing", spacing)
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if np.any(hi <= lo):
            raise GridError("bounds must satisfy hi > lo")
        n = np.ceil((hi - lo) / spacing).astype(int) + 1
        if power_of_two:
            n = 2 ** np.ceil(np.log2(n)).astype(int)
        centre = 0.5 * (lo + hi)
        # snap to a lattice anchored at 0 so that repeated builds agree exactly
        origin = np.round((centre - 0.5 * n * spacing) / spacing) * spacing
        return cls(tuple(origin), tuple(n * spacing), tuple(n))

    @property
    def d(self) -> int:
        return len(self.n_per_dim)

    @property
    def spacing(self) -> tuple:
        return tuple(e / n for e, n in zip(self.extent, self.n_per_dim))

    @property
    def shape(self) -> tuple:
        return self.n_per_dim

    @property
    def size(self) -> int:
        return int(np.prod(self.n_per_dim))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> list:
        return [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.n_per_dim)]

    def mesh(self) -> np.ndarray:
        """Coordinates with shape ``shape + (d,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def check_resolves(self, eps: float) -> None:
        """Raise if the spacing cannot resolve a Gaussian of width ``sqrt(eps)``."""
        limit = 0.5 * np.sqrt(eps)
        if max(self.spacing) > limit * (1 + 1e-12):
            raise ResolutionError(
                f"grid spacing {max(self.spacing):.3g} exceeds sqrt(eps)/2 = {limit:.3g}"
            )


@dataclass
class WaveField:
    """Complex ``N``-vector samples on a :class:`SpatialGrid`.

    ``values`` has shape ``grid.shape + (N,)``.
    """

    grid: SpatialGrid
    values: np.ndarray
    eps: float
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape == self.grid.shape:
            vals = vals[..., None]
        if vals.shape[:-1] != self.grid.shape:
            raise DataError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise DataError("wave field contains non-finite samples")
        self.values = vals
        self.eps = check_positive("eps", self.eps)

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume))

    def with_values(self, values, t: float | None = None) -> "WaveField":
        return WaveField(self.grid, values, self.eps, self.t if t is None else t, dict(self.meta))
