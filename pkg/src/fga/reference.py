"""Exact spectral solver for constant-coefficient systems and L2 utilities.

For constant flux matrices the solution is ``u_hat(t, xi) = sum_n e^{-i H_n(xi) t}
R_n(xi) L_n(xi)^T u_hat(0, xi)``. The data are embedded with zero padding in a
periodic box whose point counts are powers of two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, GridError, ResolutionError, check_int
from .grids import SpatialGrid, WaveField
from .systems import SystemSpec

SUPPORT_TOL = 1e-12
POINTS_PER_WAVELENGTH = 8


def _next_pow2(n: int) -> int:
    return 1 << int(np.ceil(np.log2(max(n, 2))))


def _frequencies(grid: SpatialGrid) -> np.ndarray:
    axes = [2 * np.pi * np.fft.fftfreq(n, h) for n, h in zip(grid.shape, grid.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class SpectralSolution:
    """Fourier multiplier of the exact propagator on a periodic grid.

    ``multiplier`` has shape ``grid.shape + (N, N)``; the zero mode is the identity.
    """

    grid: SpatialGrid
    t: float
    multiplier: np.ndarray
    max_speed: float

    @classmethod
    def build(cls, sys: SystemSpec, grid: SpatialGrid, t: float) -> "SpectralSolution":
        if not sys.constant_coefficients:
            raise ConfigError("spectral_solve supports constant-coefficient systems only")
        if grid.d != sys.d:
            raise GridError(f"grid has d={grid.d}, system has d={sys.d}")
        xi = _frequencies(grid).reshape(-1, sys.d)
        nz = np.linalg.norm(xi, axis=1) > 0
        mult = np.broadcast_to(np.eye(sys.N, dtype=complex), (len(xi), sys.N, sys.N)).copy()
        H, L, R = sys.eig(np.zeros((int(nz.sum()), sys.d)), xi[nz])
        mult[nz] = (R * np.exp(-1j * H * t)[:, None, :]) @ np.transpose(L, (0, 2, 1))
        speed = float(np.max(np.abs(H) / np.linalg.norm(xi[nz], axis=1)[:, None])) if nz.any() else 0.0
        return cls(grid, float(t), mult.reshape(grid.shape + (sys.N, sys.N)), speed)

    def apply(self, values: np.ndarray) -> np.ndarray:
        axes = tuple(range(self.grid.d))
        uh = np.fft.fftn(values, axes=axes)
        vh = np.einsum("...ij,...j->...i", self.multiplier, uh)
        return np.fft.ifftn(vh, axes=axes)


def _embed(u0: WaveField, box_factor: int) -> tuple:
    """Zero-pad ``u0`` into a centred power-of-two box; returns (grid, values, slices)."""
    g = u0.grid
    h = np.array(g.spacing)
    n_new = [_next_pow2(n * box_factor) for n in g.shape]
    off = [(m - n) // 2 for m, n in zip(n_new, g.shape)]
    origin = np.array(g.origin) - np.array(off) * h
    big = SpatialGrid(tuple(origin), tuple(np.array(n_new) * h), tuple(n_new))
    sl = tuple(slice(o, o + n) for o, n in zip(off, g.shape))
    vals = np.zeros(big.shape + (u0.N,), dtype=complex)
    vals[sl] = u0.values
    return big, vals, sl


def _check_data(u0: WaveField, big: SpatialGrid, vals: np.ndarray, speed: float, t: float) -> None:
    mag = np.sqrt(np.sum(np.abs(vals) ** 2, axis=-1))
    peak = mag.max()
    if peak == 0:
        return
    mask = mag > SUPPORT_TOL * peak
    travel = speed * abs(t)
    for l, (x, L) in enumerate(zip(big.axes, big.extent)):
        occupied = np.any(mask, axis=tuple(k for k in range(big.d) if k != l))
        xs = x[occupied]
        lo_gap = xs.min() - x[0]
        hi_gap = x[0] + L - xs.max()
        if min(lo_gap, hi_gap) < travel:
            raise GridError(
                f"data support within {min(lo_gap, hi_gap):.3g} of the periodic boundary along axis {l}; "
                f"the solution travels {travel:.3g}: periodic wraparound"
            )
    # resolution: at least POINTS_PER_WAVELENGTH points per wavelength of the data
    uh = np.sqrt(np.sum(np.abs(np.fft.fftn(vals, axes=tuple(range(big.d)))) ** 2, axis=-1))
    xi = _frequencies(big)
    band = uh > SUPPORT_TOL * uh.max()
    kmax = float(np.linalg.norm(xi[band], axis=-1).max())
    if kmax > 0:
        wavelength = 2 * np.pi / kmax
        if max(big.spacing) > wavelength / POINTS_PER_WAVELENGTH * (1 + 1e-12):
            raise ResolutionError(
                f"spacing {max(big.spacing):.3g} gives fewer than {POINTS_PER_WAVELENGTH} points per wavelength {wavelength:.3g}"
            )


def spectral_solve(sys: SystemSpec, u0: WaveField, t: float, box_factor: int = 1) -> WaveField:
    """Exact solution at time ``t`` sampled on ``u0.grid``.

    The data are zero-padded into a power-of-two periodic box at least
    ``box_factor`` times the input grid, propagated and restricted back.
    Raises if the data sit closer to the periodic boundary than the distance the
    solution travels by time ``t``.
    """
    check_int("box_factor", box_factor, minimum=1)
    big, vals, sl = _embed(u0, box_factor)
    sol = SpectralSolution.build(sys, big, t)
    _check_data(u0, big, vals, sol.max_speed, t)
    out = sol.apply(vals)[sl]
    return WaveField(u0.grid, out, u0.eps, u0.t + t)


def _check_same_grid(a: WaveField, b: WaveField) -> None:
    ga, gb = a.grid, b.grid
    if ga.shape != gb.shape or not (
        np.allclose(ga.origin, gb.origin, rtol=0, atol=1e-12 * max(1.0, *np.abs(ga.extent)))
        and np.allclose(ga.extent, gb.extent, rtol=1e-12, atol=0)
    ):
        raise GridError("wave fields live on different grids")
    if a.N != b.N:
        raise GridError("wave fields have different numbers of components")


def l2_norm(a: WaveField) -> float:
    """Midpoint-rule L2 norm over the grid."""
    return float(np.sqrt(np.sum(np.abs(a.values) ** 2) * a.grid.cell_volume))


def l2_error(a: WaveField, b: WaveField) -> float:
    """Midpoint-rule L2 norm of ``a - b``; the grids must match."""
    _check_same_grid(a, b)
    return float(np.sqrt(np.sum(np.abs(a.values - b.values) ** 2) * a.grid.cell_volume))


class SpectralPropagator(TransformerMixin, BaseEstimator):
    """Exact propagator ``u0 -> u(t)`` for constant-coefficient systems.

    ``fit`` builds the Fourier multiplier for the padded grid of the training
    field; ``transform`` applies it to fields on the same grid.
    """

    def __init__(self, system=None, t=1.0, box_factor=1):
        self.system = system
        self.t = t
        self.box_factor = box_factor

    def fit(self, X: WaveField, y=None):
        if not isinstance(self.system, SystemSpec):
            raise ConfigError("system must be a SystemSpec instance")
        check_int("box_factor", self.box_factor, minimum=1)
        big, _, sl = _embed(X, self.box_factor)
        self.solution_ = SpectralSolution.build(self.system, big, float(self.t))
        self.input_grid_ = X.grid
        self.slices_ = sl
        return self

    def transform(self, X: WaveField) -> WaveField:
        check_is_fitted(self, "solution_")
        if X.grid != self.input_grid_:
            raise GridError("field is not sampled on the fitted grid")
        big, vals, sl = _embed(X, self.box_factor)
        _check_data(X, big, vals, self.solution_.max_speed, self.t)
        return WaveField(X.grid, self.solution_.apply(vals)[sl], X.eps, X.t + float(self.t))
