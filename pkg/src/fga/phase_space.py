"""Phase-space quadrature grids, the FBI wave-packet transform pair and the cutoff.

The forward transform pairs a field with Gaussian coherent states

    (F u)(q, p) = 2^{-d/2} (pi eps)^{-3d/4} \\int exp(-i p.(x-q)/eps - |x-q|^2/(2 eps)) u(x) dx

and the adjoint sums coherent states back over a phase-space lattice. Both are
evaluated as a sequence of one-dimensional contractions, one spatial axis at a
time, so the cost is linear in the number of phase-space nodes per axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DataError, GridError, check_int, check_positive
from .grids import SpatialGrid, WaveField

DEFAULT_CG = 0.5
DEFAULT_R_CUT = 8.0
DEFAULT_PRUNE_TOL = 1e-12


def _norm_const(d: int, eps: float) -> float:
    return 2.0 ** (-d / 2) * (np.pi * eps) ** (-3 * d / 4)


# ---------------------------------------------------------------------------
# cutoff


def smoothstep(x, order: int = 3) -> np.ndarray:
    """Polynomial smoothstep of degree ``2*order + 1``; C^order at 0 and 1.

    Equal to 0 for x <= 0 and 1 for x >= 1.
    """
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    acc = np.zeros_like(x)
    for k in range(order + 1):
        acc += comb(order + k, k) * comb(2 * order + 1, order - k) * (-x) ** k
    return x ** (order + 1) * acc


@dataclass(frozen=True)
class CutoffSpec:
    """Smooth indicator of the region ``|q| <= 1/delta, delta <= |p| <= 1/delta``.

    The value is 1 on that region and 0 outside its dilation with ``delta/2``.
    ``order`` selects the smoothstep polynomial (degree ``2*order+1``).
    """

    delta: float
    order: int = 3

    def __post_init__(self):
        check_positive("delta", self.delta)
        if self.delta >= 1:
            raise ValueError("delta must lie in (0, 1)")
        check_int("order", self.order, minimum=3)


def cutoff_eval(spec: CutoffSpec, q, p) -> np.ndarray:
    """Evaluate the cutoff at points ``q, p`` of shape ``(..., d)``."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    dl = spec.delta
    rq = np.linalg.norm(np.atleast_1d(q), axis=-1)
    rp = np.linalg.norm(np.atleast_1d(p), axis=-1)
    m = spec.order
    # ramps: |q| in [1/dl, 2/dl] down, |p| in [dl/2, dl] up, |p| in [1/dl, 2/dl] down
    outer_q = 1.0 - smoothstep((rq - 1 / dl) * dl, m)
    inner_p = smoothstep((rp - dl / 2) / (dl / 2), m)
    outer_p = 1.0 - smoothstep((rp - 1 / dl) * dl, m)
    out = outer_q * inner_p * outer_p
    return out if out.ndim else float(out)


def in_region(q, p, delta: float) -> np.ndarray:
    """Membership mask of ``{|q| <= 1/delta, delta <= |p| <= 1/delta}``."""
    rq = np.linalg.norm(q, axis=-1)
    rp = np.linalg.norm(p, axis=-1)
    return (rq <= 1 / delta) & (rp >= delta) & (rp <= 1 / delta)


# ---------------------------------------------------------------------------
# phase grid


class PhaseGrid:
    """Tensor-product lattice of phase-space nodes ``(q, p)`` with spacing ``c_g*sqrt(eps)``.

    Axes are subsets of the lattice ``spacing * Z`` so grids built for different
    data share nodes. With ``clip=True`` (the default) the box is intersected with
    the bounding box of ``{|q| <= 2/delta, delta/2 <= |p| <= 2/delta}`` and nodes
    outside that set are masked; masked nodes always carry zero coefficients.

    Attributes
    ----------
    q_axes, p_axes : tuple of ndarray
        One-dimensional node coordinates per spatial dimension.
    spacing : float
        Common node spacing in q and p.
    delta : float
        Cutoff parameter.
    """

    def __init__(self, q_axes, p_axes, spacing: float, delta: float, clip: bool = True):
        self.q_axes = tuple(np.asarray(a, dtype=float) for a in q_axes)
        self.p_axes = tuple(np.asarray(a, dtype=float) for a in p_axes)
        if len(self.q_axes) != len(self.p_axes) or not self.q_axes:
            raise GridError("q_axes and p_axes must have the same length d >= 1")
        if any(len(a) < 3 for a in self.q_axes + self.p_axes):
            raise GridError("every phase-grid axis needs at least 3 nodes")
        self.spacing = check_positive("spacing", spacing)
        self.delta = check_positive("delta", delta)
        self.clip = bool(clip)

    @classmethod
    def from_box(cls, q_lo, q_hi, p_lo, p_hi, spacing: float, delta: float, clip: bool = True) -> "PhaseGrid":
        spacing = check_positive("spacing", spacing)
        q_lo, q_hi, p_lo, p_hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (q_lo, q_hi, p_lo, p_hi))
        if clip:
            lim = 2.0 / delta
            q_lo, q_hi = np.maximum(q_lo, -lim), np.minimum(q_hi, lim)
            p_lo, p_hi = np.maximum(p_lo, -lim), np.minimum(p_hi, lim)

        def axis(lo, hi):
            k0, k1 = int(np.ceil(lo / spacing - 1e-9)), int(np.floor(hi / spacing + 1e-9))
            if k1 - k0 < 2:
                # keep at least three nodes centred on the window
                mid = int(np.round(0.5 * (lo + hi) / spacing))
                k0, k1 = min(k0, mid - 1), max(k1, mid + 1)
            return spacing * np.arange(k0, k1 + 1)

        return cls(
            [axis(a, b) for a, b in zip(q_lo, q_hi)],
            [axis(a, b) for a, b in zip(p_lo, p_hi)],
            spacing,
            delta,
            clip,
        )

    @classmethod
    def full(cls, d: int, eps: float, delta: float, c_g: float = DEFAULT_CG) -> "PhaseGrid":
        """Grid over the whole bounding box of the cutoff support."""
        lim = 2.0 / delta
        lo, hi = -lim * np.ones(d), lim * np.ones(d)
        return cls.from_box(lo, hi, lo, hi, c_g * np.sqrt(eps), delta)

    @classmethod
    def covering(
        cls,
        u: WaveField,
        eps: float | None = None,
        delta: float = 0.5,
        c_g: float = DEFAULT_CG,
        tol: float = DEFAULT_PRUNE_TOL,
        r_cut: float = DEFAULT_R_CUT,
        clip: bool = True,
    ) -> "PhaseGrid":
        """Smallest lattice box that carries the FBI coefficients of ``u`` above ``tol``.

        The q-window is the spatial support of ``u`` (samples above ``tol * max|u|``)
        widened by ``r_cut * sqrt(eps)``; the p-window is the support of the Fourier
        transform scaled by ``eps``, widened the same way.
        """
        eps = u.eps if eps is None else check_positive("eps", eps)
        spacing = check_positive("c_g", c_g) * np.sqrt(eps)
        pad = r_cut * np.sqrt(eps)
        amp = np.sqrt(np.sum(np.abs(u.values) ** 2, axis=-1))
        if not np.any(amp > 0):
            # nothing to cover; a minimal grid around the origin of the annulus
            ones = np.ones(u.grid.d)
            return cls.from_box(-spacing * ones, spacing * ones, (delta - spacing) * ones, (delta + spacing) * ones, spacing, delta, clip)
        q_lo, q_hi, p_lo, p_hi = [], [], [], []
        for axis, x in enumerate(u.grid.axes):
            others = tuple(a for a in range(u.grid.d) if a != axis)
            marg = amp.max(axis=others) if others else amp
            idx = np.nonzero(marg > tol * marg.max())[0]
            q_lo.append(x[idx[0]] - pad)
            q_hi.append(x[idx[-1]] + pad)
            spec = np.abs(np.fft.fft(u.values, axis=axis))
            spec = np.sqrt(np.sum(spec**2, axis=-1))
            smarg = spec.max(axis=others) if others else spec
            xi = 2 * np.pi * np.fft.fftfreq(len(x), d=u.grid.spacing[axis])
            sel = xi[smarg > tol * smarg.max()]
            p_lo.append(eps * sel.min() - pad)
            p_hi.append(eps * sel.max() + pad)
        return cls.from_box(q_lo, q_hi, p_lo, p_hi, spacing, delta, clip)

    # -- geometry -----------------------------------------------------------

    @property
    def d(self) -> int:
        return len(self.q_axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.q_axes) + tuple(len(a) for a in self.p_axes)

    @property
    def weight(self) -> float:
        return self.spacing ** (2 * self.d)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def meshes(self) -> tuple:
        """Node coordinates ``(q, p)``, each of shape ``shape + (d,)``."""
        grids = np.meshgrid(*self.q_axes, *self.p_axes, indexing="ij")
        d = self.d
        return np.stack(grids[:d], axis=-1), np.stack(grids[d:], axis=-1)

    def support_mask(self) -> np.ndarray:
        q, p = self.meshes()
        if not self.clip:
            return np.ones(self.shape, dtype=bool)
        rq = np.linalg.norm(q, axis=-1)
        rp = np.linalg.norm(p, axis=-1)
        return (rq <= 2 / self.delta) & (rp >= self.delta / 2) & (rp <= 2 / self.delta)

    def nodes(self) -> tuple:
        """Unmasked nodes as flat arrays ``(q, p)`` of shape ``(M, d)``."""
        q, p = self.meshes()
        mask = self.support_mask()
        return q[mask], p[mask]

    def __repr__(self) -> str:
        return f"PhaseGrid(d={self.d}, shape={self.shape}, spacing={self.spacing:.4g}, delta={self.delta})"


@dataclass
class PacketCoefficients:
    """FBI coefficients sampled on a :class:`PhaseGrid`; ``values`` has shape ``grid.shape + (N,)``."""

    grid: PhaseGrid
    values: np.ndarray
    eps: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape[:-1] != self.grid.shape:
            raise DataError(f"coefficient shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise DataError("coefficients contain non-finite values")
        self.values = vals

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    def norm(self) -> float:
        """Quadrature norm over phase space."""
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.weight))


# ---------------------------------------------------------------------------
# transforms


def _window(x: np.ndarray, centre: float, half: float) -> tuple:
    return int(np.searchsorted(x, centre - half, "left")), int(np.searchsorted(x, centre + half, "right"))


def _forward_axis(arr, x, h, qs, ps, eps, half):
    """Contract axis 0 of ``arr`` (length len(x)) into new leading axes (q, p)."""
    rest = arr.shape[1:]
    flat = arr.reshape(arr.shape[0], -1)
    out = np.zeros((len(qs), len(ps), flat.shape[1]), dtype=complex)
    for iq, q in enumerate(qs):
        lo, hi = _window(x, q, half)
        if hi <= lo:
            continue
        dx = x[lo:hi] - q
        ker = np.exp(np.outer(ps, -1j * dx / eps) - dx**2 / (2 * eps))
        out[iq] = ker @ flat[lo:hi]
    out *= h
    return out.reshape((len(qs), len(ps)) + rest)


def _inverse_axis(arr, x, qs, ps, eps, half, skip=None):
    """Contract leading axes (q, p) of ``arr`` into a new leading spatial axis."""
    rest = arr.shape[2:]
    flat = arr.reshape(len(qs), len(ps), -1)
    out = np.zeros((len(x), flat.shape[2]), dtype=complex)
    for iq, q in enumerate(qs):
        if skip is not None and skip[iq]:
            continue
        lo, hi = _window(x, q, half)
        if hi <= lo:
            continue
        dx = x[lo:hi] - q
        ker = np.exp(np.outer(1j * dx / eps, ps) - (dx**2 / (2 * eps))[:, None])
        out[lo:hi] += ker @ flat[iq]
    return out.reshape((len(x),) + rest)


def fbi_forward(u: WaveField, eps: float, grid: PhaseGrid, r_cut: float = DEFAULT_R_CUT) -> PacketCoefficients:
    """FBI coefficients of ``u`` at the nodes of ``grid``.

    The x-integral uses the rectangle rule on ``u.grid`` with the kernel truncated
    at ``|x - q| <= r_cut * sqrt(eps)``. Masked nodes are set to zero.
    """
    eps = check_positive("eps", eps)
    if grid.d != u.grid.d:
        raise GridError(f"phase grid has d={grid.d}, field has d={u.grid.d}")
    u.grid.check_resolves(eps)
    if not np.all(np.isfinite(u.values)):
        raise DataError("field contains non-finite samples")
    d = grid.d
    half = r_cut * np.sqrt(eps)
    arr = u.values
    for ax in range(d):
        # layout so far: (q_0, p_0, ..., q_{ax-1}, p_{ax-1}, x_ax, ..., N)
        arr = np.moveaxis(arr, 2 * ax, 0)
        arr = _forward_axis(arr, u.grid.axes[ax], u.grid.spacing[ax], grid.q_axes[ax], grid.p_axes[ax], eps, half)
        arr = np.moveaxis(arr, (0, 1), (2 * ax, 2 * ax + 1))
    order = [2 * a for a in range(d)] + [2 * a + 1 for a in range(d)] + [2 * d]
    arr = np.transpose(arr, order) * _norm_const(d, eps)
    arr = np.where(grid.support_mask()[..., None], arr, 0.0)
    return PacketCoefficients(grid, np.ascontiguousarray(arr), eps)


def fbi_inverse(
    c: PacketCoefficients,
    eps: float,
    out_grid: SpatialGrid,
    r_cut: float = DEFAULT_R_CUT,
    prune_tol: float = DEFAULT_PRUNE_TOL,
) -> WaveField:
    """Superpose coherent states with weights ``c`` on ``out_grid``.

    Slices of nodes whose coefficients all fall below ``prune_tol * max|c|`` are skipped.
    """
    eps = check_positive("eps", eps)
    grid = c.grid
    if grid.d != out_grid.d:
        raise GridError(f"coefficients have d={grid.d}, output grid has d={out_grid.d}")
    out_grid.check_resolves(eps)
    d = grid.d
    mag = np.abs(c.values)
    cmax = mag.max() if mag.size else 0.0
    if cmax == 0.0:
        if mag.size == 0:
            warnings.warn("empty coefficient set; returning a zero field", stacklevel=2)
        return WaveField(out_grid, np.zeros(out_grid.shape + (c.N,), complex), eps)
    half = r_cut * np.sqrt(eps)
    order = []
    for a in range(d):
        order += [a, d + a]
    arr = np.transpose(c.values, order + [2 * d])
    for ax in range(d):
        # layout so far: (x_0, ..., x_{ax-1}, q_ax, p_ax, ..., N)
        arr = np.moveaxis(arr, (ax, ax + 1), (0, 1))
        skip = None
        if ax == 0:
            skip = np.abs(arr).reshape(arr.shape[0], -1).max(axis=1) < prune_tol * cmax
        arr = _inverse_axis(arr, out_grid.axes[ax], grid.q_axes[ax], grid.p_axes[ax], eps, half, skip)
        arr = np.moveaxis(arr, 0, ax)
    arr = arr * (_norm_const(d, eps) * grid.weight)
    return WaveField(out_grid, arr, eps)


def high_frequency_mass(
    u: WaveField,
    eps: float,
    delta: float,
    c_g: float = DEFAULT_CG,
    tol: float = DEFAULT_PRUNE_TOL,
    r_cut: float = DEFAULT_R_CUT,
) -> float:
    """Phase-space mass of ``F u`` outside ``{|q| <= 1/delta, delta <= |p| <= 1/delta}``.

    Integrated over an unclipped box that carries the coefficients down to ``tol``
    relative amplitude, so the omitted tail is below ``tol**2`` of the total.
    """
    grid = PhaseGrid.covering(u, eps, delta, c_g=c_g, tol=tol, r_cut=r_cut, clip=False)
    coef = fbi_forward(u, eps, grid, r_cut)
    q, p = grid.meshes()
    outside = ~in_region(q, p, delta)
    dens = np.sum(np.abs(coef.values) ** 2, axis=-1)
    return float(np.sum(dens[outside]) * grid.weight)


def wkb_initial_data(A, S, eps: float, grid: SpatialGrid, support_tol: float = 1e-12) -> WaveField:
    """Sample ``A(x) exp(i S(x)/eps)``.

    ``A`` maps points of shape ``(..., d)`` to amplitudes of shape ``(...)`` or
    ``(..., N)``; ``S`` returns real phases of shape ``(...)``. Raises if ``A``
    does not decay below ``support_tol * max|A|`` on the grid boundary.
    """
    eps = check_positive("eps", eps)
    x = grid.mesh()
    amp = np.asarray(A(x), dtype=complex)
    if amp.shape == grid.shape:
        amp = amp[..., None]
    phase = np.asarray(S(x), dtype=float)
    if phase.shape != grid.shape:
        raise DataError(f"phase has shape {phase.shape}, expected {grid.shape}")
    mod = np.sqrt(np.sum(np.abs(amp) ** 2, axis=-1))
    peak = mod.max()
    if peak > 0:
        for ax in range(grid.d):
            edge = max(np.take(mod, 0, axis=ax).max(), np.take(mod, -1, axis=ax).max())
            if edge > support_tol * peak:
                raise DataError(f"amplitude support reaches the grid boundary along axis {ax}")
    return WaveField(grid, amp * np.exp(1j * phase / eps)[..., None], eps)


class FBITransform(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` sizes a phase grid to the data, ``transform`` applies F.

    Parameters
    ----------
    eps : float or None
        Semiclassical parameter; taken from the fitted field when None.
    delta : float
        Cutoff parameter bounding the phase-space box.
    c_g : float
        Node spacing in units of sqrt(eps).
    r_cut : float
        Kernel truncation radius in units of sqrt(eps).
    tol : float
        Relative amplitude threshold for the covering window.
    clip : bool
        Restrict nodes to the cutoff support.
    """

    def __init__(self, eps=None, delta=0.5, c_g=DEFAULT_CG, r_cut=DEFAULT_R_CUT, tol=DEFAULT_PRUNE_TOL, clip=True):
        self.eps = eps
        self.delta = delta
        self.c_g = c_g
        self.r_cut = r_cut
        self.tol = tol
        self.clip = clip

    def fit(self, X: WaveField, y=None):
        self.eps_ = X.eps if self.eps is None else check_positive("eps", self.eps)
        self.grid_ = PhaseGrid.covering(X, self.eps_, self.delta, self.c_g, self.tol, self.r_cut, self.clip)
        self.spatial_grid_ = X.grid
        self.n_components_ = X.N
        return self

    def transform(self, X: WaveField) -> PacketCoefficients:
        check_is_fitted(self, "grid_")
        return fbi_forward(X, self.eps_, self.grid_, self.r_cut)

    def inverse_transform(self, C: PacketCoefficients, out_grid: SpatialGrid | None = None) -> WaveField:
        check_is_fitted(self, "grid_")
        return fbi_inverse(C, self.eps_, out_grid or self.spatial_grid_, self.r_cut, self.tol)
