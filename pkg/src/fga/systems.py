"""Strictly hyperbolic systems ``u_t + sum_l A_l(x) d_l u = 0`` and their eigen-triples.

A system provides flux matrices, the eigenvalues ``H_n(q, p)`` of the symbol
``sum_l p_l A_l(q)`` with biorthonormal left/right eigenvectors, and the
derivatives needed by the packet flow and the amplitude equations. All
evaluators are vectorized over a leading batch axis of points.

Array conventions (``M`` points, ``N`` components, ``d`` dimensions):

* ``flux(x)`` -> ``(M, d, N, N)`` with ``[m, l]`` = ``A_l(x_m)``
* ``flux_derivatives(x, k)`` -> ``(M, d, d, ..., N, N)`` with ``k`` derivative axes after ``l``
* ``eig(q, p)`` -> ``H (M, N)``, ``L (M, N, N)``, ``R (M, N, N)``; column ``n`` is branch ``n``
* ``eig_derivatives(q, p)`` -> ``dL_dq, dL_dp, dR_dq, dR_dp`` of shape ``(M, N, N, d)``
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from ._validation import HyperbolicityError, SingularityError, check_points, check_positive

GAP_TOL = 1e-8
FD_STEP = 1e-5


@dataclass(frozen=True)
class EigenBranch:
    """One eigen-triple at a single phase-space point."""

    n: int
    H: float
    L: np.ndarray
    R: np.ndarray
    dH_dq: np.ndarray
    dH_dp: np.ndarray
    dR_dq: np.ndarray | None = None
    dR_dp: np.ndarray | None = None
    dL_dq: np.ndarray | None = None
    dL_dp: np.ndarray | None = None


@dataclass
class HamiltonianDerivatives:
    """``H`` and its first/second derivatives for one branch; batch axis first.

    ``Hqp[m, a, b]`` is d^2 H / dq_a dp_b.
    """

    H: np.ndarray
    Hq: np.ndarray
    Hp: np.ndarray
    Hqq: np.ndarray | None = None
    Hqp: np.ndarray | None = None
    Hpp: np.ndarray | None = None


def _check_p(p: np.ndarray) -> None:
    if np.any(np.linalg.norm(p, axis=-1) < 1e-14):
        raise SingularityError("eigen-triples are singular at p = 0")


class SystemSpec(ABC):
    """Base class for strictly hyperbolic systems.

    Subclasses must implement :meth:`flux`. The defaults compute eigen-triples by a
    dense eigensolver, eigenvalue derivatives by Hellmann-Feynman and everything
    else by central differences with step ``FD_STEP``.
    """

    d: int
    N: int
    name: str = "system"
    constant_coefficients: bool = False

    @abstractmethod
    def flux(self, x) -> np.ndarray:
        """Flux matrices at points ``x`` of shape (M, d)."""

    # -- flux derivatives ---------------------------------------------------

    def flux_derivatives(self, x, order: int) -> np.ndarray:
        """Partial derivatives of every ``A_l`` of the given order (central differences).

        Orders above 2 must be supplied by subclasses.
        """
        x = check_points("x", x, self.d)
        M, d, N = len(x), self.d, self.N
        shape = (M, d) + (d,) * order + (N, N)
        if order == 0:
            return self.flux(x)
        if self.constant_coefficients:
            return np.zeros(shape)
        h = FD_STEP
        eye = np.eye(d)
        if order == 1:
            out = np.empty(shape)
            for j in range(d):
                out[:, :, j] = (self.flux(x + h * eye[j]) - self.flux(x - h * eye[j])) / (2 * h)
            return out
        if order == 2:
            h = 1e-4
            out = np.empty(shape)
            for a in range(d):
                for b in range(d):
                    ea, eb = h * eye[a], h * eye[b]
                    val = (
                        self.flux(x + ea + eb) - self.flux(x + ea - eb) - self.flux(x - ea + eb) + self.flux(x - ea - eb)
                    ) / (4 * h * h)
                    out[:, :, a, b] = val
            return out
        raise NotImplementedError(f"{type(self).__name__} provides flux derivatives only up to order 2")

    # -- symbol and eigen-triples --------------------------------------------

    def symbol(self, q, p) -> np.ndarray:
        q = check_points("q", q, self.d)
        p = check_points("p", p, self.d)
        return np.einsum("ml,mlij->mij", p, self.flux(q))

    def eig(self, q, p) -> tuple:
        """Eigenvalues ascending with biorthonormal eigenvectors.

        Right eigenvectors are unit length with their largest-magnitude component
        positive; left eigenvectors are the rows of the inverse.
        """
        q = check_points("q", q, self.d)
        p = check_points("p", p, self.d)
        _check_p(p)
        sym = self.symbol(q, p)
        w, v = np.linalg.eig(sym)
        scale = 1.0 + np.abs(w).max(axis=1, keepdims=True)
        if np.any(np.abs(w.imag) > 1e-10 * scale):
            raise HyperbolicityError("symbol has complex eigenvalues")
        order = np.argsort(w.real, axis=1, kind="stable")
        H = np.take_along_axis(w.real, order, axis=1)
        R = np.take_along_axis(v.real, order[:, None, :], axis=2)
        R = R / np.linalg.norm(R, axis=1, keepdims=True)
        big = np.take_along_axis(R, np.abs(R).argmax(axis=1)[:, None, :], axis=1)
        R = R * np.where(big < 0, -1.0, 1.0)
        L = np.transpose(np.linalg.inv(R), (0, 2, 1))
        _check_gap(H)
        return H, L, R

    def eig_derivatives(self, q, p) -> tuple:
        """Derivatives of ``L`` and ``R`` in q and p by central differences."""
        q = check_points("q", q, self.d)
        p = check_points("p", p, self.d)
        _, L0, R0 = self.eig(q, p)
        M, N, d = len(q), self.N, self.d
        out = [np.empty((M, N, N, d)) for _ in range(4)]
        eye = np.eye(d)
        hq = np.full(M, FD_STEP)
        hp = FD_STEP * np.maximum(1.0, np.linalg.norm(p, axis=1))
        for j in range(d):
            shifts = [
                (q + hq[:, None] * eye[j], q - hq[:, None] * eye[j], p, p, hq),
                (q, q, p + hp[:, None] * eye[j], p - hp[:, None] * eye[j], hp),
            ]
            for which, (qa, qb, pa, pb, h) in enumerate(shifts):
                _, La, Ra = self.eig(qa, pa)
                _, Lb, Rb = self.eig(qb, pb)
                sa = np.where(np.einsum("mcn,mcn->mn", R0, Ra) < 0, -1.0, 1.0)[:, None, :]
                sb = np.where(np.einsum("mcn,mcn->mn", R0, Rb) < 0, -1.0, 1.0)[:, None, :]
                hh = 2 * h[:, None, None]
                out[which][..., j] = (La * sa - Lb * sb) / hh
                out[2 + which][..., j] = (Ra * sa - Rb * sb) / hh
        return tuple(out)

    def hamiltonian(self, n: int, q, p, order: int = 1) -> HamiltonianDerivatives:
        """``H_n`` with first (and optionally second) derivatives."""
        q = check_points("q", q, self.d)
        p = check_points("p", p, self.d)
        H, L, R = self.eig(q, p)
        Hq, Hp = self._first_derivs(n, q, p, L, R)
        out = HamiltonianDerivatives(H[:, n], Hq, Hp)
        if order >= 2:
            d = self.d
            eye = np.eye(d)
            out.Hqq = np.empty((len(q), d, d))
            out.Hqp = np.empty((len(q), d, d))
            out.Hpp = np.empty((len(q), d, d))
            h = 1e-5
            for b in range(d):
                hp = h * np.maximum(1.0, np.linalg.norm(p, axis=1))[:, None]
                dq_a = self._first_derivs_at(n, q + h * eye[b], p)
                dq_b = self._first_derivs_at(n, q - h * eye[b], p)
                dp_a = self._first_derivs_at(n, q, p + hp * eye[b])
                dp_b = self._first_derivs_at(n, q, p - hp * eye[b])
                out.Hqq[:, :, b] = (dq_a[0] - dq_b[0]) / (2 * h)
                out.Hqp[:, b, :] = (dq_a[1] - dq_b[1]) / (2 * h)
                out.Hpp[:, :, b] = (dp_a[1] - dp_b[1]) / (2 * hp)
            out.Hqq = 0.5 * (out.Hqq + np.transpose(out.Hqq, (0, 2, 1)))
            out.Hpp = 0.5 * (out.Hpp + np.transpose(out.Hpp, (0, 2, 1)))
        return out

    def _first_derivs_at(self, n, q, p):
        _, L, R = self.eig(q, p)
        return self._first_derivs(n, q, p, L, R)

    def _first_derivs(self, n, q, p, L, R):
        # Hellmann-Feynman: dH/dp_l = L^T A_l R, dH/dq_j = L^T (sum_l p_l d_j A_l) R
        Ln, Rn = L[:, :, n], R[:, :, n]
        A = self.flux(q)
        Hp = np.einsum("mi,mlij,mj->ml", Ln, A, Rn)
        if self.constant_coefficients:
            Hq = np.zeros_like(Hp)
        else:
            dA = self.flux_derivatives(q, 1)
            Hq = np.einsum("mi,ml,mlkij,mj->mk", Ln, p, dA, Rn)
        return Hq, Hp


def _check_gap(H: np.ndarray, tol: float = GAP_TOL) -> None:
    if H.shape[1] > 1:
        gap = np.diff(H, axis=1).min()
        if gap < tol:
            raise HyperbolicityError(f"eigenvalue gap {gap:.3g} below {tol:g}")


class GenericSystem(SystemSpec):
    """System defined by a user flux callable.

    Parameters
    ----------
    d, N : int
        Spatial dimension and number of components.
    flux_fn : callable
        Maps points (M, d) to flux matrices (M, d, N, N).
    flux_derivative_fn : callable, optional
        ``(x, order) -> array`` overriding the finite-difference derivatives.
    constant_coefficients : bool
        Declares the flux independent of x.
    """

    def __init__(self, d, N, flux_fn, flux_derivative_fn=None, constant_coefficients=False, name="generic"):
        self.d = int(d)
        self.N = int(N)
        self._flux_fn = flux_fn
        self._dflux_fn = flux_derivative_fn
        self.constant_coefficients = bool(constant_coefficients)
        self.name = name

    def flux(self, x) -> np.ndarray:
        x = check_points("x", x, self.d)
        return np.asarray(self._flux_fn(x), dtype=float).reshape(len(x), self.d, self.N, self.N)

    def flux_derivatives(self, x, order: int) -> np.ndarray:
        if self._dflux_fn is not None and order > 0:
            return np.asarray(self._dflux_fn(check_points("x", x, self.d), order), dtype=float)
        return super().flux_derivatives(x, order)


class Acoustic2D(SystemSpec):
    """Two-dimensional acoustics with unit sound speed, state (v_1, v_2, pressure).

    Branches in ascending order: 0 is ``-|p|``, 1 is the stationary branch ``0``,
    2 is ``+|p|``. Eigenvectors use closed forms::

        R_pm = (pm p_1, pm p_2, |p|),        L_pm = (pm p_1/|p|^2, pm p_2/|p|^2, 1/|p|) / 2
        R_0  = (p_2, -p_1, 0),               L_0  = (p_2, -p_1, 0) / |p|^2
    """

    d = 2
    N = 3
    name = "acoustic2d"
    constant_coefficients = True
    MINUS, ZERO, PLUS = 0, 1, 2
    _signs = (-1.0, 0.0, 1.0)

    _A = np.array(
        [
            [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        ]
    )

    def flux(self, x) -> np.ndarray:
        x = check_points("x", x, 2)
        return np.broadcast_to(self._A, (len(x), 2, 3, 3)).copy()

    def flux_derivatives(self, x, order: int) -> np.ndarray:
        x = check_points("x", x, 2)
        if order == 0:
            return self.flux(x)
        return np.zeros((len(x), 2) + (2,) * order + (3, 3))

    def eig(self, q, p) -> tuple:
        check_points("q", q, 2)
        p = check_points("p", p, 2)
        _check_p(p)
        r = np.linalg.norm(p, axis=1)
        p1, p2 = p[:, 0], p[:, 1]
        M = len(p)
        H = np.stack([-r, np.zeros(M), r], axis=1)
        R = np.empty((M, 3, 3))
        L = np.empty((M, 3, 3))
        R[:, :, 0] = np.stack([-p1, -p2, r], axis=1)
        R[:, :, 1] = np.stack([p2, -p1, np.zeros(M)], axis=1)
        R[:, :, 2] = np.stack([p1, p2, r], axis=1)
        r2 = r * r
        L[:, :, 0] = 0.5 * np.stack([-p1 / r2, -p2 / r2, 1 / r], axis=1)
        L[:, :, 1] = np.stack([p2 / r2, -p1 / r2, np.zeros(M)], axis=1)
        L[:, :, 2] = 0.5 * np.stack([p1 / r2, p2 / r2, 1 / r], axis=1)
        return H, L, R

    def eig_derivatives(self, q, p) -> tuple:
        check_points("q", q, 2)
        p = check_points("p", p, 2)
        _check_p(p)
        M = len(p)
        r = np.linalg.norm(p, axis=1)
        r2 = r * r
        eye = np.eye(2)
        dLp = np.zeros((M, 3, 3, 2))
        dRp = np.zeros((M, 3, 3, 2))
        # d(p_i/|p|^2)/dp_j and d(1/|p|)/dp_j
        dpi = eye[None] / r2[:, None, None] - 2 * p[:, :, None] * p[:, None, :] / (r2 * r2)[:, None, None]
        dinv = -p / (r2 * r)[:, None]
        for n, s in ((0, -1.0), (2, 1.0)):
            dRp[:, 0, n, :] = s * eye[0]
            dRp[:, 1, n, :] = s * eye[1]
            dRp[:, 2, n, :] = p / r[:, None]
            dLp[:, 0, n, :] = 0.5 * s * dpi[:, 0, :]
            dLp[:, 1, n, :] = 0.5 * s * dpi[:, 1, :]
            dLp[:, 2, n, :] = 0.5 * dinv
        dRp[:, 0, 1, :] = eye[1]
        dRp[:, 1, 1, :] = -eye[0]
        dLp[:, 0, 1, :] = dpi[:, 1, :]
        dLp[:, 1, 1, :] = -dpi[:, 0, :]
        zero = np.zeros_like(dLp)
        return zero, dLp, zero.copy(), dRp

    def hamiltonian(self, n: int, q, p, order: int = 1) -> HamiltonianDerivatives:
        check_points("q", q, 2)
        p = check_points("p", p, 2)
        _check_p(p)
        s = self._signs[n]
        r = np.linalg.norm(p, axis=1)
        phat = p / r[:, None]
        out = HamiltonianDerivatives(s * r, np.zeros_like(p), s * phat)
        if order >= 2:
            M = len(p)
            out.Hqq = np.zeros((M, 2, 2))
            out.Hqp = np.zeros((M, 2, 2))
            out.Hpp = s * (np.eye(2)[None] - phat[:, :, None] * phat[:, None, :]) / r[:, None, None]
        return out


class TwoBranch1D(SystemSpec):
    """One-dimensional system with flux ``c(x) [[0, 1], [1, 0]]``.

    ``c(x) = c0 + amplitude * sin(wavenumber * x)`` must stay positive. Branches:
    0 is ``-c(q)|p|`` with ``R = L = (1, -sign p)/sqrt 2``, 1 is ``+c(q)|p|`` with
    ``R = L = (1, sign p)/sqrt 2``.
    """

    d = 1
    N = 2
    name = "twobranch1d"
    _B = np.array([[0.0, 1.0], [1.0, 0.0]])

    def __init__(self, c0: float = 1.0, amplitude: float = 0.0, wavenumber: float = 1.0):
        self.c0 = check_positive("c0", c0)
        self.amplitude = float(amplitude)
        self.wavenumber = float(wavenumber)
        if abs(self.amplitude) >= self.c0:
            raise ValueError("sound speed must stay positive: need |amplitude| < c0")
        self.constant_coefficients = self.amplitude == 0.0

    def speed(self, x, order: int = 0) -> np.ndarray:
        """``c`` or its derivative of the given order at points ``x`` (any shape)."""
        x = np.asarray(x, dtype=float)
        k = self.wavenumber
        val = self.amplitude * k**order * np.sin(k * x + order * np.pi / 2)
        return val + self.c0 if order == 0 else val

    def flux(self, x) -> np.ndarray:
        x = check_points("x", x, 1)
        return self.speed(x[:, 0])[:, None, None, None] * self._B

    def flux_derivatives(self, x, order: int) -> np.ndarray:
        x = check_points("x", x, 1)
        c = self.speed(x[:, 0], order)
        return c.reshape((-1,) + (1,) * (order + 1) + (1, 1)) * self._B

    def eig(self, q, p) -> tuple:
        q = check_points("q", q, 1)
        p = check_points("p", p, 1)
        _check_p(p)
        c = self.speed(q[:, 0])
        r = np.abs(p[:, 0])
        s = np.sign(p[:, 0])
        H = np.stack([-c * r, c * r], axis=1)
        R = np.empty((len(p), 2, 2))
        R[:, 0, :] = 1.0
        R[:, 1, 0] = -s
        R[:, 1, 1] = s
        R /= np.sqrt(2.0)
        return H, R.copy(), R

    def eig_derivatives(self, q, p) -> tuple:
        check_points("q", q, 1)
        p = check_points("p", p, 1)
        _check_p(p)
        z = np.zeros((len(p), 2, 2, 1))
        return z, z.copy(), z.copy(), z.copy()

    def hamiltonian(self, n: int, q, p, order: int = 1) -> HamiltonianDerivatives:
        q = check_points("q", q, 1)
        p = check_points("p", p, 1)
        _check_p(p)
        sgn = -1.0 if n == 0 else 1.0
        x, pp = q[:, 0], p[:, 0]
        r, s = np.abs(pp), np.sign(pp)
        c, c1 = self.speed(x), self.speed(x, 1)
        out = HamiltonianDerivatives(sgn * c * r, (sgn * c1 * r)[:, None], (sgn * c * s)[:, None])
        if order >= 2:
            out.Hqq = (sgn * self.speed(x, 2) * r)[:, None, None]
            out.Hqp = (sgn * c1 * s)[:, None, None]
            out.Hpp = np.zeros((len(q), 1, 1))
        return out


# ---------------------------------------------------------------------------
# operations


def eigensolve(sys: SystemSpec, q, p) -> list:
    """Eigen-triples at a single point ``(q, p)``, ascending in ``H``."""
    q = np.atleast_1d(np.asarray(q, dtype=float)).reshape(1, sys.d)
    p = np.atleast_1d(np.asarray(p, dtype=float)).reshape(1, sys.d)
    H, L, R = sys.eig(q, p)
    dLq, dLp, dRq, dRp = sys.eig_derivatives(q, p)
    out = []
    for n in range(sys.N):
        hd = sys.hamiltonian(n, q, p)
        out.append(
            EigenBranch(
                n=n,
                H=float(H[0, n]),
                L=L[0, :, n].copy(),
                R=R[0, :, n].copy(),
                dH_dq=hd.Hq[0].copy(),
                dH_dp=hd.Hp[0].copy(),
                dR_dq=dRq[0, :, n].copy(),
                dR_dp=dRp[0, :, n].copy(),
                dL_dq=dLq[0, :, n].copy(),
                dL_dp=dLp[0, :, n].copy(),
            )
        )
    return out


def sample_region(d: int, delta: float, samples: int, seed: int = 0) -> tuple:
    """Deterministic low-discrepancy points of ``{|q| <= 1/delta, delta <= |p| <= 1/delta}``.

    Every sampled direction is evaluated at the two extreme radii ``delta`` and
    ``1/delta`` as well, so boundary extrema are hit exactly.
    """
    delta = check_positive("delta", delta)
    sob = qmc.Sobol(d=2 * d + 1, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(samples, 2))))
    u = sob.random_base2(m)[:samples]
    u = np.clip(u, 1e-12, 1 - 1e-12)
    gq = ndtri(u[:, :d])
    gq /= np.linalg.norm(gq, axis=1, keepdims=True)
    rq = u[:, d] ** (1.0 / d) / delta
    q = gq * rq[:, None]
    gp = ndtri(u[:, d + 1 :])
    gp /= np.linalg.norm(gp, axis=1, keepdims=True)
    rp = delta + u[:, -1] * (1 / delta - delta)
    rp_all = np.concatenate([rp, np.full(samples, delta), np.full(samples, 1 / delta)])
    q_all = np.concatenate([q, q, q])
    p_all = np.concatenate([gp, gp, gp]) * rp_all[:, None]
    return q_all, p_all


def hyperbolicity_gap(sys: SystemSpec, delta: float, samples: int = 512, seed: int = 0) -> float:
    """Minimum pairwise eigenvalue gap over a quasi-random sample of the cutoff region."""
    q, p = sample_region(sys.d, delta, samples, seed)
    sym = sys.symbol(q, p)
    w = np.sort(np.linalg.eigvals(sym).real, axis=1)
    gap = float(np.diff(w, axis=1).min()) if sys.N > 1 else np.inf
    if gap < GAP_TOL:
        raise HyperbolicityError(f"system is not strictly hyperbolic on the region: gap {gap:.3g}")
    return gap


def l0_dagger_from(H: np.ndarray, L: np.ndarray, R: np.ndarray, n: int) -> np.ndarray:
    """Batched ``i * sum_{m != n} (H_n - H_m)^{-1} R_m L_m^T`` from eigen data."""
    M, N = H.shape
    out = np.zeros((M, N, N), dtype=complex)
    for m in range(N):
        if m == n:
            continue
        gap = H[:, n] - H[:, m]
        if np.any(np.abs(gap) < GAP_TOL):
            raise HyperbolicityError("branches coincide; partial inverse undefined")
        out += (1j / gap)[:, None, None] * np.einsum("mi,mj->mij", R[:, :, m], L[:, :, m])
    return out


def l0_dagger(sys: SystemSpec, q, p, n: int) -> np.ndarray:
    """Partial inverse of ``i(sum_l p_l A_l - H_n)`` on the complement of branch ``n``."""
    qa = np.atleast_1d(np.asarray(q, dtype=float)).reshape(-1, sys.d)
    pa = np.atleast_1d(np.asarray(p, dtype=float)).reshape(-1, sys.d)
    H, L, R = sys.eig(qa, pa)
    out = l0_dagger_from(H, L, R, n)
    return out[0] if out.shape[0] == 1 and np.ndim(p) <= 1 else out


def assumption_b_check(sys: SystemSpec, delta: float, samples: int = 512, seed: int = 0) -> dict:
    """Growth ratios ``max |p . dH/dq| / |p|^2`` and ``max |q . dH/dp| / |q|^2`` over the region."""
    q, p = sample_region(sys.d, delta, samples, seed)
    r1 = r2 = 0.0
    rq2 = np.sum(q * q, axis=1)
    keep = rq2 > 1e-14
    for n in range(sys.N):
        hd = sys.hamiltonian(n, q, p)
        r1 = max(r1, float(np.max(np.abs(np.sum(p * hd.Hq, axis=1)) / np.sum(p * p, axis=1))))
        if np.any(keep):
            r2 = max(r2, float(np.max(np.abs(np.sum(q * hd.Hp, axis=1))[keep] / rq2[keep])))
    return {"p_dot_dHdq_ratio": r1, "q_dot_dHdp_ratio": r2, "samples": int(len(q))}


def taylor_coefficient(sys: SystemSpec, x, order: int) -> np.ndarray:
    """``d^order A_l / order!`` at ``x``; shape as :meth:`SystemSpec.flux_derivatives`."""
    return sys.flux_derivatives(x, order) / factorial(order)


def make_system(name: str, **params) -> SystemSpec:
    """Builtin system by CLI name."""
    key = name.strip().lower()
    if key == "acoustic2d":
        if params:
            raise ValueError(f"acoustic2d takes no parameters, got {sorted(params)}")
        return Acoustic2D()
    if key == "twobranch1d":
        return TwoBranch1D(**params)
    raise ValueError(f"unknown system {name!r}; expected acoustic2d or twobranch1d")
