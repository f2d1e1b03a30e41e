"""Amplitude equations and symbol calculus on the phase grid.

The leading symbol of branch ``n`` is ``M0 = sigma0 R_n(Q, P) L_n(q, p)^T`` where
``sigma0`` solves ``d sigma0/dt = -lambda sigma0`` from ``2^{d/2}``. The first
correction is ``M1 = sigma1 R_n(Q, P) L_n(q, p)^T + Mperp1`` with

    Mperp1 = L0dagger(Q, P) (L1 M0),
    d sigma1/dt = -lambda sigma1 - L_n(Q, P)^T [L1 Mperp1 + L2 M0] R_n(q, p),   sigma1(0) = 0.

``L1`` and ``L2`` are differential operators in ``(q, p)`` built from
``d_z = d_q - i d_p``, the inverse of ``Z`` and ``d_z Q``; they are evaluated by
second-order finite differences on the tensor phase grid, so the first
correction is integrated for all grid nodes at once.

Index conventions: ``Z[j, k] = d_{z_j}(Q_k + i P_k)``, ``dzQ[j, s] = d_{z_s} Q_j``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy import ndimage

from ._validation import GridError, StepSizeError, TrajectoryError, check_points, check_positive
from .flow import (
    TrajectoryState,
    default_dt,
    dzQ_from_jacobian,
    flow_rhs,
    jacobian_blocks,
    n_steps,
    rk4_step,
    symplectic_residual,
    SYMPLECTIC_TOL,
    z_from_jacobian,
)
from .systems import SystemSpec, l0_dagger_from

LAMBDA_STEP_LIMIT = 0.1
DIRECTIONAL_STEP = 1e-4


# ---------------------------------------------------------------------------
# local geometry along trajectories


@dataclass
class LocalData:
    """Eigen data, flux data and Z quantities at ``(Q, P)`` for ``M`` trajectories."""

    n: int
    P: np.ndarray
    H_all: np.ndarray
    L_all: np.ndarray
    R_all: np.ndarray
    hd: object
    dL_dQ: np.ndarray  # (M, N, d) for branch n
    dL_dP: np.ndarray
    dR_dQ: np.ndarray
    dR_dP: np.ndarray
    A: np.ndarray  # (M, d, N, N)
    dA: np.ndarray  # (M, d, d, N, N); [m, l, j] = d_j A_l
    d2A: np.ndarray  # (M, d, d, d, N, N); [m, l, j, k] = d_j d_k A_l
    Z: np.ndarray
    Zinv: np.ndarray
    dzQ: np.ndarray
    dzP: np.ndarray
    has_dA: bool = True

    @property
    def Ln(self) -> np.ndarray:
        return self.L_all[:, :, self.n]

    @property
    def Rn(self) -> np.ndarray:
        return self.R_all[:, :, self.n]


def local_data(sys: SystemSpec, n: int, Q, P, F, ref_R=None) -> LocalData:
    """Evaluate everything the amplitude equations need at ``(Q, P)``.

    ``ref_R`` (M, N) fixes the sign of branch ``n`` eigenvectors by overlap, which
    keeps them continuous along a trajectory for generic systems.
    """
    H, L, R = sys.eig(Q, P)
    dLq, dLp, dRq, dRp = sys.eig_derivatives(Q, P)
    dLq, dLp, dRq, dRp = dLq[:, :, n], dLp[:, :, n], dRq[:, :, n], dRp[:, :, n]
    if ref_R is not None:
        s = np.where(np.sum(R[:, :, n] * ref_R, axis=1) < 0, -1.0, 1.0)
        if np.any(s < 0):
            L, R = L.copy(), R.copy()
            L[:, :, n] *= s[:, None]
            R[:, :, n] *= s[:, None]
            dLq, dLp = dLq * s[:, None, None], dLp * s[:, None, None]
            dRq, dRp = dRq * s[:, None, None], dRp * s[:, None, None]
    hd = sys.hamiltonian(n, Q, P, order=2)
    Z = z_from_jacobian(F)
    _, _, Pq, Pp = jacobian_blocks(F)
    return LocalData(
        n=n,
        P=P,
        H_all=H,
        L_all=L,
        R_all=R,
        hd=hd,
        dL_dQ=dLq,
        dL_dP=dLp,
        dR_dQ=dRq,
        dR_dP=dRp,
        A=sys.flux(Q),
        dA=sys.flux_derivatives(Q, 1),
        d2A=sys.flux_derivatives(Q, 2),
        Z=Z,
        Zinv=np.linalg.inv(Z),
        dzQ=dzQ_from_jacobian(F),
        dzP=Pq - 1j * Pp,
        has_dA=not sys.constant_coefficients,
    )


def lambda_from(ld: LocalData) -> np.ndarray:
    """The three-term rate ``lambda_n`` from local data; shape (M,)."""
    Ln, Rn, hd = ld.Ln, ld.Rn, ld.hd
    N = Ln.shape[1]
    eye = np.eye(N)
    LdRQ = np.einsum("mi,mik->mk", Ln, ld.dR_dQ)
    LdRP = np.einsum("mi,mik->mk", Ln, ld.dR_dP)
    term1 = np.sum(hd.Hp * LdRQ - hd.Hq * LdRP, axis=1)
    # d_{z_k} of L_n(Q(q,p), P(q,p)) by the chain rule through the Jacobian
    dzL = ld.dL_dQ @ ld.dzQ + ld.dL_dP @ ld.dzP
    W = ld.A - hd.Hp[:, :, None, None] * eye + 1j * hd.Hq[:, :, None, None] * eye
    if ld.has_dA:
        W = W - 1j * np.einsum("ml,mljab->mjab", ld.P, ld.dA)
    WR = (W @ Rn[:, None, :, None])[..., 0]
    term2 = -np.sum((WR @ dzL) * ld.Zinv, axis=(1, 2))
    if not ld.has_dA:
        return term1 + term2
    V = -np.transpose(ld.dA, (0, 2, 1, 3, 4)) + 0.5j * np.einsum("ml,mljkab->mjkab", ld.P, ld.d2A)
    LVR = (Ln[:, None, None, None, :] @ V @ Rn[:, None, None, :, None])[..., 0, 0]
    coef = ld.dzQ @ np.transpose(ld.Zinv, (0, 2, 1))
    term3 = np.sum(coef * LVR, axis=(1, 2))
    return term1 + term2 + term3


def lambda_eval(sys: SystemSpec, n: int, state: TrajectoryState) -> np.ndarray:
    """``lambda_n`` along the trajectories of ``state``."""
    ld = local_data(sys, n, state.Q, state.P, state.F)
    return lambda_from(ld)


# ---------------------------------------------------------------------------
# leading order along independent trajectories


@dataclass
class AmplitudeState:
    """Trajectory state together with amplitudes ``sigma0`` (and ``sigma1``)."""

    state: TrajectoryState
    sigma0: np.ndarray
    sigma1: np.ndarray | None = None


def _advance_checks(y_new, valid, h, lam):
    res = symplectic_residual(y_new["F"][valid]) if np.any(valid) else np.zeros(1)
    if res.max() > SYMPLECTIC_TOL:
        raise StepSizeError(f"symplectic residual {res.max():.3g}; reduce dt")
    if lam is not None and np.any(valid) and np.abs(lam[valid]).max() * h > LAMBDA_STEP_LIMIT:
        raise StepSizeError(f"|lambda| dt = {np.abs(lam[valid]).max() * h:.3g} exceeds {LAMBDA_STEP_LIMIT}; reduce dt")


def sigma0_evolve(
    sys: SystemSpec,
    n: int,
    q,
    p,
    t_final: float,
    dt: float | None = None,
    *,
    delta: float = 0.5,
    save_every: int | None = None,
) -> list:
    """Integrate flow and ``sigma0`` together for independent nodes.

    Returns a list of :class:`AmplitudeState` at ``t = 0``, every ``save_every``
    steps and at ``t_final``. Nodes whose ``|P|`` falls below ``delta/4`` are
    frozen and marked invalid.
    """
    q = check_points("q", q, sys.d)
    p = check_points("p", p, sys.d)
    dt = default_dt(delta) if dt is None else check_positive("dt", dt)
    M, d = q.shape
    p_floor = delta / 4
    if np.any(np.linalg.norm(p, axis=1) < p_floor):
        raise TrajectoryError("initial momenta below p_floor")
    F0 = np.broadcast_to(np.eye(2 * d), (M, 2 * d, 2 * d)).copy()
    y = {"Q": q.copy(), "P": p.copy(), "S": np.zeros(M), "F": F0, "s0": np.full(M, 2.0 ** (d / 2), complex)}
    out = [AmplitudeState(TrajectoryState(0.0, y["Q"], y["P"], y["S"], y["F"]), y["s0"])]
    if t_final == 0:
        return out
    steps = n_steps(t_final, dt)
    h = t_final / steps
    valid = np.ones(M, dtype=bool)
    ref = {"R": sys.eig(q, p)[2][:, :, n]}
    last_lam = {}

    def rhs(t, yy):
        der = {k: np.zeros_like(v) for k, v in yy.items()}
        idx = np.nonzero(valid)[0]
        if idx.size == 0:
            return der
        ld = local_data(sys, n, yy["Q"][idx], yy["P"][idx], yy["F"][idx], ref["R"][idx])
        lam = lambda_from(ld)
        dQ, dP, dS, dF = flow_rhs(ld.hd, yy["P"][idx], yy["F"][idx])
        der["Q"][idx], der["P"][idx], der["S"][idx], der["F"][idx] = dQ, dP, dS, dF
        der["s0"][idx] = -lam * yy["s0"][idx]
        if "lam" not in last_lam:
            full = np.zeros(M, complex)
            full[idx] = lam
            last_lam["lam"] = full
        return der

    for step in range(1, steps + 1):
        last_lam.clear()
        y_new = rk4_step(rhs, y, (step - 1) * h, h)
        lost = valid & (np.linalg.norm(y_new["P"], axis=1) < p_floor)
        if np.any(lost):
            for k in y_new:
                y_new[k][lost] = y[k][lost]
            valid = valid & ~lost
        _advance_checks(y_new, valid, h, last_lam.get("lam"))
        y = y_new
        if np.any(valid):
            R_now = sys.eig(y["Q"][valid], y["P"][valid])[2][:, :, n]
            s = np.where(np.sum(R_now * ref["R"][valid], axis=1) < 0, -1.0, 1.0)
            ref["R"][valid] = R_now * s[:, None]
        if step == steps or (save_every and step % save_every == 0):
            st = TrajectoryState(step * h, y["Q"], y["P"], y["S"], y["F"], valid.copy())
            out.append(AmplitudeState(st, y["s0"]))
    return out


def leading_symbol(sys: SystemSpec, n: int, state: TrajectoryState, sigma0, q, p, ref_R=None) -> np.ndarray:
    """``M0 = sigma0 R_n(Q, P) L_n(q, p)^T`` per trajectory; shape (M, N, N)."""
    _, L0, R0 = sys.eig(q, p)
    _, _, R = sys.eig(state.Q, state.P)
    Rn = R[:, :, n]
    ref = R0[:, :, n] if ref_R is None else ref_R
    # orient R(Q, P) continuously from R(q, p); exact for the closed-form builtins
    s = np.where(np.sum(Rn * ref, axis=1) < 0, -1.0, 1.0)
    return np.asarray(sigma0)[:, None, None] * np.einsum("mi,mj->mij", Rn * s[:, None], L0[:, :, n])


# ---------------------------------------------------------------------------
# symbol calculus on a tensor grid


def _bc(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Append singleton axes so grid scalar ``s`` broadcasts against field ``b``."""
    return s.reshape(s.shape + (1,) * (b.ndim - s.ndim))


class SymbolCalculus:
    """``d_z``, ``D``, ``G`` and ``T`` operators on fields sampled on a phase grid.

    Fields have shape ``grid_shape + trailing`` where ``grid_shape`` lists the d
    q-axes followed by the d p-axes. ``Zinv`` and ``dzQ`` have shape
    ``grid_shape + (d, d)``.
    """

    def __init__(self, grid_shape, spacing: float, Zinv: np.ndarray, dzQ: np.ndarray):
        self.shape = tuple(grid_shape)
        if len(self.shape) % 2:
            raise GridError("phase grid shape must have 2d axes")
        self.d = len(self.shape) // 2
        if Zinv.shape != self.shape + (self.d, self.d) or dzQ.shape != Zinv.shape:
            raise GridError("Zinv and dzQ must be sampled on the full tensor grid")
        if any(s < 3 for s in self.shape):
            raise GridError("finite differences need at least 3 nodes per axis")
        self.spacing = float(spacing)
        self.Zinv = Zinv
        self.dzQ = dzQ

    @classmethod
    def at_start(cls, grid_shape, spacing: float) -> "SymbolCalculus":
        """Calculus of the identity flow: ``Z = 2 Id`` and ``d_z Q = Id``."""
        d = len(grid_shape) // 2
        eye = np.broadcast_to(np.eye(d, dtype=complex), tuple(grid_shape) + (d, d))
        return cls(grid_shape, spacing, 0.5 * eye.copy(), eye.copy())

    def _check(self, f: np.ndarray) -> None:
        if f.shape[: len(self.shape)] != self.shape:
            raise GridError(f"field shape {f.shape} is not sampled on grid {self.shape}")

    def dz(self, f: np.ndarray) -> list:
        """``[d_{z_1} f, ..., d_{z_d} f]`` by central differences, one-sided at the edges."""
        self._check(f)
        h = self.spacing
        return [
            np.gradient(f, h, axis=l, edge_order=2) - 1j * np.gradient(f, h, axis=self.d + l, edge_order=2)
            for l in range(self.d)
        ]

    def D(self, j: int, b: np.ndarray) -> np.ndarray:
        """``-sum_l d_{z_l}(b Zinv[j, l])``."""
        self._check(b)
        out = 0
        for l in range(self.d):
            prod = b * _bc(self.Zinv[..., j, l], b)
            out = out - self.dz(prod)[l]
        return out

    def G(self, j1: int, j2: int, b: np.ndarray) -> np.ndarray:
        """``sum_l d_{z_l} Q_{j1} Zinv[j2, l] b`` (pointwise)."""
        self._check(b)
        g = np.sum(self.dzQ[..., j1, :] * self.Zinv[..., j2, :], axis=-1)
        return _bc(g, b) * b

    def T(self, idx, b: np.ndarray) -> dict:
        """Expansion ``{k: T^{nu,k} b}`` of the nested operator in powers of eps."""
        idx = tuple(idx)
        nu = len(idx)
        if nu > 4:
            raise ValueError("T is supported for multi-indices of length <= 4")
        if nu == 0:
            return {0: b}
        out: dict = {}
        jn = idx[-1]
        for k, f in self.T(idx[:-1], self.D(jn, b)).items():
            out[k + 1] = out.get(k + 1, 0) + f
        for a in range(nu - 1):
            rest = idx[:a] + idx[a + 1 : -1]
            for k, f in self.T(rest, self.G(idx[a], jn, b)).items():
                out[k + 1] = out.get(k + 1, 0) + f
        return out

    def T_coeff(self, idx, k: int, b: np.ndarray) -> np.ndarray:
        """The ``eps^k`` coefficient ``T^{nu,k} b`` (zero field when absent)."""
        return self.T(idx, b).get(k, np.zeros_like(b, dtype=complex))


# ---------------------------------------------------------------------------
# L operators


def _flux_taylor(A_derivs: dict, P: np.ndarray, idx) -> np.ndarray:
    """``-d^{nu-1}A_{j_nu}/(nu-1)! + i/nu! P_l d^nu A_l`` for multi-index ``idx``."""
    nu = len(idx)
    lower = A_derivs[nu - 1][(slice(None), idx[-1]) + tuple(idx[:-1])]
    upper = np.einsum("...l,...lab->...ab", P, A_derivs[nu][(slice(None), slice(None)) + tuple(idx)])
    return -lower / factorial(nu - 1) + 1j * upper / factorial(nu)


def op_L1(calc: SymbolCalculus, M: np.ndarray, dtM: np.ndarray, Qdot, Pdot, A, dA, d2A, P) -> np.ndarray:
    """First-order operator ``L1`` applied to a matrix field ``M`` on the grid.

    All coefficient arrays are grid-shaped: ``Qdot, Pdot, P`` are ``grid + (d,)``,
    ``A`` is ``grid + (d, N, N)``, ``dA``/``d2A`` follow the flux-derivative layout.
    """
    d = calc.d
    N = M.shape[-1]
    eye = np.eye(N)
    out = np.array(dtM, dtype=complex, copy=True)
    PdA = np.einsum("...l,...ljab->...jab", P, dA)
    for j in range(d):
        B = (Pdot[..., j] - 1j * Qdot[..., j])[..., None, None] * eye + 1j * A[..., j, :, :] + PdA[..., j, :, :]
        out += 1j * calc.D(j, B @ M)
    P_d2A = np.einsum("...l,...ljkab->...jkab", P, d2A)
    for j1 in range(d):
        for j2 in range(d):
            C = 1j * dA[..., j2, j1, :, :] + 0.5 * P_d2A[..., j1, j2, :, :]
            if np.any(C):
                out += 1j * calc.G(j1, j2, C @ M)
    return out


def op_L2(calc: SymbolCalculus, M: np.ndarray, P: np.ndarray, A_derivs: dict) -> np.ndarray:
    """Second-order operator ``L2 M = sum_{nu=2..4} T^{nu,2}(c_nu M)``.

    ``A_derivs[k]`` holds grid-shaped flux derivatives of order ``k`` (0..4).
    """
    d = calc.d
    out = np.zeros_like(M, dtype=complex)
    for nu in (2, 3, 4):
        for idx in itertools.product(range(d), repeat=nu):
            c = _flux_taylor(A_derivs, P, idx)
            if not np.any(c):
                continue
            out += calc.T_coeff(idx, 2, c @ M)
    return out


# ---------------------------------------------------------------------------
# grid-global integration with the first correction


@dataclass
class BranchSolution:
    """Flow, amplitudes and symbols of one branch on a phase grid at time ``t``.

    Node arrays are flattened over ``grid.shape``; ``active`` marks nodes that were
    integrated (``|p| >= delta/4``). Per-node arrays cover the active nodes only and
    ``state.valid`` flags those whose momentum stayed above ``delta/4``.
    """

    n: int
    t: float
    grid: object
    active: np.ndarray
    state: TrajectoryState
    sigma0: np.ndarray
    sigma1: np.ndarray | None
    M0: np.ndarray
    Mperp1: np.ndarray | None
    M1: np.ndarray | None
    L_qp: np.ndarray
    fd_error_estimate: float | None = None

    def symbol(self, eps: float, K: int) -> np.ndarray:
        """``M0 + eps M1`` (K = 2) or ``M0`` (K = 1) on the flattened grid."""
        if K == 1:
            return self.M0
        if self.M1 is None:
            raise ValueError("first correction was not computed")
        return self.M0 + eps * self.M1


class _GridBranch:
    """Evaluator of the grid-global right-hand side for one branch."""

    def __init__(self, sys: SystemSpec, n: int, grid, active: np.ndarray, q: np.ndarray, p: np.ndarray):
        self.sys, self.n, self.grid = sys, n, grid
        self.shape = grid.shape
        self.active = active
        self.idx = np.nonzero(active)[0]
        self.q, self.p = q, p
        self.M = active.size
        self.d = sys.d
        self.N = sys.N
        _, L0, R0 = sys.eig(q[self.idx], p[self.idx])
        self.L_qp = L0[:, :, n]
        self.R_ref = R0[:, :, n].copy()
        self.need_L2 = not sys.constant_coefficients

    def scatter(self, vals: np.ndarray, fill=0.0) -> np.ndarray:
        out = np.full((self.M,) + vals.shape[1:], fill, dtype=vals.dtype)
        out[self.idx] = vals
        return out.reshape(self.shape + vals.shape[1:])

    def gather(self, field: np.ndarray) -> np.ndarray:
        return field.reshape((self.M,) + field.shape[len(self.shape) :])[self.idx]

    def leading(self, y):
        """Local data, rates, M0 and its time derivative for active nodes."""
        ld = local_data(self.sys, self.n, y["Q"], y["P"], y["F"], self.R_ref)
        lam = lambda_from(ld)
        dQ, dP, dS, dF = flow_rhs(ld.hd, y["P"], y["F"])
        ds0 = -lam * y["s0"]
        Rn = ld.Rn
        dR = np.einsum("mia,ma->mi", ld.dR_dQ, dQ) + np.einsum("mia,ma->mi", ld.dR_dP, dP)
        M0 = y["s0"][:, None, None] * np.einsum("mi,mj->mij", Rn, self.L_qp)
        dtM0 = np.einsum("mi,mj->mij", ds0[:, None] * Rn + y["s0"][:, None] * dR, self.L_qp)
        rates = {"Q": dQ, "P": dP, "S": dS, "F": dF, "s0": ds0}
        return ld, lam, rates, M0, dtM0

    def calculus(self, ld: LocalData) -> SymbolCalculus:
        eye = np.eye(self.d, dtype=complex)
        Zinv = self.scatter(ld.Zinv, 0.0)
        dzQ = self.scatter(ld.dzQ, 0.0)
        # inactive nodes get the identity-flow values so stencils stay finite
        inactive = ~self.active.reshape(self.shape)
        Zinv[inactive] = 0.5 * eye
        dzQ[inactive] = eye
        return SymbolCalculus(self.shape, self.grid.spacing, Zinv, dzQ)

    def apply_L1(self, calc, ld, rates, M, dtM):
        g = self.scatter
        return self.gather(
            op_L1(
                calc,
                g(M),
                g(dtM),
                g(rates["Q"]),
                g(rates["P"]),
                g(ld.A),
                g(ld.dA),
                g(ld.d2A),
                g(ld.P),
            )
        )

    def perp(self, y):
        """``Mperp1`` and the pieces reused by the caller."""
        ld, lam, rates, M0, dtM0 = self.leading(y)
        calc = self.calculus(ld)
        L1M0 = self.apply_L1(calc, ld, rates, M0, dtM0)
        L0d = l0_dagger_from(ld.H_all, ld.L_all, ld.R_all, self.n)
        return L0d @ L1M0, (ld, lam, rates, M0, calc, L1M0)

    def rhs(self, y, with_first: bool):
        if not with_first:
            ld, lam, rates, _, _ = self.leading(y)
            return dict(rates), lam
        Mp, (ld, lam, rates, M0, calc, _) = self.perp(y)
        h = DIRECTIONAL_STEP
        fwd = {k: y[k] + h * rates[k] for k in ("Q", "P", "F", "s0")}
        bwd = {k: y[k] - h * rates[k] for k in ("Q", "P", "F", "s0")}
        dtMp = (self.perp(fwd)[0] - self.perp(bwd)[0]) / (2 * h)
        forcing_field = self.apply_L1(calc, ld, rates, Mp, dtMp)
        if self.need_L2:
            forcing_field = forcing_field + self.apply_L2(calc, ld, y, M0)
        forcing = np.einsum("mi,mij,mj->m", ld.Ln, forcing_field, self.R_qp)
        out = dict(rates)
        out["s1"] = -lam * y["s1"] - forcing
        return out, lam

    def apply_L2(self, calc, ld, y, M0):
        A_derivs = {0: self.scatter(ld.A), 1: self.scatter(ld.dA), 2: self.scatter(ld.d2A)}
        Qfull = self.scatter(y["Q"])
        Qflat = Qfull.reshape(-1, self.d)
        for k in (3, 4):
            A_derivs[k] = self.sys.flux_derivatives(Qflat, k).reshape(self.shape + (self.d,) * (k + 1) + (self.N, self.N))
        return self.gather(op_L2(calc, self.scatter(M0), self.scatter(ld.P), A_derivs))


def solve_branch(
    sys: SystemSpec,
    n: int,
    grid,
    t_final: float,
    dt: float | None = None,
    *,
    K: int = 1,
    fd_warn_tol: float = 1e-2,
) -> BranchSolution:
    """Integrate flow and amplitudes of branch ``n`` for every node of ``grid``.

    With ``K = 2`` the first correction is integrated alongside; its
    finite-difference operators act across the whole tensor grid.
    """
    if K not in (1, 2):
        raise ValueError("K must be 1 or 2")
    delta = grid.delta
    dt = default_dt(delta) if dt is None else check_positive("dt", dt)
    qm, pm = grid.meshes()
    q = qm.reshape(-1, sys.d)
    p = pm.reshape(-1, sys.d)
    p_floor = delta / 4
    active = np.linalg.norm(p, axis=1) >= p_floor
    gb = _GridBranch(sys, n, grid, active, q, p)
    gb.R_qp = gb.R_ref.copy()
    ia = gb.idx
    Ma, d = len(ia), sys.d
    F0 = np.broadcast_to(np.eye(2 * d), (Ma, 2 * d, 2 * d)).copy()
    y = {"Q": q[ia].copy(), "P": p[ia].copy(), "S": np.zeros(Ma), "F": F0, "s0": np.full(Ma, 2.0 ** (d / 2), complex)}
    if K == 2:
        y["s1"] = np.zeros(Ma, complex)
    steps = n_steps(t_final, dt) if t_final != 0 else 0
    h = t_final / steps if steps else 0.0
    valid = np.ones(Ma, dtype=bool)
    for step in range(1, steps + 1):
        seen = {}

        def f(t, yy):
            der, lam = gb.rhs(yy, K == 2)
            for v in der.values():
                v[~valid] = 0.0
            seen.setdefault("lam", np.where(valid, lam, 0.0))
            return der

        y_new = rk4_step(f, y, (step - 1) * h, h)
        # trajectories nearing p = 0 are frozen; their neighbours still see finite values
        lost = valid & (np.linalg.norm(y_new["P"], axis=1) < p_floor)
        if np.any(lost):
            for k in y_new:
                y_new[k][lost] = y[k][lost]
            valid = valid & ~lost
        _advance_checks(y_new, valid, h, seen.get("lam"))
        y = y_new
        R_now = sys.eig(y["Q"], y["P"])[2][:, :, n]
        s = np.where(np.sum(R_now * gb.R_ref, axis=1) < 0, -1.0, 1.0)
        gb.R_ref = R_now * s[:, None]

    # final symbols
    Mp = sigma1 = M1 = None
    fd_err = None
    if K == 2:
        Mp, (ld, lam, rates, M0, calc, _) = gb.perp(y)
        sigma1 = y["s1"]
        M1 = sigma1[:, None, None] * np.einsum("mi,mj->mij", ld.Rn, gb.L_qp) + Mp
        fd_err = _fd_error_estimate(calc, gb.scatter(M0), active.reshape(grid.shape))
        if fd_err > fd_warn_tol:
            warnings.warn(
                f"phase grid too coarse for accurate d_z: estimated relative error {fd_err:.2g}",
                RuntimeWarning,
                stacklevel=2,
            )
    else:
        ld, lam, rates, M0, _ = gb.leading(y)
    state = TrajectoryState(t_final, y["Q"], y["P"], y["S"], y["F"], valid)
    return BranchSolution(
        n=n,
        t=float(t_final),
        grid=grid,
        active=active,
        state=state,
        sigma0=y["s0"],
        sigma1=sigma1,
        M0=M0,
        Mperp1=Mp,
        M1=M1,
        L_qp=gb.L_qp,
        fd_error_estimate=fd_err,
    )


def _fd_error_estimate(calc: SymbolCalculus, field: np.ndarray, active: np.ndarray | None = None) -> float:
    """Richardson estimate of the relative error of ``d_z`` on ``field``.

    Only nodes whose coarse stencil lies inside ``active`` are compared, so the
    jump at the inactive band near ``p = 0`` does not count.
    """
    fine = calc.dz(field)
    sub = tuple(slice(None, None, 2) for _ in calc.shape)
    if any(s < 6 for s in calc.shape):
        return 0.0
    if active is None:
        active = np.ones(calc.shape, dtype=bool)
    inner = ndimage.binary_erosion(active, iterations=4, border_value=1)[sub]
    if not inner.any():
        return 0.0
    coarse_calc = SymbolCalculus(
        field[sub].shape[: len(calc.shape)], 2 * calc.spacing, calc.Zinv[sub], calc.dzQ[sub]
    )
    coarse = coarse_calc.dz(field[sub])
    num = max(np.abs((f[sub] - c)[inner]).max() for f, c in zip(fine, coarse)) / 3
    # derivative scale: the largest computed derivative or field size over the grid extent
    den = max(np.abs(f[sub][inner]).max() for f in fine)
    den += np.abs(field).max() / (calc.spacing * max(calc.shape))
    return float(num / den) if den > 0 else 0.0


def first_correction(sys: SystemSpec, n: int, grid, t: float, dt: float | None = None) -> tuple:
    """``(Mperp1, sigma1, M1)`` of branch ``n`` at time ``t``, as grid-shaped fields."""
    sol = solve_branch(sys, n, grid, t, dt, K=2)
    N = sys.N

    def full(v, tail):
        out = np.zeros((sol.active.size,) + tail, dtype=complex)
        out[sol.active] = v
        return out.reshape(grid.shape + tail)

    return full(sol.Mperp1, (N, N)), full(sol.sigma1, ()), full(sol.M1, (N, N))


def leading_residual(sys: SystemSpec, n: int, grid, t: float, dt: float | None = None) -> np.ndarray:
    """``L_n(Q, P)^T (L1 M0)`` on the grid at time ``t`` (vanishes up to FD error)."""
    sol = solve_branch(sys, n, grid, t, dt, K=1)
    qm, pm = grid.meshes()
    gb = _GridBranch(sys, n, grid, sol.active, qm.reshape(-1, sys.d), pm.reshape(-1, sys.d))
    # orientation of R(Q, P) carried from the integration
    _, _, R = sys.eig(sol.state.Q, sol.state.P)
    gb.R_ref = R[:, :, n]
    y = {"Q": sol.state.Q, "P": sol.state.P, "F": sol.state.F, "s0": sol.sigma0}
    ld, lam, rates, M0, dtM0 = gb.leading(y)
    calc = gb.calculus(ld)
    L1M0 = gb.apply_L1(calc, ld, rates, M0, dtM0)
    res = np.einsum("mi,mij->mj", ld.Ln, L1M0)
    out = np.zeros((sol.active.size, sys.N), dtype=complex)
    out[sol.active] = res
    return out.reshape(grid.shape + (sys.N,))
