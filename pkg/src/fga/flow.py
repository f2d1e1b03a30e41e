"""Hamiltonian flow of packet centers with action and Jacobian transport.

For a branch ``H = H_n`` every node ``(q, p)`` is carried by

    dQ/dt = dH/dP,  dP/dt = -dH/dQ,  dS/dt = P . dH/dP - H,
    dF/dt = [[H_PQ, H_PP], [-H_QQ, -H_QP]] F,

with ``Q = q, P = p, S = 0, F = Id`` at ``t = 0``. ``F`` is the Jacobian
``d(Q, P) / d(q, p)`` in the usual row = output convention. The Z matrix is
``Z[j, k] = d_{z_j}(Q_k + i P_k)`` with ``d_z = d_q - i d_p``.

All nodes are integrated together with classic RK4; each trajectory is
independent of the others.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import StepSizeError, TrajectoryError, check_points, check_positive
from .systems import SystemSpec

SYMPLECTIC_TOL = 1e-6


def default_dt(delta: float) -> float:
    return 1e-3 * min(1.0, delta)


def n_steps(t_final: float, dt: float) -> int:
    return max(1, int(np.ceil(abs(t_final) / dt - 1e-9)))


def symplectic_form(d: int) -> np.ndarray:
    J = np.zeros((2 * d, 2 * d))
    J[:d, d:] = np.eye(d)
    J[d:, :d] = -np.eye(d)
    return J


def symplectic_residual(F: np.ndarray) -> np.ndarray:
    """Frobenius norm of ``F^T J F - J`` per trajectory."""
    d = F.shape[-1] // 2
    J = symplectic_form(d)
    res = np.transpose(F, (0, 2, 1)) @ (J @ F) - J
    return np.sqrt(np.sum(res**2, axis=(-2, -1)))


def jacobian_blocks(F: np.ndarray) -> tuple:
    """``(dQ/dq, dQ/dp, dP/dq, dP/dp)``, each ``(M, d, d)`` with rows = output index."""
    d = F.shape[-1] // 2
    return F[:, :d, :d], F[:, :d, d:], F[:, d:, :d], F[:, d:, d:]


def z_from_jacobian(F: np.ndarray) -> np.ndarray:
    Qq, Qp, Pq, Pp = jacobian_blocks(F)
    return np.transpose(Qq - 1j * Qp + 1j * Pq + Pp, (0, 2, 1))


def dzQ_from_jacobian(F: np.ndarray) -> np.ndarray:
    """``[j, s] = d_{z_s} Q_j``."""
    Qq, Qp, _, _ = jacobian_blocks(F)
    return Qq - 1j * Qp


@dataclass
class TrajectoryState:
    """Packet centers, actions and Jacobians of ``M`` trajectories at time ``t``."""

    t: float
    Q: np.ndarray
    P: np.ndarray
    S: np.ndarray
    F: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(len(self.Q), dtype=bool)

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def Z(self) -> np.ndarray:
        return z_from_jacobian(self.F)

    def symplectic_residual(self) -> np.ndarray:
        return symplectic_residual(self.F)

    def take(self, idx) -> "TrajectoryState":
        return TrajectoryState(self.t, self.Q[idx], self.P[idx], self.S[idx], self.F[idx], self.valid[idx])


def initial_state(q, p) -> TrajectoryState:
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    M, d = q.shape
    F = np.broadcast_to(np.eye(2 * d), (M, 2 * d, 2 * d)).copy()
    return TrajectoryState(0.0, q.copy(), p.copy(), np.zeros(M), F)


def flow_rhs(hd, P: np.ndarray, F: np.ndarray) -> tuple:
    """Time derivatives of ``(Q, P, S, F)`` from Hamiltonian derivatives ``hd`` at ``(Q, P)``."""
    dQ = hd.Hp
    dP = -hd.Hq
    dS = np.sum(P * hd.Hp, axis=1) - hd.H
    d = P.shape[1]
    G = np.empty((len(P), 2 * d, 2 * d))
    G[:, :d, :d] = np.transpose(hd.Hqp, (0, 2, 1))
    G[:, :d, d:] = hd.Hpp
    G[:, d:, :d] = -hd.Hqq
    G[:, d:, d:] = -hd.Hqp
    return dQ, dP, dS, G @ F


def rk4_step(f, y: dict, t: float, h: float) -> dict:
    """One classic Runge-Kutta step on a dict of arrays."""
    k1 = f(t, y)
    k2 = f(t + h / 2, {k: y[k] + (h / 2) * k1[k] for k in y})
    k3 = f(t + h / 2, {k: y[k] + (h / 2) * k2[k] for k in y})
    k4 = f(t + h, {k: y[k] + h * k3[k] for k in y})
    return {k: y[k] + (h / 6) * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k]) for k in y}


def evolve(
    sys: SystemSpec,
    n: int,
    q,
    p,
    t_final: float,
    dt: float | None = None,
    *,
    delta: float = 0.5,
    p_floor: float | None = None,
    save_every: int | None = None,
) -> list:
    """Integrate trajectories from nodes ``q, p`` (shape ``(M, d)`` or ``(d,)``).

    Returns the list of :class:`TrajectoryState` at ``t = 0``, every ``save_every``
    steps, and ``t_final``. Trajectories whose ``|P|`` drops below ``p_floor``
    (default ``delta/4``) are frozen and flagged invalid.
    """
    q = check_points("q", q, sys.d)
    p = check_points("p", p, sys.d)
    t_final = float(t_final)
    dt = default_dt(delta) if dt is None else check_positive("dt", dt)
    p_floor = delta / 4 if p_floor is None else float(p_floor)
    if np.any(np.linalg.norm(p, axis=1) < p_floor):
        raise TrajectoryError("initial momenta below p_floor")
    state = initial_state(q, p)
    states = [state]
    if t_final == 0.0:
        return states
    steps = n_steps(t_final, dt)
    h = t_final / steps
    valid = np.ones(len(q), dtype=bool)
    y = {"Q": state.Q, "P": state.P, "S": state.S, "F": state.F}

    def rhs(t, yy):
        out = {k: np.zeros_like(v) for k, v in yy.items()}
        idx = np.nonzero(valid)[0]
        if idx.size:
            hd = sys.hamiltonian(n, yy["Q"][idx], yy["P"][idx], order=2)
            dQ, dP, dS, dF = flow_rhs(hd, yy["P"][idx], yy["F"][idx])
            out["Q"][idx], out["P"][idx], out["S"][idx], out["F"][idx] = dQ, dP, dS, dF
        return out

    for step in range(1, steps + 1):
        y_new = rk4_step(rhs, y, (step - 1) * h, h)
        lost = valid & (np.linalg.norm(y_new["P"], axis=1) < p_floor)
        if np.any(lost):
            for k in y_new:
                y_new[k][lost] = y[k][lost]
            valid = valid & ~lost
        res = symplectic_residual(y_new["F"][valid]) if np.any(valid) else np.zeros(1)
        if res.max() > SYMPLECTIC_TOL:
            raise StepSizeError(f"symplectic residual {res.max():.3g} at t={step * h:.4g}; reduce dt")
        y = y_new
        if step == steps or (save_every and step % save_every == 0):
            states.append(TrajectoryState(step * h, y["Q"], y["P"], y["S"], y["F"], valid.copy()))
    return states


def z_matrix(state: TrajectoryState) -> np.ndarray:
    """Z matrices ``(M, d, d)`` of a state."""
    return state.Z


def z_invertibility_check(state: TrajectoryState) -> float:
    """Smallest eigenvalue of ``Z Z^*`` over valid trajectories (exact flows give >= 2).

    Warns when the value drops below 1, which signals a numerically degenerate flow.
    """
    Z = state.Z[state.valid]
    if Z.size == 0:
        return float("nan")
    val = float(np.linalg.eigvalsh(Z @ np.conj(np.transpose(Z, (0, 2, 1)))).min())
    if val < 1.0:
        warnings.warn(f"min eig(Z Z*) = {val:.3g} < 1: degenerate trajectory", RuntimeWarning, stacklevel=2)
    return val


def flow_diagnostics(states, delta: float, T: float | None = None) -> dict:
    """Bounds on ``|P|`` and ``|Q|`` with symplectic and Z checks over a state sequence."""
    pmin, pmax, qmax, symp, zmin = np.inf, 0.0, 0.0, 0.0, np.inf
    n_invalid = 0
    for st in states:
        v = st.valid
        if not np.any(v):
            continue
        rp = np.linalg.norm(st.P[v], axis=1)
        pmin, pmax = min(pmin, rp.min()), max(pmax, rp.max())
        qmax = max(qmax, np.linalg.norm(st.Q[v], axis=1).max())
        symp = max(symp, st.symplectic_residual()[v].max())
        Z = st.Z[v]
        zmin = min(zmin, np.linalg.eigvalsh(Z @ np.conj(np.transpose(Z, (0, 2, 1)))).min())
        n_invalid = max(n_invalid, int(np.sum(~v)))
    return {
        "min_abs_P": float(pmin),
        "max_abs_P": float(pmax),
        "max_abs_Q": float(qmax),
        "max_symplectic_residual": float(symp),
        "min_eig_ZZstar": float(zmin),
        "invalid_trajectories": n_invalid,
        "delta": float(delta),
        "T": None if T is None else float(T),
        "p_floor": float(delta) / 4,
    }


@dataclass
class TrajectoryBundle:
    """States of all phase-grid nodes inside the cutoff support, for one branch."""

    n: int
    q: np.ndarray
    p: np.ndarray
    states: list

    @classmethod
    def compute(cls, sys: SystemSpec, n: int, grid, t_final: float, dt=None, save_every=None) -> "TrajectoryBundle":
        from .phase_space import CutoffSpec, cutoff_eval

        q, p = grid.nodes()
        keep = cutoff_eval(CutoffSpec(grid.delta), q, p) > 0
        q, p = q[keep], p[keep]
        states = evolve(sys, n, q, p, t_final, dt, delta=grid.delta, save_every=save_every)
        return cls(n, q, p, states)

    def to_csv(self, path) -> None:
        from .io import write_trajectory_csv

        write_trajectory_csv(
            path,
            [s.t for s in self.states],
            np.stack([s.Q for s in self.states]),
            np.stack([s.P for s in self.states]),
            np.stack([s.S for s in self.states]),
            np.stack([s.Z for s in self.states]),
            np.stack([s.symplectic_residual() for s in self.states]),
        )
