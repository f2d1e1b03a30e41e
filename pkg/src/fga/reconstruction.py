"""Frozen Gaussian propagator: packet weights, packet summation and norm probes.

The propagated field is

    u(t, x) = sum_n sum_nodes w 2^{-d} (pi eps)^{-3d/4} e^{i S/eps}
              e^{i P.(x-Q)/eps - |x-Q|^2/(2 eps)} [M_n0 + eps M_n1](q, p) chi(q, p) c(q, p)

where ``c`` are the FBI coefficients of the initial data and ``w`` the node
weight. At ``t = 0`` this is the adjoint transform of ``chi c``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, GridError, TrajectoryError, check_positive
from .amplitude import sigma0_evolve, solve_branch
from .flow import evolve
from .grids import SpatialGrid, WaveField
from .phase_space import (
    DEFAULT_CG,
    DEFAULT_PRUNE_TOL,
    DEFAULT_R_CUT,
    CutoffSpec,
    PhaseGrid,
    cutoff_eval,
    fbi_forward,
)
from .systems import SystemSpec

CHUNK = 256
INVALID_MASS_TOL = 1e-6


@dataclass(frozen=True)
class FGAConfig:
    """Parameters of the propagator.

    Attributes
    ----------
    eps : float
        Semiclassical parameter, ``0 < eps <= 1``.
    K : int
        Order of the approximation (1 or 2).
    delta : float
        Cutoff parameter in (0, 1).
    T : float
        Final time.
    dt : float or None
        RK4 step; defaults to ``1e-3 * min(1, delta)``.
    c_g : float
        Phase-grid spacing in units of sqrt(eps).
    prune_tol : float
        Relative threshold below which packets are skipped.
    r_cut : float
        Gaussian truncation radius in units of sqrt(eps).
    """

    eps: float
    K: int = 1
    delta: float = 0.5
    T: float = 1.0
    dt: float | None = None
    c_g: float = DEFAULT_CG
    prune_tol: float = DEFAULT_PRUNE_TOL
    r_cut: float = DEFAULT_R_CUT

    def __post_init__(self):
        check_positive("eps", self.eps)
        if self.eps > 1:
            raise ConfigError("eps must be <= 1")
        if self.K not in (1, 2):
            raise ConfigError("K must be 1 or 2")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.dt is not None:
            check_positive("dt", self.dt)
        check_positive("c_g", self.c_g)
        check_positive("prune_tol", self.prune_tol)
        check_positive("r_cut", self.r_cut)


def phase_phi(state, x, y, q, p) -> np.ndarray:
    """Complex phase ``S + i|x-Q|^2/2 + P.(x-Q) + i|y-q|^2/2 - p.(y-q)`` per trajectory."""
    Q, P, S = np.atleast_2d(state.Q), np.atleast_2d(state.P), np.atleast_1d(state.S)
    x, y = np.asarray(x, float), np.asarray(y, float)
    q, p = np.atleast_2d(q), np.atleast_2d(p)
    dx, dy = x - Q, y - q
    return S + 0.5j * np.sum(dx * dx, axis=-1) + np.sum(P * dx, axis=-1) + 0.5j * np.sum(dy * dy, axis=-1) - np.sum(p * dy, axis=-1)


def sum_packets(Q: np.ndarray, P: np.ndarray, amp: np.ndarray, eps: float, out_grid: SpatialGrid, r_cut: float = DEFAULT_R_CUT) -> np.ndarray:
    """``sum_j amp_j exp(i P_j.(x-Q_j)/eps - |x-Q_j|^2/(2 eps))`` on ``out_grid``.

    Packets are processed in a fixed order (sorted by center) and in fixed-size
    chunks, so results are reproducible. Each Gaussian is truncated at
    ``r_cut * sqrt(eps)`` per coordinate.
    """
    d = out_grid.d
    N = amp.shape[1]
    out = np.zeros(out_grid.shape + (N,), dtype=complex)
    if len(Q) == 0:
        return out
    order = np.lexsort(tuple(Q[:, k] for k in reversed(range(d))))
    Q, P, amp = Q[order], P[order], amp[order]
    half = r_cut * np.sqrt(eps)
    axes = out_grid.axes
    for start in range(0, len(Q), CHUNK):
        sl = slice(start, start + CHUNK)
        Qc, Pc, ac = Q[sl], P[sl], amp[sl]
        kers, wins = [], []
        for l in range(d):
            x = axes[l]
            lo = int(np.searchsorted(x, Qc[:, l].min() - half, "left"))
            hi = int(np.searchsorted(x, Qc[:, l].max() + half, "right"))
            if hi <= lo:
                break
            dx = x[None, lo:hi] - Qc[:, l, None]
            ker = np.exp(1j * Pc[:, l, None] * dx / eps - dx * dx / (2 * eps))
            ker[np.abs(dx) > half] = 0.0
            kers.append(ker)
            wins.append(slice(lo, hi))
        else:
            if d == 1:
                out[wins[0]] += kers[0].T @ ac
            elif d == 2:
                for c in range(N):
                    out[wins[0], wins[1], c] += kers[0].T @ (ac[:, c, None] * kers[1])
            else:
                spec = ",".join(f"j{chr(97 + l)}" for l in range(d))
                out[tuple(wins)] += np.einsum(f"jz,{spec}->{''.join(chr(97 + l) for l in range(d))}z", ac, *kers)
    return out


def _output_grid(u0: WaveField, Q: np.ndarray, half: float) -> SpatialGrid:
    g = u0.grid
    lo = np.array(g.origin)
    hi = lo + np.array(g.extent) - np.array(g.spacing)
    if len(Q):
        lo = np.minimum(lo, Q.min(axis=0) - half)
        hi = np.maximum(hi, Q.max(axis=0) + half)
    h = np.array(g.spacing)
    # keep the input lattice so that the input grid is a sub-grid of the output
    k_lo = np.floor((lo - np.array(g.origin)) / h + 1e-9)
    k_hi = np.ceil((hi - np.array(g.origin)) / h - 1e-9)
    origin = np.array(g.origin) + k_lo * h
    n = (k_hi - k_lo + 1).astype(int)
    return SpatialGrid(tuple(origin), tuple(n * h), tuple(n))


class FGAPropagator(TransformerMixin, BaseEstimator):
    """Frozen Gaussian approximation of the solution operator at time ``t``.

    ``fit`` sizes the phase grid to the training field, selects the packets that
    carry its coefficients and integrates their flows and amplitudes; ``transform``
    applies the fitted operator to any field on the same spatial grid. The
    operator is linear in its input.

    Parameters
    ----------
    system : SystemSpec
        Hyperbolic system to propagate.
    eps : float or None
        Semiclassical parameter; read from the fitted field when None.
    K : int
        1 for the leading-order propagator, 2 to add the first correction.
    delta, t, dt, c_g, prune_tol, r_cut
        As in :class:`FGAConfig`, with ``t`` the final time.
    out_grid : SpatialGrid or None
        Output grid; by default the input grid enlarged to cover the packets.
    """

    def __init__(
        self,
        system=None,
        eps=None,
        K=1,
        delta=0.5,
        t=1.0,
        dt=None,
        c_g=DEFAULT_CG,
        prune_tol=DEFAULT_PRUNE_TOL,
        r_cut=DEFAULT_R_CUT,
        out_grid=None,
    ):
        self.system = system
        self.eps = eps
        self.K = K
        self.delta = delta
        self.t = t
        self.dt = dt
        self.c_g = c_g
        self.prune_tol = prune_tol
        self.r_cut = r_cut
        self.out_grid = out_grid

    @classmethod
    def from_config(cls, system: SystemSpec, cfg: FGAConfig, t: float | None = None, out_grid=None) -> "FGAPropagator":
        return cls(system, cfg.eps, cfg.K, cfg.delta, cfg.T if t is None else t, cfg.dt, cfg.c_g, cfg.prune_tol, cfg.r_cut, out_grid)

    def fit(self, X: WaveField, y=None):
        if not isinstance(self.system, SystemSpec):
            raise ConfigError("system must be a SystemSpec instance")
        eps = X.eps if self.eps is None else self.eps
        cfg = FGAConfig(eps, self.K, self.delta, float(self.t), self.dt, self.c_g, self.prune_tol, self.r_cut)
        sys = self.system
        if X.N != sys.N or X.grid.d != sys.d:
            raise GridError(f"field has d={X.grid.d}, N={X.N}; system has d={sys.d}, N={sys.N}")
        grid = PhaseGrid.covering(X, eps, cfg.delta, cfg.c_g, cfg.prune_tol, cfg.r_cut)
        coef = fbi_forward(X, eps, grid, cfg.r_cut)
        qm, pm = grid.meshes()
        q, p = qm.reshape(-1, sys.d), pm.reshape(-1, sys.d)
        chi = cutoff_eval(CutoffSpec(cfg.delta), q, p).reshape(-1)
        c = coef.values.reshape(-1, sys.N)
        total = float(np.sum(np.abs(c) ** 2))
        support = chi > 0
        # per-branch projected weights decide which packets are kept
        Hs = np.zeros((len(q), sys.N))
        proj = np.zeros((len(q), sys.N), dtype=complex)
        if np.any(support):
            _, L, _ = sys.eig(q[support], p[support])
            proj[support] = np.einsum("mcn,mc->mn", L, c[support]) * chi[support, None]
        scale = np.abs(proj).max() if proj.size else 0.0
        self.branches_ = []
        dropped_mass = 0.0
        for n in range(sys.N):
            keep = support & (np.abs(proj[:, n]) > cfg.prune_tol * scale) if scale > 0 else np.zeros(len(q), bool)
            entry = {"n": n, "keep": keep}
            if cfg.K == 1:
                idx = np.nonzero(keep)[0]
                if idx.size:
                    res = sigma0_evolve(sys, n, q[idx], p[idx], cfg.T, cfg.dt, delta=cfg.delta)[-1]
                    st = res.state
                    valid = st.valid
                    dropped_mass += float(np.sum(np.abs(proj[idx[~valid], n]) ** 2))
                    _, _, RQ = sys.eig(st.Q[valid], st.P[valid])
                    _, L0, R0 = sys.eig(q[idx[valid]], p[idx[valid]])
                    Rn = RQ[:, :, n] * np.where(np.sum(RQ[:, :, n] * R0[:, :, n], axis=1) < 0, -1.0, 1.0)[:, None]
                    entry.update(
                        idx=idx[valid],
                        Q=st.Q[valid],
                        P=st.P[valid],
                        phase=np.exp(1j * st.S[valid] / eps),
                        symbol=res.sigma0[valid, None, None] * np.einsum("mi,mj->mij", Rn, L0[:, :, n]),
                    )
                else:
                    entry.update(idx=idx, Q=np.zeros((0, sys.d)), P=np.zeros((0, sys.d)), phase=np.zeros(0), symbol=np.zeros((0, sys.N, sys.N)))
            else:
                sol = solve_branch(sys, n, grid, cfg.T, cfg.dt, K=2)
                act = np.nonzero(sol.active)[0]
                lost = keep[act] & ~sol.state.valid
                dropped_mass += float(np.sum(np.abs(proj[act[lost], n]) ** 2))
                sel = keep[act] & sol.state.valid
                entry.update(
                    idx=act[sel],
                    Q=sol.state.Q[sel],
                    P=sol.state.P[sel],
                    phase=np.exp(1j * sol.state.S[sel] / eps),
                    symbol=sol.symbol(eps, 2)[sel],
                    fd_error_estimate=sol.fd_error_estimate,
                )
            self.branches_.append(entry)
        if total > 0 and dropped_mass > INVALID_MASS_TOL * total:
            raise TrajectoryError(
                f"trajectories reaching p = 0 carry {dropped_mass / total:.2g} of the coefficient mass"
            )
        self.config_ = cfg
        self.grid_ = grid
        self.chi_ = chi
        self.input_grid_ = X.grid
        self.dropped_mass_ = dropped_mass / total if total > 0 else 0.0
        self.n_packets_ = int(sum(len(b["idx"]) for b in self.branches_))
        all_Q = np.concatenate([b["Q"] for b in self.branches_]) if self.n_packets_ else np.zeros((0, sys.d))
        self.output_grid_ = self.out_grid if self.out_grid is not None else _output_grid(X, all_Q, cfg.r_cut * np.sqrt(eps))
        return self

    def transform(self, X: WaveField) -> WaveField:
        check_is_fitted(self, "branches_")
        cfg = self.config_
        if X.grid != self.input_grid_:
            raise GridError("field is not sampled on the fitted spatial grid")
        eps = cfg.eps
        coef = fbi_forward(X, eps, self.grid_, cfg.r_cut)
        c = coef.values.reshape(-1, X.N) * self.chi_[:, None]
        Qs, Ps, amps = [], [], []
        for b in self.branches_:
            if len(b["idx"]) == 0:
                continue
            a = b["phase"][:, None] * np.einsum("mij,mj->mi", b["symbol"], c[b["idx"]])
            Qs.append(b["Q"])
            Ps.append(b["P"])
            amps.append(a)
        d = X.grid.d
        norm = self.grid_.weight * 2.0 ** (-d) * (np.pi * eps) ** (-3 * d / 4)
        if not Qs:
            return WaveField(self.output_grid_, np.zeros(self.output_grid_.shape + (X.N,), complex), eps, cfg.T)
        vals = sum_packets(np.concatenate(Qs), np.concatenate(Ps), norm * np.concatenate(amps), eps, self.output_grid_, cfg.r_cut)
        out = WaveField(self.output_grid_, vals, eps, cfg.T)
        out.meta.update(packets=self.n_packets_, dropped_mass=self.dropped_mass_)
        return out


def fga_propagate(sys: SystemSpec, cfg: FGAConfig, u0: WaveField, t: float | None = None, out_grid: SpatialGrid | None = None) -> WaveField:
    """Propagate ``u0`` to time ``t`` (default ``cfg.T``) with the frozen Gaussian approximation."""
    if abs(u0.eps - cfg.eps) > 1e-15 * cfg.eps:
        warnings.warn("field eps differs from config eps; using the config value", stacklevel=2)
    prop = FGAPropagator.from_config(sys, cfg, t, out_grid)
    return prop.fit(u0).transform(u0)


def band_limited_inputs(grid: PhaseGrid, spatial: SpatialGrid, eps: float, trials: int, seed: int = 0, margin: float = 4.0) -> list:
    """Random unit-norm fields whose FBI coefficients live inside ``grid``.

    Fourier content is restricted to ``eps * xi`` inside the p-box shrunk by
    ``margin * sqrt(eps)`` and the envelope to the q-box shrunk likewise. FBI mass
    that still leaks past the grid edge only lowers measured norm ratios.
    """
    rng = np.random.default_rng(seed)
    d = spatial.d
    pad = margin * np.sqrt(eps)
    x = spatial.mesh()
    env = np.ones(spatial.shape)
    for l in range(d):
        lo, hi = grid.q_axes[l][0] + pad, grid.q_axes[l][-1] - pad
        if hi <= lo:
            raise GridError("phase grid too small for band-limited probes")
        mid, w = 0.5 * (lo + hi), 0.5 * (hi - lo)
        s = np.clip(np.abs(x[..., l] - mid) / w, 0, 1)
        env *= np.where(s < 1, np.exp(-1.0 / np.maximum(1 - s * s, 1e-300) + 1.0), 0.0)
    freqs = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(n, h) for n, h in zip(spatial.shape, spatial.spacing)], indexing="ij")
    band = np.ones(spatial.shape, bool)
    for l in range(d):
        plo, phi = grid.p_axes[l][0] + pad, grid.p_axes[l][-1] - pad
        band &= (eps * freqs[l] >= plo) & (eps * freqs[l] <= phi)
    if not np.any(band):
        raise GridError("phase grid too small in p for band-limited probes")
    out = []
    for _ in range(trials):
        spec = (rng.standard_normal(spatial.shape) + 1j * rng.standard_normal(spatial.shape)) * band
        out.append(np.fft.ifftn(spec) * env)
    return out


def operator_norm_probe(
    sys: SystemSpec,
    n: int,
    grid: PhaseGrid,
    spatial: SpatialGrid,
    eps: float,
    t: float,
    M,
    trials: int = 8,
    seed: int = 0,
    dt: float | None = None,
    r_cut: float = DEFAULT_R_CUT,
) -> float:
    """Largest observed ``||I(t, M) u|| / ||u||`` over random band-limited inputs.

    ``I(t, M) u = 2^{-d/2} sum_nodes e^{iS/eps} psi_{Q,P} M(q, p) (F u)(q, p)`` with the
    packets moved along branch ``n``. ``M`` is an array of shape
    ``grid.shape + (N, N)``.
    """
    d, N = sys.d, sys.N
    M = np.asarray(M, dtype=complex).reshape(-1, N, N)
    qm, pm = grid.meshes()
    q, p = qm.reshape(-1, d), pm.reshape(-1, d)
    live = (np.linalg.norm(p, axis=1) >= grid.delta / 4) & (np.abs(M).reshape(len(M), -1).max(axis=1) > 0)
    idx = np.nonzero(live)[0]
    if idx.size == 0:
        return 0.0
    st = evolve(sys, n, q[idx], p[idx], t, dt, delta=grid.delta)[-1]
    norm = grid.weight * 2.0 ** (-d) * (np.pi * eps) ** (-3 * d / 4)
    half = r_cut * np.sqrt(eps)
    lo = np.minimum(np.array(spatial.origin), st.Q.min(axis=0) - half)
    hi = np.maximum(np.array(spatial.origin) + np.array(spatial.extent), st.Q.max(axis=0) + half)
    out_grid = SpatialGrid.from_bounds(lo, hi, max(spatial.spacing))
    worst = 0.0
    for k, vals in enumerate(band_limited_inputs(grid, spatial, eps, trials, seed)):
        comp = np.zeros(spatial.shape + (N,), complex)
        rng = np.random.default_rng(seed + 1000 + k)
        vec = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        comp[:] = vals[..., None] * (vec / np.linalg.norm(vec))
        u = WaveField(spatial, comp, eps)
        u = u.with_values(u.values / u.norm())
        c = fbi_forward(u, eps, grid, r_cut).values.reshape(-1, N)[idx]
        amp = np.exp(1j * st.S / eps)[:, None] * np.einsum("mij,mj->mi", M[idx], c)
        v = WaveField(out_grid, sum_packets(st.Q, st.P, norm * amp, eps, out_grid, r_cut), eps)
        worst = max(worst, v.norm())
    return worst
