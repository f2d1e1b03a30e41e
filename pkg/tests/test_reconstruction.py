import numpy as np
import pytest
from sklearn.base import clone

from conftest import gaussian_wkb
from fga._validation import ConfigError, GridError
from fga.amplitude import leading_symbol, sigma0_evolve
from fga.flow import evolve
from fga.grids import SpatialGrid, WaveField
from fga.phase_space import PhaseGrid, high_frequency_mass
from fga.reconstruction import (
    FGAConfig,
    FGAPropagator,
    fga_propagate,
    operator_norm_probe,
    phase_phi,
    sum_packets,
)
from fga.reference import l2_error
from fga.systems import Acoustic2D, TwoBranch1D

VARIABLE = TwoBranch1D(c0=1.0, amplitude=0.3, wavenumber=1.0)


def _rel(a, b):
    return l2_error(a, b) / b.norm()


# -- phase -------------------------------------------------------------------


def test_phase_at_start_vanishes_on_centre():
    st = evolve(Acoustic2D(), 2, [[0.3, -0.2]], [[1.0, 0.5]], 0.0)[0]
    assert phase_phi(st, [0.3, -0.2], [0.3, -0.2], [[0.3, -0.2]], [[1.0, 0.5]])[0] == 0


def test_phase_imaginary_part():
    rng = np.random.default_rng(0)
    st = evolve(VARIABLE, 1, [[0.1]], [[1.2]], 0.7, dt=1e-2)[-1]
    for _ in range(10):
        x, y = rng.uniform(-2, 2, 1), rng.uniform(-2, 2, 1)
        phi = phase_phi(st, x, y, [[0.1]], [[1.2]])[0]
        assert phi.imag == pytest.approx(0.5 * ((x - st.Q[0]) ** 2 + (y - 0.1) ** 2).item(), abs=1e-14)
        assert phi.imag >= 0


def test_phase_on_acoustic_trajectory():
    st = evolve(Acoustic2D(), 2, [[0.0, 0.0]], [[1.0, 0.0]], 1.0, dt=1e-2)[-1]
    assert abs(phase_phi(st, [1.0, 0.0], [0.0, 0.0], [[0.0, 0.0]], [[1.0, 0.0]])[0]) <= 1e-13


# -- packet sums ------------------------------------------------------------------


def test_sum_packets_matches_direct_evaluation():
    eps = 1 / 64
    g = SpatialGrid.from_bounds([-2.0], [2.0], 0.01)
    rng = np.random.default_rng(1)
    Q = rng.uniform(-1, 1, (600, 1))
    P = rng.uniform(0.5, 2, (600, 1))
    amp = rng.standard_normal((600, 2)) + 1j * rng.standard_normal((600, 2))
    got = sum_packets(Q, P, amp, eps, g, r_cut=50.0)
    x = g.axes[0][:, None]
    ker = np.exp(1j * P[:, 0] * (x - Q[:, 0]) / eps - (x - Q[:, 0]) ** 2 / (2 * eps))
    assert np.allclose(got, ker @ amp, atol=1e-10)


def test_sum_packets_is_reproducible():
    eps = 1 / 16
    g = SpatialGrid.from_bounds([-1.0, -1.0], [1.0, 1.0], 0.05)
    rng = np.random.default_rng(2)
    Q, P = rng.uniform(-0.5, 0.5, (700, 2)), rng.uniform(0.5, 1.5, (700, 2))
    amp = rng.standard_normal((700, 3)).astype(complex)
    a = sum_packets(Q, P, amp, eps, g)
    perm = rng.permutation(700)
    b = sum_packets(Q[perm], P[perm], amp[perm], eps, g)
    assert np.array_equal(a, b)


# -- propagation -----------------------------------------------------------------


def test_zero_input_gives_zero():
    u = gaussian_wkb(1 / 64)
    zero = u.with_values(np.zeros_like(u.values))
    out = fga_propagate(VARIABLE, FGAConfig(1 / 64, T=0.5, dt=0.05), zero)
    assert not np.any(out.values)


@pytest.mark.parametrize("K", [1, 2])
def test_identity_at_start(K):
    eps = 1 / 64
    u = gaussian_wkb(eps)
    out = fga_propagate(VARIABLE, FGAConfig(eps, K=K, T=0.0), u, out_grid=u.grid)
    err = _rel(out, u)
    assert err <= 1e-4
    assert err <= max(1e-4, 3 * np.sqrt(high_frequency_mass(u, eps, 0.5)) / u.norm())


def test_identity_at_start_with_low_frequency_content():
    # the bound scales with the mass outside the cutoff region
    eps = 1 / 16
    u = gaussian_wkb(eps, p0=0.6)
    out = fga_propagate(VARIABLE, FGAConfig(eps, T=0.0), u, out_grid=u.grid)
    hfm = high_frequency_mass(u, eps, 0.5)
    assert hfm > 1e-6 * u.norm() ** 2
    assert l2_error(out, u) <= max(1e-4 * u.norm(), 3 * np.sqrt(hfm))


def test_pruning_invariance():
    eps = 1 / 64
    u = gaussian_wkb(eps)
    cfg = FGAConfig(eps, T=0.5, dt=0.05)
    a = FGAPropagator.from_config(VARIABLE, cfg).fit(u)
    b = FGAPropagator.from_config(VARIABLE, FGAConfig(eps, T=0.5, dt=0.05, prune_tol=cfg.prune_tol / 2)).fit(u)
    ua = a.transform(u)
    ub = b.transform(u)
    assert ua.grid == ub.grid
    assert b.n_packets_ >= a.n_packets_
    assert l2_error(ua, ub) <= 1e-8 * ub.norm()


def test_linearity():
    eps = 1 / 64
    u = gaussian_wkb(eps)
    v = gaussian_wkb(eps, width=0.2, profile=(0.3, -1.0))
    alpha, beta = 0.7 - 0.2j, -1.3
    w = u.with_values(alpha * u.values + beta * v.values)
    prop = FGAPropagator(VARIABLE, eps=eps, t=0.5, dt=0.05).fit(w)
    lhs = prop.transform(w)
    rhs = lhs.with_values(alpha * prop.transform(u).values + beta * prop.transform(v).values)
    assert l2_error(lhs, rhs) <= 1e-12 * lhs.norm()


def test_second_order_changes_little_at_small_eps():
    eps = 1 / 64
    u = gaussian_wkb(eps)
    k1 = fga_propagate(VARIABLE, FGAConfig(eps, K=1, T=0.5, dt=0.05), u)
    k2 = fga_propagate(VARIABLE, FGAConfig(eps, K=2, T=0.5, dt=0.05), u)
    diff = _rel(k1, k2)
    assert 0 < diff < 10 * eps


def test_propagator_estimator_api():
    eps = 1 / 64
    u = gaussian_wkb(eps)
    prop = FGAPropagator(VARIABLE, t=0.25, dt=0.05)
    assert clone(prop).get_params()["t"] == 0.25
    out = prop.fit_transform(u)
    assert out.t == pytest.approx(0.25) and out.meta["packets"] == prop.n_packets_
    assert prop.dropped_mass_ == 0.0
    other = gaussian_wkb(eps, box=5.0)
    with pytest.raises(GridError):
        prop.transform(other)
    with pytest.raises(ConfigError):
        FGAPropagator(system="twobranch1d").fit(u)


def test_output_grid_covers_moving_packets():
    eps = 1 / 64
    u = gaussian_wkb(eps, box=2.0)
    out = fga_propagate(VARIABLE, FGAConfig(eps, T=1.5, dt=0.05), u)
    hi = out.grid.origin[0] + out.grid.extent[0]
    # the right-moving half travels at speed >= 0.7
    assert hi >= 1.5 * 0.7
    assert np.abs(out.values[-1]).max() <= 1e-12 * np.abs(out.values).max()


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(eps=0.0), dict(eps=2.0), dict(eps=0.1, K=3), dict(eps=0.1, delta=1.0), dict(eps=0.1, dt=-1.0), dict(eps=0.1, c_g=0)],
)
def test_config_validation(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        FGAConfig(**kwargs)


# -- operator norm probe -------------------------------------------------------------------


def _probe_setup(d, eps, margin=4.0):
    half = (margin + 1) * np.sqrt(eps)
    p0 = np.r_[1.0, np.zeros(d - 1)]
    grid = PhaseGrid.from_box(-half * np.ones(d), half * np.ones(d), p0 - half, p0 + half, 0.5 * np.sqrt(eps), 0.5)
    r = half + 8 * np.sqrt(eps)
    spatial = SpatialGrid.from_bounds(-r * np.ones(d), r * np.ones(d), np.sqrt(eps) / 4, power_of_two=True)
    return grid, spatial


def test_probe_zero_symbol():
    grid, spatial = _probe_setup(1, 1 / 16)
    M = np.zeros(grid.shape + (2, 2))
    assert operator_norm_probe(VARIABLE, 1, grid, spatial, 1 / 16, 0.5, M, trials=2) == 0.0


def test_probe_identity_symbol_at_start():
    eps = 1 / 16
    grid, spatial = _probe_setup(1, eps)
    M = np.broadcast_to(np.sqrt(2) * np.eye(2), grid.shape + (2, 2))
    ratio = operator_norm_probe(VARIABLE, 1, grid, spatial, eps, 0.0, M, trials=4)
    assert 0.9 <= ratio <= 1 + 1e-3


def test_probe_identity_symbol_after_flow():
    eps = 1 / 16
    grid, spatial = _probe_setup(1, eps)
    M = np.broadcast_to(np.sqrt(2) * np.eye(2), grid.shape + (2, 2))
    assert operator_norm_probe(VARIABLE, 0, grid, spatial, eps, 1.0, M, trials=4, dt=0.05) <= 1 + 1e-3


def test_probe_leading_symbol_acoustic():
    eps = 1 / 16
    sys = Acoustic2D()
    grid, spatial = _probe_setup(2, eps)
    # constant coefficients: the symbol depends on p only, so one q-slice suffices
    p1, p2 = np.meshgrid(*grid.p_axes, indexing="ij")
    p = np.stack([p1.ravel(), p2.ravel()], axis=1)
    q = np.zeros_like(p)
    # the symbol is supported where the cutoff is, |p| >= delta
    live = np.linalg.norm(p, axis=1) >= 0.5
    amp = sigma0_evolve(sys, 2, q[live], p[live], 1.0, dt=0.1)[-1]
    Mp = np.zeros((len(p), 3, 3), complex)
    Mp[live] = leading_symbol(sys, 2, amp.state, amp.sigma0, q[live], p[live])
    M = np.broadcast_to(Mp.reshape(p1.shape + (3, 3)), grid.shape + (3, 3))
    _, L, _ = sys.eig(q[live], p[live])
    _, _, R = sys.eig(amp.state.Q, amp.state.P)
    bound = 0.5 * np.max(np.abs(amp.sigma0) * np.linalg.norm(R[:, :, 2], axis=1) * np.linalg.norm(L[:, :, 2], axis=1))
    val = operator_norm_probe(sys, 2, grid, spatial, eps, 1.0, M, trials=2, dt=0.1)
    assert 0 < val <= bound + 1e-3
