import numpy as np
import pytest
from scipy.special import erf
from sklearn.base import clone

from conftest import gaussian_wkb
from fga._validation import DataError, ResolutionError
from fga.grids import SpatialGrid, WaveField
from fga.phase_space import (
    CutoffSpec,
    FBITransform,
    PacketCoefficients,
    PhaseGrid,
    cutoff_eval,
    fbi_forward,
    fbi_inverse,
    high_frequency_mass,
    in_region,
    smoothstep,
    wkb_initial_data,
)


# -- cutoff ---------------------------------------------------------------


def test_smoothstep_endpoints_and_derivatives():
    x = np.array([0.0, 1.0])
    assert np.allclose(smoothstep(x, 3), [0.0, 1.0])
    h = 1e-3
    # C^3: derivatives up to order 3 vanish at both ends
    for x0 in (0.0, 1.0):
        xs = x0 + h * np.arange(-4, 5)
        vals = smoothstep(np.clip(xs, 0, 1), 3)
        assert abs(np.gradient(vals, h)[4]) < 1e-6


def test_cutoff_inside_region_is_one():
    spec = CutoffSpec(0.5)
    assert cutoff_eval(spec, [0.0, 0.0], [1.0, 0.0]) == 1.0


def test_cutoff_outside_support_is_zero():
    spec = CutoffSpec(0.5)
    assert cutoff_eval(spec, [0.0, 0.0], [5.0, 0.0]) == 0.0
    assert cutoff_eval(spec, [0.0, 0.0], [0.2, 0.0]) == 0.0
    assert cutoff_eval(spec, [4.5, 0.0], [1.0, 0.0]) == 0.0


def test_cutoff_transition_strictly_between():
    val = cutoff_eval(CutoffSpec(0.5), [0.0, 0.0], [0.4, 0.0])
    assert 0.0 < val < 1.0


def test_cutoff_sampled_regions_and_monotone_rays():
    delta = 0.5
    spec = CutoffSpec(delta)
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, (500, 2))
    p = rng.standard_normal((500, 2))
    p *= (rng.uniform(delta, 1 / delta, 500) / np.linalg.norm(p, axis=1))[:, None]
    keep = in_region(q, p, delta)
    assert np.all(cutoff_eval(spec, q[keep], p[keep]) == 1.0)
    far = p * (2.5 / delta / np.linalg.norm(p, axis=1))[:, None]
    assert np.all(cutoff_eval(spec, q, far) == 0.0)
    r = np.linspace(0.01, 5.0, 400)
    vals = cutoff_eval(spec, np.zeros((400, 2)), np.stack([r, 0 * r], 1))
    rise, fall = vals[r <= 1.0], vals[r >= 1.0]
    assert np.all(np.diff(rise) >= 0) and np.all(np.diff(fall) <= 0)
    vq = cutoff_eval(spec, np.stack([r, 0 * r], 1), np.tile([1.0, 0.0], (400, 1)))
    assert np.all(np.diff(vq) <= 0)
    assert np.all((vals >= 0) & (vals <= 1))


def test_cutoff_spec_rejects_low_order():
    with pytest.raises(ValueError):
        CutoffSpec(0.5, order=2)


# -- phase grid -----------------------------------------------------------


def test_phase_grid_nodes_lie_in_support():
    grid = PhaseGrid.full(1, 1 / 16, 0.5)
    q, p = grid.nodes()
    assert np.all(np.abs(q) <= 4 + 1e-12)
    rp = np.abs(p[:, 0])
    assert np.all((rp >= 0.25 - 1e-12) & (rp <= 4 + 1e-12))
    assert grid.weight == pytest.approx((0.5 * 0.25) ** 2)
    assert len(np.unique(np.c_[q, p], axis=0)) == len(q)


def test_phase_grid_lattice_is_shared():
    a = PhaseGrid.from_box([-1], [1], [0.5], [2], 0.1, 0.5)
    b = PhaseGrid.from_box([-0.37], [0.81], [0.66], [1.5], 0.1, 0.5)
    assert np.allclose(np.round(b.q_axes[0] / 0.1), b.q_axes[0] / 0.1)
    assert set(np.round(b.q_axes[0], 9)).issubset(set(np.round(a.q_axes[0], 9)))


# -- forward transform ----------------------------------------------------


def test_fbi_of_gaussian_at_origin_2d():
    eps = 0.1
    g = SpatialGrid.from_bounds([-8.0, -8.0], [8.0, 8.0], np.sqrt(eps) / 4)
    x = g.mesh()
    vals = np.zeros(g.shape + (3,), complex)
    vals[..., 0] = np.exp(-np.sum(x**2, axis=-1) / 2)
    u = WaveField(g, vals, eps)
    h = 0.5 * np.sqrt(eps)
    grid = PhaseGrid.from_box([-h, -h], [h, h], [-h, -h], [h, h], h, 0.5, clip=False)
    c = fbi_forward(u, eps, grid).values
    centre = c[1, 1, 1, 1]
    assert centre[0] == pytest.approx((np.pi * eps) ** -0.5 / (1 + eps), rel=1e-10)
    assert np.all(centre[1:] == 0)


def test_fbi_of_zero_is_zero(wkb64):
    zero = wkb64.with_values(np.zeros_like(wkb64.values))
    grid = PhaseGrid.covering(wkb64, 1 / 64, 0.5)
    assert np.all(fbi_forward(zero, 1 / 64, grid).values == 0)


def test_fbi_rejects_unresolved_grid():
    g = SpatialGrid((0.0,), (10.0,), (16,))
    u = WaveField(g, np.ones((16, 1)), 1e-2)
    grid = PhaseGrid.from_box([0], [1], [0.5], [1], 0.05, 0.5)
    with pytest.raises(ResolutionError):
        fbi_forward(u, 1e-2, grid)


@pytest.mark.parametrize("eps", [1 / 16, 1 / 64])
def test_isometry_on_wkb(eps):
    u = gaussian_wkb(eps)
    # the quadrature box holds all the FBI mass, not only the cutoff support
    grid = PhaseGrid.covering(u, eps, 0.5, clip=False)
    c = fbi_forward(u, eps, grid)
    assert abs(c.norm() ** 2 - u.norm() ** 2) <= 1e-6 * u.norm() ** 2


@pytest.mark.parametrize("eps", [1 / 16, 1 / 64])
def test_roundtrip_on_wkb(eps):
    u = gaussian_wkb(eps)
    grid = PhaseGrid.covering(u, eps, 0.5)
    back = fbi_inverse(fbi_forward(u, eps, grid), eps, u.grid)
    err = np.sqrt(np.sum(np.abs(back.values - u.values) ** 2) * u.grid.cell_volume)
    assert err <= 1e-4 * u.norm()


def test_inverse_of_zero_is_zero(wkb64):
    grid = PhaseGrid.covering(wkb64, 1 / 64, 0.5)
    c = PacketCoefficients(grid, np.zeros(grid.shape + (2,), complex), 1 / 64)
    assert np.all(fbi_inverse(c, 1 / 64, wkb64.grid).values == 0)


def test_inverse_of_single_coefficient_is_coherent_state():
    eps = 1 / 64
    out = SpatialGrid.from_bounds([-2.0], [2.0], np.sqrt(eps) / 8)
    grid = PhaseGrid.from_box([-0.5], [0.5], [0.5], [1.5], 0.5 * np.sqrt(eps), 0.5)
    vals = np.zeros(grid.shape + (1,), complex)
    iq = int(np.argmin(np.abs(grid.q_axes[0] - 0.25)))
    ip = int(np.argmin(np.abs(grid.p_axes[0] - 1.0)))
    vals[iq, ip, 0] = 1.0
    u = fbi_inverse(PacketCoefficients(grid, vals, eps), eps, out).values[:, 0]
    x = out.axes[0]
    q0, p0 = grid.q_axes[0][iq], grid.p_axes[0][ip]
    psi = np.exp(1j * p0 * (x - q0) / eps - (x - q0) ** 2 / (2 * eps))
    psi[np.abs(x - q0) > 8 * np.sqrt(eps)] = 0
    ratio = u[np.abs(psi) > 1e-3] / psi[np.abs(psi) > 1e-3]
    assert np.allclose(ratio, ratio[0], rtol=1e-12)
    assert abs(x[np.argmax(np.abs(u))] - q0) <= out.spacing[0]


# -- high-frequency mass --------------------------------------------------


def test_high_frequency_mass_of_wkb_is_negligible():
    eps = 1e-2
    u = gaussian_wkb(eps, p0=1.25)
    assert high_frequency_mass(u, eps, 0.5) <= 1e-8 * u.norm() ** 2


def test_high_frequency_mass_of_low_frequency_gaussian():
    # |F u|^2 factorizes into exp(-q^2/(1+eps)) and exp(-p^2/(eps(1+eps))) densities
    eps, delta = 1e-2, 0.5
    g = SpatialGrid.from_bounds([-9.0], [9.0], np.sqrt(eps) / 4)
    u = WaveField(g, np.exp(-g.axes[0] ** 2 / 2)[:, None], eps)
    inside = (1 - erf(delta / np.sqrt(eps * (1 + eps))) + erf(1 / delta / np.sqrt(eps * (1 + eps))) - 1) * erf(
        1 / delta / np.sqrt(1 + eps)
    )
    expected = (1 - inside) * u.norm() ** 2
    mass = high_frequency_mass(u, eps, delta)
    assert mass == pytest.approx(expected, rel=1e-6)
    assert mass >= 0.5 * u.norm() ** 2


def test_high_frequency_mass_of_zero():
    g = SpatialGrid.from_bounds([-1.0], [1.0], 0.01)
    assert high_frequency_mass(WaveField(g, np.zeros((g.size, 1)), 1e-2), 1e-2, 0.5) == 0.0


def test_high_frequency_mass_decreases_with_eps():
    vals = [high_frequency_mass(gaussian_wkb(e, p0=0.8), e, 0.5) for e in (1 / 16, 1 / 32, 1 / 64)]
    assert vals[1] <= vals[0] and vals[2] <= vals[1]
    assert vals[0] > 0


# -- WKB data --------------------------------------------------------------


def test_wkb_zero_amplitude():
    g = SpatialGrid.from_bounds([-1.0], [1.0], 0.01)
    u = wkb_initial_data(lambda x: np.zeros(x.shape[:-1]), lambda x: x[..., 0], 0.1, g)
    assert np.all(u.values == 0)


def test_wkb_modulus_equals_amplitude():
    eps = 1 / 64
    u = gaussian_wkb(eps)
    x = u.grid.axes[0]
    env = np.exp(-x**2 / (2 * 0.3**2))
    assert np.allclose(np.abs(u.values[:, 0]), env, atol=1e-15)
    assert np.allclose(np.abs(u.values[:, 1]), 0.5 * env, atol=1e-15)


def test_wkb_coefficients_peak_at_phase_gradient():
    eps, p0 = 1 / 64, 1.25
    u = gaussian_wkb(eps, p0=p0)
    grid = PhaseGrid.covering(u, eps, 0.5)
    dens = np.sum(np.abs(fbi_forward(u, eps, grid).values) ** 2, axis=-1)
    iq, ip = np.unravel_index(np.argmax(dens), dens.shape)
    assert abs(grid.p_axes[0][ip] - p0) <= grid.spacing
    assert abs(grid.q_axes[0][iq]) <= grid.spacing


def test_wkb_support_escaping_grid():
    g = SpatialGrid.from_bounds([-1.0], [1.0], 0.01)
    with pytest.raises(DataError):
        wkb_initial_data(lambda x: np.exp(-x[..., 0] ** 2), lambda x: x[..., 0], 0.1, g)


# -- estimator -------------------------------------------------------------


def test_fbi_transform_estimator(wkb64):
    tr = FBITransform(delta=0.5)
    assert tr.get_params()["delta"] == 0.5
    c = tr.fit(wkb64).transform(wkb64)
    back = tr.inverse_transform(c)
    assert np.sqrt(np.sum(np.abs(back.values - wkb64.values) ** 2) * wkb64.grid.cell_volume) <= 1e-4 * wkb64.norm()
    tr2 = clone(tr)
    assert not hasattr(tr2, "grid_")
    assert tr2.get_params() == tr.get_params()
