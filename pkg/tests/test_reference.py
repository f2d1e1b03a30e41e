import numpy as np
import pytest

from conftest import gaussian_wkb
from fga._validation import ConfigError, GridError, ResolutionError
from fga.grids import SpatialGrid, WaveField
from fga.reference import SpectralPropagator, SpectralSolution, l2_error, l2_norm, spectral_solve
from fga.systems import Acoustic2D, TwoBranch1D


def _acoustic_packet(eps=1 / 16, p0=(1.0, 0.0), width=0.4, box=4.0):
    p0 = np.asarray(p0)
    # the Gaussian tail in Fourier space reaches about twice the carrier frequency
    g = SpatialGrid.from_bounds([-box, -box], [box, box], 2 * np.pi * eps / (24 * np.linalg.norm(p0)), power_of_two=True)
    x = g.mesh()
    R = np.r_[p0, np.linalg.norm(p0)]
    env = np.exp(-np.sum(x**2, axis=-1) / (2 * width**2))
    vals = (env * np.exp(1j * (x @ p0) / eps))[..., None] * R
    return WaveField(g, vals, eps)


def test_identity_at_start():
    u = gaussian_wkb(1 / 64)
    out = spectral_solve(TwoBranch1D(), u, 0.0)
    assert l2_error(out, u) <= 1e-14 * u.norm()


def test_multiplier_at_start_is_identity():
    g = SpatialGrid.from_bounds([-1.0, -1.0], [1.0, 1.0], 0.1)
    sol = SpectralSolution.build(Acoustic2D(), g, 0.0)
    assert np.abs(sol.multiplier - np.eye(3)).max() <= 1e-12


def test_zero_mode_is_identity():
    g = SpatialGrid.from_bounds([-1.0], [1.0], 0.1)
    sol = SpectralSolution.build(TwoBranch1D(), g, 0.8)
    assert np.array_equal(sol.multiplier[0], np.eye(2))
    assert sol.max_speed == pytest.approx(1.0)


def test_acoustic_energy_conservation():
    u = _acoustic_packet()
    out = spectral_solve(Acoustic2D(), u, 1.0, box_factor=2)
    assert abs(out.norm() - u.norm()) <= 1e-12 * u.norm()


def _travel_error(eps, width=0.3):
    u = _acoustic_packet(eps, width=width, box=2.5)
    out = spectral_solve(Acoustic2D(), u, 1.0, box_factor=2)
    x = u.grid.mesh()
    env = np.exp(-((x[..., 0] - 1) ** 2 + x[..., 1] ** 2) / (2 * width**2))
    expected = (env * np.exp(1j * (x[..., 0] - 1.0) / eps))[..., None] * np.r_[1.0, 0.0, 1.0]
    return l2_error(out, u.with_values(expected)) / u.norm()


def test_acoustic_packet_travels_along_momentum():
    # the envelope error of the transported packet is first order in eps
    e1, e2 = _travel_error(1 / 16), _travel_error(1 / 32)
    assert e1 < 0.4
    assert e1 / e2 == pytest.approx(2.0, rel=0.15)


def test_box_doubling_is_converged():
    u = gaussian_wkb(1 / 64)
    a = spectral_solve(TwoBranch1D(), u, 0.5)
    b = spectral_solve(TwoBranch1D(), u, 0.5, box_factor=2)
    assert l2_error(a, b) <= 1e-10 * a.norm()


def test_two_branch_splits_into_travelling_halves():
    eps = 1 / 64
    u = gaussian_wkb(eps, profile=(1.0, 0.0))
    out = spectral_solve(TwoBranch1D(c0=2.0), u, 0.5)
    x = u.grid.axes[0]
    # u = (R_+ + R_-)/sqrt 2 components; each moves at speed +-2 without changing shape
    right = u.values[:, 0] * 0 + np.interp(x - 1.0, x, u.values[:, 0].real) + 1j * np.interp(x - 1.0, x, u.values[:, 0].imag)
    left = np.interp(x + 1.0, x, u.values[:, 0].real) + 1j * np.interp(x + 1.0, x, u.values[:, 0].imag)
    exact0 = 0.5 * (right + left)
    exact1 = 0.5 * (right - left)
    assert np.allclose(out.values[:, 0], exact0, atol=1e-2)
    assert np.allclose(out.values[:, 1], exact1, atol=1e-2)


def test_rejects_variable_coefficients():
    with pytest.raises(ConfigError):
        spectral_solve(TwoBranch1D(amplitude=0.5), gaussian_wkb(1 / 16), 0.5)


def test_wraparound_error():
    u = gaussian_wkb(1 / 64, box=1.5)
    with pytest.raises(GridError):
        spectral_solve(TwoBranch1D(), u, 1.0)


def test_underresolved_data():
    g = SpatialGrid.from_bounds([-4.0], [4.0], 0.05)
    x = g.axes[0]
    vals = (np.exp(-x**2) * np.exp(1j * 50 * x))[:, None] * np.ones(2)
    with pytest.raises(ResolutionError):
        spectral_solve(TwoBranch1D(), WaveField(g, vals, 1 / 64), 0.1)


def test_spectral_propagator_estimator():
    u = gaussian_wkb(1 / 64)
    prop = SpectralPropagator(TwoBranch1D(), t=0.5).fit(u)
    assert l2_error(prop.transform(u), spectral_solve(TwoBranch1D(), u, 0.5)) == 0.0
    with pytest.raises(GridError):
        prop.transform(gaussian_wkb(1 / 64, box=5.0))


# -- metrics ------------------------------------------------------------------------


def test_l2_norm_of_gaussian():
    g = SpatialGrid.from_bounds([-8.0, -8.0], [8.0, 8.0], 0.05)
    x = g.mesh()
    a = 0.7
    vals = np.exp(-np.sum(x**2, axis=-1) / (2 * a**2))[..., None]
    # int exp(-|x|^2/a^2) dx = pi a^2
    assert l2_norm(WaveField(g, vals, 0.1)) == pytest.approx(np.sqrt(np.pi) * a, rel=1e-8)


def test_l2_error_metric():
    u = gaussian_wkb(1 / 16)
    assert l2_error(u, u) == 0.0
    rng = np.random.default_rng(0)
    fields = [u.with_values(rng.standard_normal(u.values.shape) + 1j * rng.standard_normal(u.values.shape)) for _ in range(3)]
    for a, b, c in [fields, fields[::-1], fields[1:] + fields[:1]]:
        assert l2_error(a, c) <= l2_error(a, b) + l2_error(b, c) + 1e-12
        assert l2_error(a, b) == pytest.approx(l2_error(b, a))


def test_l2_error_grid_mismatch():
    with pytest.raises(GridError):
        l2_error(gaussian_wkb(1 / 16), gaussian_wkb(1 / 16, box=5.0))
