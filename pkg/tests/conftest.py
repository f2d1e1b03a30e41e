import numpy as np
import pytest

from fga.grids import SpatialGrid
from fga.phase_space import wkb_initial_data


def gaussian_wkb(eps, p0=1.25, width=0.3, box=6.0, profile=(1.0, 0.5), ppw=16):
    """1-D vector WKB field ``profile * exp(-x^2/(2 w^2)) exp(i p0 x / eps)``."""
    spacing = min(np.sqrt(eps) / 4, 2 * np.pi * eps / (ppw * abs(p0)))
    grid = SpatialGrid.from_bounds([-box], [box], spacing, power_of_two=True)
    prof = np.asarray(profile, dtype=float)

    def amp(x):
        return np.exp(-x[..., 0] ** 2 / (2 * width**2))[..., None] * prof

    return wkb_initial_data(amp, lambda x: p0 * x[..., 0], eps, grid)


@pytest.fixture
def wkb64():
    return gaussian_wkb(1 / 64)
