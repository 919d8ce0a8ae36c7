"""Shared fixtures: grids, smooth random fields, and prepared states."""
import numpy as np
import pytest

from flatwave.grid import Grid
from flatwave.geometry import SurfaceField, build_geometry
from flatwave.initial_data import prepare_initial_data

SEED = 20260819


@pytest.fixture(scope="session")
def grid16():
    """The reference horizontal resolution on the 2 pi x 2 pi x [-1, 0] slab."""
    return Grid(16, 16, 33)


@pytest.fixture(scope="session")
def grid8():
    """Coarse grid for cheap dynamics tests."""
    return Grid(8, 8, 17)


@pytest.fixture()
def rng():
    return np.random.default_rng(SEED)


def smooth_surface(grid, rng, amplitude=0.05, kmax=3):
    """Random band-limited zero-mean surface with sup norm `amplitude`."""
    vals = np.zeros((grid.n1, grid.n2))
    X1 = grid.x1[:, None]
    X2 = grid.x2[None, :]
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(-kmax, kmax + 1):
            if k1 == 0 and k2 == 0:
                continue
            a, ph = rng.normal(), rng.uniform(0, 2 * np.pi)
            vals += a * np.cos(2 * np.pi * (k1 * X1 / grid.l1
                                            + k2 * X2 / grid.l2) + ph)
    sup = np.abs(vals).max()
    if sup > 0:
        vals *= amplitude / sup
    return SurfaceField(grid, vals)


def smooth_volume_scalar(grid, rng, kmax=2):
    """Random band-limited scalar on the slab, smooth in every direction."""
    X1 = grid.x1[:, None, None]
    X2 = grid.x2[None, :, None]
    Z = grid.z[None, None, :]
    vals = np.zeros((grid.n1, grid.n2, grid.nz))
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(-kmax, kmax + 1):
            a, ph = rng.normal(), rng.uniform(0, 2 * np.pi)
            c = rng.normal(size=3)
            prof = c[0] + c[1] * np.sin(np.pi * Z / grid.b) \
                + c[2] * np.cos(np.pi * Z / grid.b)
            vals += a * np.cos(2 * np.pi * (k1 * X1 / grid.l1
                                            + k2 * X2 / grid.l2) + ph) * prof
    return vals / max(1.0, np.abs(vals).max())


def smooth_volume_vector(grid, rng, kmax=2, bottom_zero=False):
    comps = [smooth_volume_scalar(grid, rng, kmax) for _ in range(3)]
    u = np.stack(comps, axis=-1)
    if bottom_zero:
        u *= ((grid.z + grid.b) / grid.b)[None, None, :, None] ** 2
    return u


def single_mode_eta(grid, amp=0.01, k1=1, k2=0, phase=0.0):
    X1 = grid.x1[:, None]
    X2 = grid.x2[None, :]
    vals = amp * np.cos(2 * np.pi * (k1 * X1 / grid.l1 + k2 * X2 / grid.l2)
                        + phase)
    return SurfaceField(grid, np.broadcast_to(vals, (grid.n1, grid.n2)).copy())


@pytest.fixture(scope="session")
def reference_eta16(grid16):
    """The reference initial surface 0.01 (cos x1 + 0.5 cos x2)."""
    X1 = grid16.x1[:, None]
    X2 = grid16.x2[None, :]
    vals = 0.01 * (np.cos(X1) + 0.5 * np.cos(X2)) + 0.0 * X2
    return SurfaceField(grid16, np.broadcast_to(vals, (16, 16)).copy())


@pytest.fixture(scope="session")
def prepared16(reference_eta16, grid16):
    """Reference initial data, repaired once per session (sigma = 1)."""
    u0 = np.zeros((grid16.n1, grid16.n2, grid16.nz, 3))
    return prepare_initial_data(reference_eta16, u0, sigma=1.0)


@pytest.fixture(scope="session")
def geom16_small(grid16):
    """A fixed small-amplitude geometry for operator tests."""
    rng = np.random.default_rng(SEED + 1)
    eta = smooth_surface(grid16, rng, amplitude=0.05)
    return build_geometry(eta)
