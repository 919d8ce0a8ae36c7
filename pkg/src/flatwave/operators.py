"""Transformed differential operators on the slab.

All operators take the geometry tensors produced by `build_geometry` and act on
raw value arrays: scalars (n1, n2, nz), vectors (n1, n2, nz, 3).  Horizontal
derivatives are spectral, vertical derivatives use the grid's dense matrices,
and every product of fields is followed by 2/3-rule dealiasing (applied once
per assembled entry; dealiasing is linear, so this equals per-product
truncation).
"""
from __future__ import annotations

import numpy as np

from .geometry import GeometryState, SurfaceField, VolumeField


def _vals(f) -> np.ndarray:
    return f.values if isinstance(f, (SurfaceField, VolumeField)) else np.asarray(f)


# ======================================================================
# derivative stacks
# ======================================================================


def grad_flat(f, grid) -> np.ndarray:
    """Plain gradient of a scalar: out[..., j] = dj f."""
    f = _vals(f)
    return np.stack([grid.dx1(f), grid.dx2(f), grid.dz(f)], axis=-1)


def grad_tensor(u, grid) -> np.ndarray:
    """Velocity gradient stack: out[i, j] = dj u_i, shape (3, 3, n1, n2, nz)."""
    u = _vals(u)
    out = np.empty((3, 3) + u.shape[:-1])
    for i in range(3):
        out[i, 0] = grid.dx1(u[..., i])
        out[i, 1] = grid.dx2(u[..., i])
        out[i, 2] = grid.dz(u[..., i])
    return out


def div_flat(u, grid) -> np.ndarray:
    """Plain divergence of a vector."""
    u = _vals(u)
    return grid.dx1(u[..., 0]) + grid.dx2(u[..., 1]) + grid.dz(u[..., 2])


def lap_flat(f, grid) -> np.ndarray:
    """Plain Laplacian (componentwise on vectors)."""
    f = _vals(f)
    if f.ndim == 4:
        return np.stack([lap_flat(f[..., i], grid) for i in range(3)], axis=-1)
    modes = grid.to_modes(f)
    horiz = grid.to_values(modes * (-grid.ksq[:, :, None]))
    return horiz + grid.dz(f, 2)


# ======================================================================
# A-operators
# ======================================================================


def grad_A(f, geom: GeometryState) -> np.ndarray:
    """(grad_A f)_i = Acal_ij dj f, dealiased."""
    grid = geom.grid
    df = grad_flat(f, grid)
    out = np.einsum("ij...,...j->...i", geom.Acal, df)
    return grid.dealias(out)


def div_A(X, geom: GeometryState) -> np.ndarray:
    """div_A X = Acal_ij dj X_i, dealiased."""
    grid = geom.grid
    gu = grad_tensor(X, grid)
    out = np.einsum("ij...,ij...->...", geom.Acal, gu)
    return grid.dealias(out)


def lap_A(f, geom: GeometryState) -> np.ndarray:
    """Lap_A f = div_A(grad_A f), literally composed (componentwise on vectors)."""
    f = _vals(f)
    if f.ndim == 4:
        return np.stack([lap_A(f[..., i], geom) for i in range(3)], axis=-1)
    return div_A(grad_A(f, geom), geom)


def symgrad_A(u, geom: GeometryState) -> np.ndarray:
    """(D_A u)_ij = Acal_ik dk u_j + Acal_jk dk u_i, shape (3, 3, n1, n2, nz)."""
    grid = geom.grid
    gu = grad_tensor(u, grid)
    t = np.einsum("ik...,jk...->ij...", geom.Acal, gu)
    out = t + np.swapaxes(t, 0, 1)
    for i in range(3):
        for j in range(3):
            out[i, j] = grid.dealias(out[i, j])
    return out


def stress_A(p, u, geom: GeometryState) -> np.ndarray:
    """S_A(p, u) = p I - D_A u, shape (3, 3, n1, n2, nz)."""
    p = _vals(p)
    out = -symgrad_A(u, geom)
    for i in range(3):
        out[i, i] += p
    return out


def advect_A(u, geom: GeometryState) -> np.ndarray:
    """(u . grad_A u)_i = u_j Acal_jk dk u_i, dealiased."""
    grid = geom.grid
    u = _vals(u)
    gu = grad_tensor(u, grid)
    conv = np.einsum("...j,jk...,ik...->...i", u, geom.Acal, gu)
    return grid.dealias(conv)


# ======================================================================
# boundary traces
# ======================================================================


def stress_normal_top(p, u, geom: GeometryState) -> np.ndarray:
    """(S_A(p, u) N) on the top row, shape (3, n1, n2), dealiased."""
    grid = geom.grid
    S = stress_A(p, u, geom)
    Stop = S[:, :, :, :, 0]
    out = np.einsum("ij...,j...->i...", Stop, geom.N)
    for i in range(3):
        out[i] = grid.dealias(out[i])
    return out


def stress_normal_top_flat(p, u, grid) -> np.ndarray:
    """((p I - D(u)) e3) on the top row for the flat operators, shape (3, n1, n2)."""
    p = _vals(p)
    u = _vals(u)
    du_dz = grid.dz(u)
    out = np.empty((3, grid.n1, grid.n2))
    out[0] = -(grid.dx1(u[..., 2]) + du_dz[..., 0])[:, :, 0]
    out[1] = -(grid.dx2(u[..., 2]) + du_dz[..., 1])[:, :, 0]
    out[2] = p[:, :, 0] - 2.0 * du_dz[:, :, 0, 2]
    return out


# ======================================================================
# surface helpers
# ======================================================================


def lap_star(f, grid) -> np.ndarray:
    """Horizontal (surface) Laplacian of a (n1, n2) field, spectrally."""
    f = _vals(f)
    modes = np.fft.fft2(f, axes=(0, 1))
    ksq = grid.kx1[:, None] ** 2 + grid.kx2[None, :] ** 2
    return np.real(np.fft.ifft2(-ksq * modes, axes=(0, 1)))


def u_dot_N(u, eta, grid) -> np.ndarray:
    """Velocity flux u . N through the top, N = (-d1 eta, -d2 eta, 1)."""
    u = _vals(u)
    ev = eta.values if hasattr(eta, "values") else np.asarray(eta)
    top = u[:, :, 0, :]
    out = top[:, :, 2] - top[:, :, 0] * grid.dx1(ev) - top[:, :, 1] * grid.dx2(ev)
    return grid.dealias(out)


# ======================================================================
# structural identity
# ======================================================================


def check_div_identity(v, geom: GeometryState) -> float:
    """Max-norm residual of J div_A v = div(M^{-1} v), via independent paths."""
    grid = geom.grid
    v = _vals(v)
    lhs = grid.dealias(geom.J * div_A(v, geom))
    w = np.einsum("ij...,...j->...i", geom.Minv, v)
    w = grid.dealias(w)
    rhs = div_flat(w, grid)
    return float(np.abs(lhs - rhs).max())
