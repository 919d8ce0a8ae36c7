"""Surface/volume fields and the flattening-map geometry.

The free surface eta lives on Sigma; its harmonic-in-the-slab extension eta_bar
generates the flattening map Phi(x) = (x1, x2, x3 + eta_bar (1 + x3/b)).  This
module builds the associated tensors: the Jacobian J = det(grad Phi), its
reciprocal K, the matrix Acal = (grad Phi)^{-T} entering all transformed
differential operators, M = K grad Phi, and M^{-1} = J Acal^T.
"""
from __future__ import annotations

import numpy as np

from .grid import Grid, diff_matrix

J_FLOOR = 0.1


class NumericsError(Exception):
    """Base class for runtime numerical failures."""


class DegenerateMap(NumericsError):
    """Raised when the flattening map loses invertibility (min J <= floor)."""


# ======================================================================
# fields
# ======================================================================


class SurfaceField:
    """Real scalar field on Sigma, stored as values with cached Fourier modes.

    Values and modes stay mutually consistent because instances are immutable;
    construct a new field to change the data.
    """

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (grid.n1, grid.n2):
            raise ValueError(f"surface values must have shape {(grid.n1, grid.n2)}, got {values.shape}")
        values = values.copy()
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self._modes: np.ndarray | None = None

    @classmethod
    def from_modes(cls, grid: Grid, modes: np.ndarray) -> "SurfaceField":
        out = cls(grid, grid.to_values(modes))
        return out

    @classmethod
    def zero(cls, grid: Grid) -> "SurfaceField":
        return cls(grid, np.zeros((grid.n1, grid.n2)))

    @property
    def modes(self) -> np.ndarray:
        if self._modes is None:
            modes = self.grid.to_modes(self.values)
            modes.setflags(write=False)
            self._modes = modes
        return self._modes

    def mean(self) -> float:
        return float(self.values.mean())

    def __repr__(self) -> str:
        return f"SurfaceField({self.grid!r}, max|.|={np.abs(self.values).max():.3e})"


class VolumeField:
    """Real field on the slab: scalar (n1, n2, nz) or 3-vector (n1, n2, nz, 3)."""

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        scalar_shape = (grid.n1, grid.n2, grid.nz)
        if values.shape != scalar_shape and values.shape != scalar_shape + (3,):
            raise ValueError(
                f"volume values must have shape {scalar_shape} or {scalar_shape + (3,)}, got {values.shape}"
            )
        values = values.copy()
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    @classmethod
    def zero(cls, grid: Grid, vector: bool = False) -> "VolumeField":
        shape = (grid.n1, grid.n2, grid.nz) + ((3,) if vector else ())
        return cls(grid, np.zeros(shape))

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 4

    def component(self, i: int) -> np.ndarray:
        return self.values[..., i] if self.is_vector else self.values

    def __repr__(self) -> str:
        kind = "vector" if self.is_vector else "scalar"
        return f"VolumeField({kind}, {self.grid!r}, max|.|={np.abs(self.values).max():.3e})"


# ======================================================================
# harmonic extension and surface quantities
# ======================================================================


def poisson_extend(eta: SurfaceField) -> VolumeField:
    """Harmonic-decay extension of eta into the slab.

    Horizontal mode n is scaled by exp(|xi_n| x3) at every vertical node, where
    xi_n is the angular wavenumber; the zero mode extends as a constant.  The
    top row reproduces eta exactly.
    """
    grid = eta.grid
    mult = np.exp(grid.kmag[:, :, None] * grid.z[None, None, :])
    return VolumeField(grid, grid.to_values(eta.modes[:, :, None] * mult))


def normal(eta: SurfaceField) -> np.ndarray:
    """Non-unit upward surface normal N = (-d1 eta, -d2 eta, 1), shape (3, n1, n2)."""
    grid = eta.grid
    out = np.empty((3, grid.n1, grid.n2))
    out[0] = -grid.dx1(eta.values)
    out[1] = -grid.dx2(eta.values)
    out[2] = 1.0
    return out


def mean_curvature(eta: SurfaceField) -> SurfaceField:
    """H = div*( grad* eta / sqrt(1 + |grad* eta|^2) ), nonlinearity dealiased."""
    grid = eta.grid
    e1 = grid.dx1(eta.values)
    e2 = grid.dx2(eta.values)
    q = 1.0 / np.sqrt(1.0 + e1 * e1 + e2 * e2)
    f1 = grid.dealias(q * e1)
    f2 = grid.dealias(q * e2)
    return SurfaceField(grid, grid.dx1(f1) + grid.dx2(f2))


# ======================================================================
# geometry tensors
# ======================================================================


class GeometryState:
    """Geometry tensors generated by a surface eta (and optionally its velocity).

    Attributes
    ----------
    eta_bar : (n1, n2, nz) harmonic extension values.
    A, B : (n1, n2, nz) arrays  d1 eta_bar * b_tilde, d2 eta_bar * b_tilde.
    J, K : (n1, n2, nz) Jacobian and its pointwise reciprocal.
    Acal : (3, 3, n1, n2, nz) (grad Phi)^{-T}.
    M, Minv : (3, 3, n1, n2, nz) with M = K grad Phi and Minv = J Acal^T.
    N : (3, n1, n2) non-unit upward normal on Sigma.
    H : SurfaceField, mean curvature of eta.
    R : (3, 3, n1, n2, nz) dt(M) M^{-1}, present only when eta_t was supplied.
    """

    def __init__(self, eta: SurfaceField, eta_t: SurfaceField | None, b: float,
                 eta_bar, A, B, J, K, Acal, M, Minv, N, H,
                 eta_bar_t=None, R=None):
        self.eta = eta
        self.eta_t = eta_t
        self.b = b
        self.grid = eta.grid
        self.eta_bar = eta_bar
        self.A = A
        self.B = B
        self.J = J
        self.K = K
        self.Acal = Acal
        self.M = M
        self.Minv = Minv
        self.N = N
        self.H = H
        self.eta_bar_t = eta_bar_t
        self.R = R

    @property
    def b_tilde(self) -> np.ndarray:
        return 1.0 + self.grid.z / self.b

    def with_eta_t(self, eta_t: SurfaceField) -> "GeometryState":
        """Copy of this state with the surface velocity attached.

        Recomputes only the time-derivative tensors (eta_bar_t and R); the
        purely spatial tensors are shared with this instance.
        """
        grid = self.grid
        bt = self.b_tilde
        eta_bar_t = poisson_extend(eta_t).values
        dJ = eta_bar_t / self.b + grid.dz(eta_bar_t) * bt
        dK = -self.K * self.K * dJ
        dA = grid.dx1(eta_bar_t) * bt
        dB = grid.dx2(eta_bar_t) * bt
        dM = np.zeros((3, 3, grid.n1, grid.n2, grid.nz))
        dM[0, 0] = dK
        dM[1, 1] = dK
        dM[2, 0] = dA * self.K + self.A * dK
        dM[2, 1] = dB * self.K + self.B * dK
        R = np.einsum("ik...,kj...->ij...", dM, self.Minv)
        return GeometryState(self.eta, eta_t, self.b, self.eta_bar, self.A, self.B,
                             self.J, self.K, self.Acal, self.M, self.Minv, self.N,
                             self.H, eta_bar_t=eta_bar_t, R=R)


def build_geometry(eta: SurfaceField, eta_t: SurfaceField | None = None,
                   j_floor: float = J_FLOOR) -> GeometryState:
    """Assemble the geometry tensors for a surface eta.

    Tensor entries are rational functions of the extension and are assembled
    pointwise (no dealiasing) so that the algebraic identities J K = 1,
    Minv = J Acal^T, and Acal = (grad Phi)^{-T} hold to rounding.

    Raises DegenerateMap when min J <= j_floor.
    """
    grid = eta.grid
    b = grid.b
    bt = 1.0 + grid.z / b  # (nz,)

    eta_bar = poisson_extend(eta).values
    d1 = grid.dx1(eta_bar)
    d2 = grid.dx2(eta_bar)
    d3 = grid.dz(eta_bar)

    A = d1 * bt
    B = d2 * bt
    J = 1.0 + eta_bar / b + d3 * bt
    jmin = float(J.min())
    if jmin <= j_floor:
        raise DegenerateMap(f"flattening map degenerate: min J = {jmin:.4g} <= {j_floor}")
    K = 1.0 / J

    shape = (grid.n1, grid.n2, grid.nz)
    Acal = np.zeros((3, 3) + shape)
    Acal[0, 0] = 1.0
    Acal[1, 1] = 1.0
    Acal[0, 2] = -A * K
    Acal[1, 2] = -B * K
    Acal[2, 2] = K

    M = np.zeros((3, 3) + shape)
    M[0, 0] = K
    M[1, 1] = K
    M[2, 0] = A * K
    M[2, 1] = B * K
    M[2, 2] = 1.0

    Minv = J * np.swapaxes(Acal, 0, 1)

    N = normal(eta)
    H = mean_curvature(eta)

    eta_bar_t = None
    R = None
    if eta_t is not None:
        eta_bar_t = poisson_extend(eta_t).values
        dJ = eta_bar_t / b + grid.dz(eta_bar_t) * bt
        dK = -K * K * dJ
        dA = grid.dx1(eta_bar_t) * bt
        dB = grid.dx2(eta_bar_t) * bt
        dM = np.zeros((3, 3) + shape)
        dM[0, 0] = dK
        dM[1, 1] = dK
        dM[2, 0] = dA * K + A * dK
        dM[2, 1] = dB * K + B * dK
        R = np.einsum("ik...,kj...->ij...", dM, Minv)

    return GeometryState(eta, eta_t, b, eta_bar, A, B, J, K, Acal, M, Minv, N, H,
                         eta_bar_t=eta_bar_t, R=R)


def identity_geometry(grid: Grid) -> GeometryState:
    """Geometry of the flat surface eta = 0 (exact identity tensors)."""
    return build_geometry(SurfaceField.zero(grid))


# ======================================================================
# independent harmonicity check
# ======================================================================


def harmonicity_residual(eta: SurfaceField, nz: int | None = None) -> float:
    """Max interior residual of Lap(eta_bar) measured with an independent operator.

    The vertical second derivative uses a 4th-order stencil built separately from
    the production matrices, so the returned number tracks discretization error
    of the node family rather than reusing the main code path.  It decreases
    under vertical refinement for smooth eta.
    """
    grid = eta.grid
    if nz is not None and nz != grid.nz:
        grid = Grid(grid.n1, grid.n2, nz, grid.l1, grid.l2, grid.b)
        eta = SurfaceField(grid, eta.values)
    eta_bar = poisson_extend(eta).values
    d2_oracle = diff_matrix(grid.z, 2, order=4)
    vert = np.tensordot(eta_bar, d2_oracle, axes=([2], [1]))
    horiz = grid.to_values(grid.to_modes(eta_bar) * (-grid.ksq[:, :, None]))
    res = vert + horiz
    return float(np.abs(res[:, :, 1:-1]).max())
