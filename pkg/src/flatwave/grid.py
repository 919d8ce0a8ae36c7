"""Grid machinery for the periodic slab.

The domain is Sigma x [-b, 0] with Sigma = (L1 T) x (L2 T) periodic.  Horizontal
directions are uniform and handled spectrally (FFT); the vertical direction uses
endpoint-including, cosine-clustered collocation nodes with dense finite-difference
differentiation matrices built from sliding Fornberg stencils.
"""
from __future__ import annotations

import numpy as np
from scipy.fft import dct, idct

# ======================================================================
# finite-difference weights
# ======================================================================


def fornberg_weights(x0: float, x: np.ndarray, m: int) -> np.ndarray:
    """Weights of derivatives 0..m at x0 on arbitrary nodes x (Fornberg recursion).

    Returns an array w of shape (m+1, len(x)) with sum_j w[k, j] f(x[j]) ~ f^(k)(x0).
    """
    n = len(x)
    c = np.zeros((m + 1, n))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 = c2 * c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def diff_matrix(nodes: np.ndarray, m: int, order: int) -> np.ndarray:
    """Dense m-th-derivative matrix on `nodes`, locally `order`-accurate.

    Each row uses a contiguous window of m + order nodes centered as symmetrically
    as the boundaries allow, so the matrix is banded in structure but stored dense.
    """
    n = len(nodes)
    npts = min(m + order, n)
    out = np.zeros((n, n))
    for i in range(n):
        lo = min(max(i - (npts - 1) // 2, 0), n - npts)
        w = fornberg_weights(nodes[i], nodes[lo:lo + npts], m)
        out[i, lo:lo + npts] = w[m]
    return out


def clenshaw_curtis_weights(n_nodes: int) -> np.ndarray:
    """Clenshaw-Curtis quadrature weights on cos(pi*j/n), j = 0..n, for [-1, 1]."""
    n = n_nodes - 1
    if n == 0:
        return np.array([2.0])
    theta = np.pi * np.arange(1, n) / n
    w = np.zeros(n_nodes)
    v = np.ones(n - 1)
    if n % 2 == 0:
        w[0] = w[n] = 1.0 / (n * n - 1)
        for k in range(1, n // 2):
            v -= 2.0 * np.cos(2.0 * k * theta) / (4.0 * k * k - 1)
        v -= np.cos(n * theta) / (n * n - 1)
    else:
        w[0] = w[n] = 1.0 / (n * n)
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2.0 * np.cos(2.0 * k * theta) / (4.0 * k * k - 1)
    w[1:n] = 2.0 * v / n
    return w


# ======================================================================
# the grid
# ======================================================================

FD_ORDER = 6          # local accuracy of the production differentiation matrices
MAX_Z_DERIVATIVE = 4  # vertical derivative orders prepared up front


class Grid:
    """Discretization of Sigma x [-b, 0].

    Parameters
    ----------
    n1, n2 : int
        Horizontal grid sizes (uniform, periodic).
    nz : int
        Number of vertical collocation nodes, endpoints included.
    l1, l2 : float
        Horizontal periods.
    b : float
        Slab depth (flat bottom at x3 = -b).

    Attributes
    ----------
    x1, x2 : (n,) arrays of horizontal nodes.
    z : (nz,) array of vertical nodes, z[0] = 0 (top) down to z[-1] = -b.
    kx1, kx2 : angular wavenumbers for derivatives (Nyquist zeroed).
    k1_full, k2_full : angular wavenumbers with true Nyquist magnitude (norms,
        extension multipliers).
    dz_mats : dict m -> dense d^m/dz^m matrix.
    wz : vertical quadrature weights for [-b, 0].
    """

    def __init__(self, n1: int, n2: int, nz: int, l1: float = 2.0 * np.pi,
                 l2: float = 2.0 * np.pi, b: float = 1.0):
        if n1 < 4 or n2 < 4 or nz < 8:
            raise ValueError("grid too small: need n1, n2 >= 4 and nz >= 8")
        if min(l1, l2, b) <= 0:
            raise ValueError("l1, l2, b must be positive")
        self.n1, self.n2, self.nz = int(n1), int(n2), int(nz)
        self.l1, self.l2, self.b = float(l1), float(l2), float(b)

        self.x1 = self.l1 * np.arange(self.n1) / self.n1
        self.x2 = self.l2 * np.arange(self.n2) / self.n2
        theta = np.pi * np.arange(self.nz) / (self.nz - 1)
        self.z = (np.cos(theta) - 1.0) * (self.b / 2.0)
        self.z[0] = 0.0
        self.z[-1] = -self.b

        k1 = 2.0 * np.pi * np.fft.fftfreq(self.n1, d=self.l1 / self.n1)
        k2 = 2.0 * np.pi * np.fft.fftfreq(self.n2, d=self.l2 / self.n2)
        self.k1_full = k1.copy()
        self.k2_full = k2.copy()
        if self.n1 % 2 == 0:
            self.k1_full[self.n1 // 2] = np.pi * self.n1 / self.l1
        if self.n2 % 2 == 0:
            self.k2_full[self.n2 // 2] = np.pi * self.n2 / self.l2
        self.kx1 = k1.copy()
        self.kx2 = k2.copy()
        if self.n1 % 2 == 0:
            self.kx1[self.n1 // 2] = 0.0
        if self.n2 % 2 == 0:
            self.kx2[self.n2 // 2] = 0.0
        # |xi|^2 with true Nyquist magnitude, shaped (n1, n2)
        self.ksq = self.k1_full[:, None] ** 2 + self.k2_full[None, :] ** 2
        self.kmag = np.sqrt(self.ksq)

        idx1 = np.abs(np.fft.fftfreq(self.n1) * self.n1)
        idx2 = np.abs(np.fft.fftfreq(self.n2) * self.n2)
        self.dealias_mask = (idx1[:, None] <= self.n1 // 3) & (idx2[None, :] <= self.n2 // 3)

        self.dz_mats = {
            m: diff_matrix(self.z, m, FD_ORDER) for m in range(1, MAX_Z_DERIVATIVE + 1)
        }
        self.wz = clenshaw_curtis_weights(self.nz) * (self.b / 2.0)
        self.cell_area = (self.l1 / self.n1) * (self.l2 / self.n2)

    # ------------------------------------------------------------------
    # identity
    # ------------------------------------------------------------------

    def params(self) -> tuple:
        return (self.n1, self.n2, self.nz, self.l1, self.l2, self.b)

    def __eq__(self, other) -> bool:
        return isinstance(other, Grid) and self.params() == other.params()

    def __hash__(self) -> int:
        return hash(self.params())

    def __repr__(self) -> str:
        return "Grid(n1=%d, n2=%d, nz=%d, l1=%g, l2=%g, b=%g)" % self.params()

    # ------------------------------------------------------------------
    # transforms
    # ------------------------------------------------------------------

    def to_modes(self, values: np.ndarray) -> np.ndarray:
        """Fourier coefficients c(n) with f = sum_n c(n) exp(2 pi i n . x')."""
        return np.fft.fft2(values, axes=(0, 1)) / (self.n1 * self.n2)

    def to_values(self, modes: np.ndarray) -> np.ndarray:
        """Real field from Fourier coefficients (imaginary part discarded)."""
        return np.real(np.fft.ifft2(modes * (self.n1 * self.n2), axes=(0, 1)))

    def dealias(self, values: np.ndarray) -> np.ndarray:
        """2/3-rule truncation of the horizontal spectrum."""
        modes = np.fft.fft2(values, axes=(0, 1))
        mask = self.dealias_mask
        if modes.ndim > 2:
            mask = mask.reshape(mask.shape + (1,) * (modes.ndim - 2))
        return np.real(np.fft.ifft2(modes * mask, axes=(0, 1)))

    def dealias_z(self, values: np.ndarray) -> np.ndarray:
        """2/3-rule truncation of the vertical cosine spectrum.

        The clustered nodes are an affine image of the Chebyshev points, so a
        DCT-I transform along x3 is exact there; coefficients above index
        2 (nz - 1) / 3 are dropped.  Polynomials in x3 below that degree pass
        through unchanged, which keeps resolved fields intact while removing
        the grid-scale oscillations that destabilize perturbation iterations.
        """
        coeff = dct(values, type=1, axis=2)
        cut = (2 * (self.nz - 1)) // 3
        index = [slice(None)] * values.ndim
        index[2] = slice(cut + 1, None)
        coeff[tuple(index)] = 0.0
        return idct(coeff, type=1, axis=2)

    # ------------------------------------------------------------------
    # derivatives
    # ------------------------------------------------------------------

    def dx1(self, values: np.ndarray) -> np.ndarray:
        """Spectral d/dx1 (works for surface and volume arrays)."""
        modes = np.fft.fft2(values, axes=(0, 1))
        shape = (self.n1,) + (1,) * (values.ndim - 1)
        return np.real(np.fft.ifft2(modes * (1j * self.kx1).reshape(shape), axes=(0, 1)))

    def dx2(self, values: np.ndarray) -> np.ndarray:
        """Spectral d/dx2."""
        modes = np.fft.fft2(values, axes=(0, 1))
        shape = (1, self.n2) + (1,) * (values.ndim - 2)
        return np.real(np.fft.ifft2(modes * (1j * self.kx2).reshape(shape), axes=(0, 1)))

    def dz(self, values: np.ndarray, m: int = 1) -> np.ndarray:
        """m-th vertical derivative of a volume array (axis 2)."""
        mat = self.dz_mats[m]
        if values.ndim == 3:
            return np.tensordot(values, mat, axes=([2], [1]))
        # vector volume arrays (n1, n2, nz, 3): differentiate axis 2
        return np.moveaxis(np.tensordot(values, mat, axes=([2], [1])), 3, 2)

    # ------------------------------------------------------------------
    # quadrature
    # ------------------------------------------------------------------

    def surface_integral(self, values2d: np.ndarray) -> float:
        return float(np.sum(values2d) * self.cell_area)

    def volume_integral(self, values3d: np.ndarray) -> float:
        return float(np.sum(np.sum(values3d, axis=(0, 1)) * self.wz) * self.cell_area)

    # ------------------------------------------------------------------
    # traces
    # ------------------------------------------------------------------

    @staticmethod
    def trace_top(values: np.ndarray) -> np.ndarray:
        """Top boundary row (x3 = 0) of a volume array."""
        return values[:, :, 0, ...]

    @staticmethod
    def trace_bottom(values: np.ndarray) -> np.ndarray:
        """Bottom boundary row (x3 = -b) of a volume array."""
        return values[:, :, -1, ...]
