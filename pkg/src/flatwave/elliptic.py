"""Per-mode boundary-value solvers on the slab.

Flat (identity-geometry) Stokes and Poisson problems reduce, per horizontal
Fourier mode, to dense two-point boundary-value systems in x3 that are
assembled with the grid's differentiation matrices and solved by LU with
cached factorizations.  The transformed-geometry versions are solved by Picard
iteration around the flat solver, moving the geometry perturbation to the
right-hand side.

Row placement per mode (4 nz unknowns u1, u2, u3, p):
  * momentum rows at interior nodes for each velocity component,
  * the third momentum equation additionally at the bottom node (pressure closure),
  * the divergence equation at every node except the bottom,
  * boundary rows: top stress (free_stress) or top velocity (dirichlet), u = 0 bottom.
The zero mode of the dirichlet variant keeps every divergence row, releases the
top u3 boundary row (implied by the data-compatibility condition, which is
checked first), and uses the freed slot for the pressure gauge row (surface
mean of p fixed to zero).
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .geometry import GeometryState, NumericsError, SurfaceField, VolumeField
from .grid import Grid
from . import operators as ops

FREE_STRESS = "free_stress"
DIRICHLET = "dirichlet"

PICARD_TOL = 1e-10
PICARD_MAX_ITER = 50
COMPAT_TOL = 1e-8


class SingularMode(NumericsError):
    """A per-mode system factorization hit a (near-)zero pivot."""

    def __init__(self, mode: tuple[int, int], detail: str = ""):
        self.mode = mode
        super().__init__(f"singular per-mode system at mode index {mode} {detail}".rstrip())


class NoConvergence(NumericsError):
    """Picard iteration failed to reach tolerance within the iteration cap."""

    def __init__(self, iterations: int, delta: float, detail: str = ""):
        self.iterations = iterations
        self.delta = delta
        msg = f"no convergence after {iterations} iterations (last delta {delta:.3e})"
        if detail:
            msg += f"; {detail}"
        super().__init__(msg)


class CompatibilityViolated(NumericsError):
    """Dirichlet-variant data violates the flux-balance compatibility condition."""


# ======================================================================
# right-hand-side containers
# ======================================================================


class StokesRhs:
    """Data for a flat/transformed Stokes solve.

    f : (n1, n2, nz, 3) volume force (default zero)
    h : (n1, n2, nz) divergence data (default zero)
    bc_top : (3, n1, n2) top boundary data: stress for the free_stress variant,
        velocity for the dirichlet variant (default zero)
    variant : "free_stress" or "dirichlet"
    """

    def __init__(self, grid: Grid, f=None, h=None, bc_top=None, variant: str = FREE_STRESS):
        if variant not in (FREE_STRESS, DIRICHLET):
            raise ValueError(f"unknown variant {variant!r}")
        self.grid = grid
        self.variant = variant
        shape = (grid.n1, grid.n2, grid.nz)
        self.f = np.zeros(shape + (3,)) if f is None else np.asarray(f, dtype=np.float64)
        self.h = np.zeros(shape) if h is None else np.asarray(h, dtype=np.float64)
        self.bc_top = (np.zeros((3, grid.n1, grid.n2)) if bc_top is None
                       else np.asarray(bc_top, dtype=np.float64))
        if self.f.shape != shape + (3,) or self.h.shape != shape or self.bc_top.shape != (3, grid.n1, grid.n2):
            raise ValueError("StokesRhs field shapes do not match the grid")


class PoissonRhs:
    """Data for a flat/transformed Poisson solve with mixed boundary rows.

    f1 : (n1, n2, nz) interior data (default zero)
    f2 : (n1, n2) top Dirichlet data (default zero)
    f3 : (n1, n2) bottom flux data, measured along the outward normal (0, 0, -1)
    g0, Gvec : optional divergence-form data; when given the interior equation
        is div_A(grad_A p + Gvec) = g0 and the bottom flux datum applies to
        (grad_A p + Gvec) . nu.
    """

    def __init__(self, grid: Grid, f1=None, f2=None, f3=None, g0=None, Gvec=None):
        self.grid = grid
        shape = (grid.n1, grid.n2, grid.nz)
        self.f1 = np.zeros(shape) if f1 is None else np.asarray(f1, dtype=np.float64)
        self.f2 = np.zeros(shape[:2]) if f2 is None else np.asarray(f2, dtype=np.float64)
        self.f3 = np.zeros(shape[:2]) if f3 is None else np.asarray(f3, dtype=np.float64)
        self.g0 = None if g0 is None else np.asarray(g0, dtype=np.float64)
        self.Gvec = None if Gvec is None else np.asarray(Gvec, dtype=np.float64)
        if (self.g0 is None) != (self.Gvec is None):
            raise ValueError("divergence-form data needs both g0 and Gvec")


# ======================================================================
# flat Stokes
# ======================================================================


class FlatStokesSolver:
    """Cached per-mode LU solver for the flat Stokes boundary-value problem.

        alpha u - Lap u + grad p = f,   div u = h   in the slab,
        (p I - D(u)) e3 = psi   or   u = phi        on the top,
        u = 0                                       on the bottom.

    A coupled key additionally carries the implicit surface unknown used by the
    time stepper: the stress row sees -(1 + sigma |xi|^2) eta+ and the extra row
    advances eta+ with the new u3 trace.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        self._cache: dict = {}

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------

    def _assemble(self, i1: int, i2: int, variant: str, alpha: float,
                  coupled: tuple | None) -> np.ndarray:
        grid = self.grid
        nz = grid.nz
        k1 = grid.kx1[i1]
        k2 = grid.kx2[i2]
        ksq = k1 * k1 + k2 * k2
        D1 = grid.dz_mats[1]
        D2 = grid.dz_mats[2]
        size = 4 * nz + (1 if coupled else 0)
        mat = np.zeros((size, size), dtype=np.complex128)
        iu = [slice(c * nz, (c + 1) * nz) for c in range(3)]
        ip = slice(3 * nz, 4 * nz)

        helm = (alpha + ksq) * np.eye(nz) - D2  # "alpha - Lap" per mode
        kvec = (1j * k1, 1j * k2)

        # momentum rows at interior nodes for each component
        for c in range(3):
            rows = slice(c * nz + 1, c * nz + nz - 1)
            mat[rows, iu[c]] = helm[1:-1]
            if c < 2:
                mat[rows, ip] = kvec[c] * np.eye(nz)[1:-1]
            else:
                mat[rows, ip] = D1[1:-1]

        # bottom boundary rows: u = 0
        for c in range(3):
            mat[c * nz + nz - 1, c * nz + nz - 1] = 1.0

        # top boundary rows
        if variant == FREE_STRESS:
            mat[0, iu[0]] = -D1[0]
            mat[0, 2 * nz] = -1j * k1
            mat[nz, iu[1]] = -D1[0]
            mat[nz, 2 * nz] = -1j * k2
            mat[2 * nz, ip] = np.eye(nz)[0]
            mat[2 * nz, iu[2]] = -2.0 * D1[0]
        else:
            for c in range(3):
                mat[c * nz, c * nz] = 1.0

        # pressure block: divergence at nodes 0..nz-2, third momentum at the bottom
        for j in range(nz - 1):
            row = 3 * nz + j
            mat[row, 0 * nz + j] = 1j * k1
            mat[row, 1 * nz + j] = 1j * k2
            mat[row, iu[2]] = D1[j]
        row = 4 * nz - 1
        mat[row, iu[2]] = helm[nz - 1]
        mat[row, ip] = D1[nz - 1]

        if variant == DIRICHLET and ksq == 0.0:
            # Zero mode: the top u3 trace is implied by the flux-compatibility
            # condition, so that boundary row is released; its slot takes the
            # divergence row at the top node, and the freed pressure-block row
            # takes the gauge (surface mean of p fixed to zero).  Swapping the
            # top divergence row itself for the gauge leaves a sawtooth near-null
            # vector with banded differentiation, so the release happens here.
            mat[2 * nz, :] = 0.0
            mat[2 * nz, iu[2]] = D1[0]
            mat[3 * nz, :] = 0.0
            mat[3 * nz, 3 * nz] = 1.0

        if coupled:
            dt, sigma, kappa = coupled
            mat[2 * nz, 4 * nz] = -(1.0 + sigma * ksq)
            mat[4 * nz, 4 * nz] = 1.0 / dt + kappa * ksq
            mat[4 * nz, 2 * nz] = -1.0
        return mat

    def factorization(self, variant: str = FREE_STRESS, alpha: float = 0.0,
                      coupled: tuple | None = None) -> list:
        key = (variant, float(alpha), coupled)
        if key not in self._cache:
            grid = self.grid
            lus = []
            for i1 in range(grid.n1):
                for i2 in range(grid.n2):
                    mat = self._assemble(i1, i2, variant, alpha, coupled)
                    lu, piv = lu_factor(mat, check_finite=False)
                    dmag = np.abs(np.diag(lu))
                    if dmag.min() <= 1e-13 * dmag.max():
                        raise SingularMode((i1, i2), f"(variant={variant}, alpha={alpha})")
                    lus.append((lu, piv))
            self._cache[key] = lus
        return self._cache[key]

    # ------------------------------------------------------------------
    # solving
    # ------------------------------------------------------------------

    def _check_dirichlet_compat(self, rhs: StokesRhs) -> None:
        grid = self.grid
        vol_h = grid.volume_integral(rhs.h)
        flux = grid.surface_integral(rhs.bc_top[2])
        imbalance = abs(vol_h - flux)
        if imbalance > COMPAT_TOL:
            raise CompatibilityViolated(
                f"dirichlet data imbalance |int h - int phi3| = {imbalance:.3e} > {COMPAT_TOL}")

    def solve(self, rhs: StokesRhs, alpha: float = 0.0) -> tuple[VolumeField, VolumeField]:
        """Solve the flat problem; returns (u, p) as volume fields."""
        grid = self.grid
        nz = grid.nz
        if rhs.variant == DIRICHLET:
            self._check_dirichlet_compat(rhs)
        lus = self.factorization(rhs.variant, alpha)

        fm = grid.to_modes(rhs.f)          # (n1, n2, nz, 3)
        hm = grid.to_modes(rhs.h)          # (n1, n2, nz)
        bm = np.fft.fft2(rhs.bc_top, axes=(1, 2)) / (grid.n1 * grid.n2)  # (3, n1, n2)

        um = np.empty((grid.n1, grid.n2, nz, 3), dtype=np.complex128)
        pm = np.empty((grid.n1, grid.n2, nz), dtype=np.complex128)
        vec = np.empty(4 * nz, dtype=np.complex128)
        idx = 0
        for i1 in range(grid.n1):
            for i2 in range(grid.n2):
                for c in range(3):
                    blk = vec[c * nz:(c + 1) * nz]
                    blk[:] = fm[i1, i2, :, c]
                    blk[0] = bm[c, i1, i2]
                    blk[-1] = 0.0
                vec[3 * nz:4 * nz - 1] = hm[i1, i2, :nz - 1]
                vec[4 * nz - 1] = fm[i1, i2, nz - 1, 2]
                if rhs.variant == DIRICHLET and grid.kx1[i1] == 0.0 and grid.kx2[i2] == 0.0:
                    vec[2 * nz] = hm[i1, i2, 0]  # divergence row moved to the u3 slot
                    vec[3 * nz] = 0.0            # gauge row
                sol = lu_solve(lus[idx], vec, check_finite=False)
                um[i1, i2, :, 0] = sol[0:nz]
                um[i1, i2, :, 1] = sol[nz:2 * nz]
                um[i1, i2, :, 2] = sol[2 * nz:3 * nz]
                pm[i1, i2, :] = sol[3 * nz:4 * nz]
                idx += 1
        u = grid.to_values(um)
        u[:, :, -1, :] = 0.0  # bottom row is pinned by the boundary rows; make it exact
        return VolumeField(grid, u), VolumeField(grid, grid.to_values(pm))


def solve_flat_stokes(rhs: StokesRhs, alpha: float = 0.0,
                      solver: FlatStokesSolver | None = None) -> tuple[VolumeField, VolumeField]:
    """Convenience wrapper; builds (or reuses) a cached solver for rhs.grid."""
    solver = solver or FlatStokesSolver(rhs.grid)
    return solver.solve(rhs, alpha=alpha)


def flat_residuals(u, p, rhs: StokesRhs, alpha: float = 0.0) -> dict:
    """Relative residuals of all equations and boundary rows of the flat problem."""
    grid = rhs.grid
    uv = u.values if isinstance(u, VolumeField) else u
    pv = p.values if isinstance(p, VolumeField) else p
    scale = max(1.0, np.abs(uv).max(), np.abs(pv).max())
    mom = alpha * uv - ops.lap_flat(uv, grid) + ops.grad_flat(pv, grid) - rhs.f
    div = ops.div_flat(uv, grid) - rhs.h
    out = {
        "momentum": float(np.abs(mom[:, :, 1:-1]).max()) / scale,
        "divergence": float(np.abs(div[:, :, :-1]).max()) / scale,
        "bottom": float(np.abs(uv[:, :, -1]).max()) / scale,
        "momentum_bottom": float(np.abs(mom[:, :, -1, 2]).max()) / scale,
    }
    if rhs.variant == FREE_STRESS:
        top = ops.stress_normal_top_flat(pv, uv, grid) - rhs.bc_top
    else:
        top = np.moveaxis(uv[:, :, 0, :], 2, 0) - rhs.bc_top
    out["top"] = float(np.abs(top).max()) / scale
    return out


# ======================================================================
# flat Poisson (mixed boundary rows)
# ======================================================================


class FlatPoissonSolver:
    """Cached per-mode LU solver for  Lap p = f1,  p(top) = f2,  -d3 p(bottom) = f3."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._lus: list | None = None

    def _factorization(self) -> list:
        if self._lus is None:
            grid = self.grid
            nz = grid.nz
            D1, D2 = grid.dz_mats[1], grid.dz_mats[2]
            lus = []
            for i1 in range(grid.n1):
                for i2 in range(grid.n2):
                    ksq = grid.kx1[i1] ** 2 + grid.kx2[i2] ** 2
                    mat = np.zeros((nz, nz), dtype=np.complex128)
                    mat[1:-1] = (D2 - ksq * np.eye(nz))[1:-1]
                    mat[0, 0] = 1.0
                    mat[-1] = -D1[-1]
                    lu, piv = lu_factor(mat, check_finite=False)
                    dmag = np.abs(np.diag(lu))
                    if dmag.min() <= 1e-13 * dmag.max():
                        raise SingularMode((i1, i2), "(poisson)")
                    lus.append((lu, piv))
            self._lus = lus
        return self._lus

    def solve(self, f1: np.ndarray, f2: np.ndarray, f3: np.ndarray) -> VolumeField:
        grid = self.grid
        nz = grid.nz
        lus = self._factorization()
        f1m = grid.to_modes(f1)
        f2m = grid.to_modes(f2)
        f3m = grid.to_modes(f3)
        pm = np.empty((grid.n1, grid.n2, nz), dtype=np.complex128)
        vec = np.empty(nz, dtype=np.complex128)
        idx = 0
        for i1 in range(grid.n1):
            for i2 in range(grid.n2):
                vec[:] = f1m[i1, i2]
                vec[0] = f2m[i1, i2]
                vec[-1] = f3m[i1, i2]
                pm[i1, i2] = lu_solve(lus[idx], vec, check_finite=False)
                idx += 1
        return VolumeField(grid, grid.to_values(pm))


# ======================================================================
# transformed-geometry solves (Picard around the flat solver)
# ======================================================================


def _delta(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.abs(new - old).max())


def solve_A_stokes(rhs: StokesRhs, geom: GeometryState, tol: float = PICARD_TOL,
                   max_iter: int = PICARD_MAX_ITER,
                   solver: FlatStokesSolver | None = None,
                   info: dict | None = None) -> tuple[VolumeField, VolumeField]:
    """Solve  -Lap_A u + grad_A p = F1,  div_A u = F2,  S_A(p,u) N = F3 (top),
    u = 0 (bottom)  by Picard iteration as a perturbation of the flat problem.

    rhs carries (F1, F2, F3) in (f, h, bc_top); only the free_stress variant is
    defined for the transformed problem.  When an `info` dict is passed, the
    number of iterations used is stored under "iterations".
    """
    if rhs.variant != FREE_STRESS:
        raise ValueError("transformed-geometry solve is defined for the free_stress variant")
    grid = rhs.grid
    solver = solver or FlatStokesSolver(grid)
    u = np.zeros((grid.n1, grid.n2, grid.nz, 3))
    p = np.zeros((grid.n1, grid.n2, grid.nz))
    delta = np.inf
    for it in range(max_iter):
        # feed fully filtered iterates into the perturbation terms: out-of-band
        # horizontal modes would otherwise see the flat operator unopposed
        # (the transformed operators truncate them), and grid-scale x3
        # oscillations must not recycle through the feedback loop
        uf = grid.dealias(grid.dealias_z(u))
        pf = grid.dealias(grid.dealias_z(p))
        f_eff = rhs.f + (ops.lap_A(uf, geom) - ops.lap_flat(uf, grid)) \
            - (ops.grad_A(pf, geom) - ops.grad_flat(pf, grid))
        h_eff = rhs.h - (ops.div_A(uf, geom) - ops.div_flat(uf, grid))
        psi_eff = rhs.bc_top - (ops.stress_normal_top(pf, uf, geom)
                                - ops.stress_normal_top_flat(pf, uf, grid))
        un, pn = solver.solve(StokesRhs(grid, f=f_eff, h=h_eff, bc_top=psi_eff), alpha=0.0)
        delta = max(_delta(un.values, u), _delta(pn.values, p))
        u, p = un.values, pn.values
        if delta <= tol * max(1.0, np.abs(u).max(), np.abs(p).max()):
            if info is not None:
                info["iterations"] = it + 1
            return VolumeField(grid, u), VolumeField(grid, p)
    raise NoConvergence(max_iter, delta)


def solve_A_poisson(rhs: PoissonRhs, geom: GeometryState, tol: float = PICARD_TOL,
                    max_iter: int = PICARD_MAX_ITER,
                    solver: FlatPoissonSolver | None = None,
                    bottom_flux: str = "transformed") -> VolumeField:
    """Solve  Lap_A p = f1,  p = f2 (top),  (grad_A p) . nu = f3 (bottom) by
    Picard iteration; with divergence-form data (g0, Gvec) the interior
    equation is div_A(grad_A p + Gvec) = g0 and the flux datum applies to
    grad_A p + Gvec.  With bottom_flux="flat" the flux row reads the plain
    gradient instead:  (grad p [+ Gvec]) . nu = f3.
    """
    if bottom_flux not in ("transformed", "flat"):
        raise ValueError(f"unknown bottom_flux {bottom_flux!r}")
    grid = rhs.grid
    solver = solver or FlatPoissonSolver(grid)
    if rhs.g0 is not None:
        f1 = rhs.g0 - ops.div_A(rhs.Gvec, geom)
        f3 = rhs.f3 + rhs.Gvec[:, :, -1, 2]  # Gvec . nu at the bottom, nu = (0, 0, -1)
    else:
        f1 = rhs.f1
        f3 = rhs.f3
    p = np.zeros((grid.n1, grid.n2, grid.nz))
    delta = np.inf
    for _ in range(max_iter):
        pf = grid.dealias(grid.dealias_z(p))
        interior = f1 - (ops.lap_A(pf, geom) - ops.lap_flat(pf, grid))
        if bottom_flux == "transformed":
            flux_A = -ops.grad_A(pf, geom)[:, :, -1, 2]
            flux_flat = -grid.dz(pf)[:, :, -1]
            bottom = f3 - (flux_A - flux_flat)
        else:
            bottom = f3
        pn = solver.solve(interior, rhs.f2, bottom).values
        delta = _delta(pn, p)
        p = pn
        if delta <= tol * max(1.0, np.abs(p).max()):
            return VolumeField(grid, p)
    raise NoConvergence(max_iter, delta)
