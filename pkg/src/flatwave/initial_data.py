"""Construction and repair of compatible starting data.

A starting pair (eta0, u0) is admissible when

  * u0 vanishes on the bottom,
  * u0 is divergence-free in the transformed sense (div_A u0 = 0),
  * the tangential part of the top stress balances:
    Pi0 (F3(0) + D_A(u0) N0) = 0, with Pi0 the pointwise projection onto the
    tangent plane of the initial surface.

prepare_initial_data repairs raw data by cycling three contractive fixes
(bottom-trace removal, tangential stress correction through a free-stress
solve, transformed-divergence projection) until every residual is below its
threshold, then attaches the consistent initial pressure.  Each fix is
skipped when its residual is already below threshold, so prepared data passes
through unchanged and the repair is exactly idempotent.

The initial pressure solves the divergence-form problem

    div_A(grad_A p - F1(0)) = -div_A(R0 u0),
    p = (F3(0) + D_A(u0) N0) . N0 / |N0|^2          on top,
    (grad p - F1(0)) . nu = (Lap_A u0) . nu         on bottom,

and the initial velocity rate follows from the momentum equation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (GeometryState, SurfaceField, VolumeField, build_geometry)
from .grid import Grid
from .elliptic import (FlatPoissonSolver, FlatStokesSolver, NoConvergence,
                       PoissonRhs, StokesRhs, solve_A_poisson)
from .dynamics import FluidState, forcing_F
from . import operators as ops

THR_TANGENTIAL = 1e-8
THR_DIVERGENCE = 1e-10
THR_BOTTOM = 1e-8
MAX_REPAIR_PASSES = 8


# ======================================================================
# projections
# ======================================================================


def project_tangent(v: np.ndarray, eta: SurfaceField) -> np.ndarray:
    """Pointwise projection of a (3, n1, n2) surface vector onto the tangent
    plane of eta:  v - (v . N) N / |N|^2."""
    grid = eta.grid
    N = np.empty((3, grid.n1, grid.n2))
    N[0] = -grid.dx1(eta.values)
    N[1] = -grid.dx2(eta.values)
    N[2] = 1.0
    vn = np.einsum("i...,i...->...", v, N)
    nsq = np.einsum("i...,i...->...", N, N)
    return v - (vn / nsq)[None] * N


def project_divA_free(u: np.ndarray, geom: GeometryState,
                      poisson_solver: FlatPoissonSolver | None = None) -> np.ndarray:
    """Remove the transformed divergence of u by a potential correction.

    Solves Lap_A phi = div_A u with phi = 0 on top and zero transformed flux on
    the bottom, then subtracts grad_A phi.  The potential solve runs at a
    tolerance well below the admissibility threshold (derivative rows amplify
    the iteration error by a few orders), and the sweep is repeated on the
    remainder if the residual still sits above the threshold.  The
    bottom-normal velocity is preserved; a small tangential bottom trace may
    appear and is handled by the repair cycle.
    """
    grid = geom.grid
    out = u
    floor = 0.5 * THR_DIVERGENCE * max(1.0, float(np.abs(u).max()))
    for _ in range(3):
        div = ops.div_A(out, geom)
        if float(np.abs(div).max()) <= floor:
            break
        phi = solve_A_poisson(PoissonRhs(grid, f1=div), geom, tol=1e-13,
                              solver=poisson_solver)
        out = out - ops.grad_A(phi.values, geom)
    return out


# ======================================================================
# compatibility report
# ======================================================================


@dataclass(frozen=True)
class CompatibilityReport:
    """Residuals of the three admissibility conditions and their thresholds."""

    tangential_residual: float
    div_residual: float
    bottom_residual: float

    thresholds = (THR_TANGENTIAL, THR_DIVERGENCE, THR_BOTTOM)

    @property
    def tangential_ok(self) -> bool:
        return self.tangential_residual <= THR_TANGENTIAL

    @property
    def divergence_ok(self) -> bool:
        return self.div_residual <= THR_DIVERGENCE

    @property
    def bottom_ok(self) -> bool:
        return self.bottom_residual <= THR_BOTTOM

    @property
    def ok(self) -> bool:
        return self.tangential_ok and self.divergence_ok and self.bottom_ok

    @property
    def verdict(self) -> str:
        return "pass" if self.ok else "fail"

    def __str__(self) -> str:
        def mark(v, thr):
            return f"{v:.3e} ({'ok' if v <= thr else 'VIOLATED'}, tol {thr:g})"
        return ("compatibility " + self.verdict
                + ": tangential " + mark(self.tangential_residual, THR_TANGENTIAL)
                + ", divergence " + mark(self.div_residual, THR_DIVERGENCE)
                + ", bottom " + mark(self.bottom_residual, THR_BOTTOM))


def tangential_defect(eta: SurfaceField, u: np.ndarray, sigma: float,
                      geom: GeometryState) -> np.ndarray:
    """Pi0 (F3(0) + D_A(u) N) as a (3, n1, n2) tangent field."""
    grid = eta.grid
    coeff = eta.values - sigma * geom.H.values
    f3 = coeff[None] * geom.N
    # D_A(u) N on the top row: stress with p = 0 gives -(D_A u) N
    dn = -ops.stress_normal_top(np.zeros((grid.n1, grid.n2, grid.nz)), u, geom)
    return project_tangent(f3 + dn, eta)


def check_compatibility(u, eta0: SurfaceField, sigma: float = 1.0,
                        geom: GeometryState | None = None) -> CompatibilityReport:
    """Measure the three admissibility residuals for (u, eta0)."""
    uv = u.values if isinstance(u, VolumeField) else np.asarray(u)
    geom = geom if geom is not None else build_geometry(eta0)
    tang = float(np.abs(tangential_defect(eta0, uv, sigma, geom)).max())
    div = float(np.abs(ops.div_A(uv, geom)).max())
    bottom = float(np.abs(uv[:, :, -1, :]).max())
    return CompatibilityReport(tangential_residual=tang, div_residual=div,
                               bottom_residual=bottom)


# ======================================================================
# repair cycle
# ======================================================================


def _chi(grid: Grid) -> np.ndarray:
    """Extension profile: chi(0) = 0, chi(-b) = 1, chi'(0) = chi'(-b) = 0."""
    return np.sin(np.pi * grid.z / (2.0 * grid.b)) ** 2


def _strip_bottom_normal(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Remove the normal (vertical) bottom trace with a smooth extension."""
    out = u.copy()
    out[..., 2] -= _chi(grid)[None, None, :] * u[:, :, -1:, 2]
    return out


def _strip_bottom_tangential(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Remove the horizontal bottom trace with an exactly divergence-free
    extension: v = (chi w1, chi w2, -X (d1 w1 + d2 w2)) with X' = chi and
    X(-b) = 0, so div v = 0 and the bottom-normal trace is untouched."""
    chi = _chi(grid)
    X = (grid.z + grid.b) / 2.0 - (grid.b / (2.0 * np.pi)) * np.sin(np.pi * grid.z / grid.b)
    w1 = u[:, :, -1, 0]
    w2 = u[:, :, -1, 1]
    S = grid.dx1(w1) + grid.dx2(w2)
    out = u.copy()
    out[..., 0] -= chi[None, None, :] * w1[:, :, None]
    out[..., 1] -= chi[None, None, :] * w2[:, :, None]
    out[..., 2] += X[None, None, :] * S[:, :, None]
    return out


def _fix_tangential(u: np.ndarray, eta: SurfaceField, sigma: float,
                    geom: GeometryState, stokes: FlatStokesSolver) -> np.ndarray:
    """Cancel the tangential stress defect with a free-stress correction flow."""
    grid = eta.grid
    d = tangential_defect(eta, u, sigma, geom)
    bc = np.zeros((3, grid.n1, grid.n2))
    bc[0] = d[0]
    bc[1] = d[1]
    w, _ = stokes.solve(StokesRhs(grid, bc_top=bc))
    return u + w.values


def prepare_initial_data(eta0: SurfaceField, u0, sigma: float = 1.0,
                         max_passes: int = MAX_REPAIR_PASSES) -> FluidState:
    """Repair (eta0, u0) into an admissible state with consistent pressure.

    Applies only the fixes whose residuals exceed their thresholds, cycling up
    to max_passes times (each full cycle contracts the residuals by the size
    of the surface).  Raises NoConvergence if the cycle fails to settle.
    Returns the t = 0 state carrying the repaired velocity, the initial
    pressure, and geometry with the initial surface velocity attached.
    """
    grid = eta0.grid
    uv = (u0.values if isinstance(u0, VolumeField) else np.asarray(u0, dtype=np.float64)).copy()
    geom = build_geometry(eta0)
    stokes = FlatStokesSolver(grid)
    poisson = FlatPoissonSolver(grid)

    report = check_compatibility(uv, eta0, sigma, geom)
    for _ in range(max_passes):
        if report.ok:
            break
        # ordered so each fix pollutes the later residuals only at O(eta):
        # normal strip, then the divergence projection (whose bottom leak is
        # purely tangential), then the divergence-free tangential strip, and
        # the stress correction last (it keeps the bottom trace at zero)
        if np.abs(uv[:, :, -1, 2]).max() > THR_BOTTOM:
            uv = _strip_bottom_normal(uv, grid)
        if float(np.abs(ops.div_A(uv, geom)).max()) > THR_DIVERGENCE:
            uv = project_divA_free(uv, geom, poisson_solver=poisson)
        if np.abs(uv[:, :, -1, :2]).max() > THR_BOTTOM:
            uv = _strip_bottom_tangential(uv, grid)
        if float(np.abs(tangential_defect(eta0, uv, sigma, geom)).max()) > THR_TANGENTIAL:
            uv = _fix_tangential(uv, eta0, sigma, geom, stokes)
        report = check_compatibility(uv, eta0, sigma, geom)
    if not report.ok:
        raise NoConvergence(max_passes, max(report.tangential_residual,
                                            report.div_residual,
                                            report.bottom_residual),
                            detail=str(report))

    u = VolumeField(grid, uv)
    eta_t0 = SurfaceField(grid, ops.u_dot_N(uv, eta0, grid))
    geom = geom.with_eta_t(eta_t0)
    p0 = initial_pressure(u, eta0, sigma, geom=geom)
    return FluidState(grid, 0.0, eta0, u, p0, geom=geom)


# ======================================================================
# initial pressure and acceleration
# ======================================================================


def _geometry_with_surface_velocity(eta0: SurfaceField, uv: np.ndarray) -> GeometryState:
    grid = eta0.grid
    geom = build_geometry(eta0)
    eta_t0 = SurfaceField(grid, ops.u_dot_N(uv, eta0, grid))
    return geom.with_eta_t(eta_t0)


def initial_pressure(u0, eta0: SurfaceField, sigma: float = 1.0,
                     geom: GeometryState | None = None) -> VolumeField:
    """Pressure consistent with the momentum equation at t = 0.

    Solves the divergence-form problem  div_A(grad_A p - F1(0)) = -div_A(R0 u0)
    with Dirichlet value (F3(0) + D_A(u0) N0) . N0 / |N0|^2 on top and flux
    datum (grad p - F1(0)) . nu = (Lap_A u0) . nu on the bottom (plain gradient
    in the wall flux).
    """
    grid = eta0.grid
    uv = u0.values if isinstance(u0, VolumeField) else np.asarray(u0)
    if geom is None or geom.R is None:
        geom = _geometry_with_surface_velocity(eta0, uv)

    state0 = FluidState(grid, 0.0, eta0, VolumeField(grid, uv),
                        VolumeField.zero(grid), geom=geom)
    f1, f3, _ = forcing_F(state0, sigma)
    Ru = _apply_R(geom, uv)

    # top row: p = (F3 + D_A(u0) N0) . N0 / |N0|^2
    dn = -ops.stress_normal_top(np.zeros((grid.n1, grid.n2, grid.nz)), uv, geom)
    N = geom.N
    num = np.einsum("i...,i...->...", f3 + dn, N)
    nsq = np.einsum("i...,i...->...", N, N)
    f2 = num / nsq

    # bottom row: (grad p - F1) . nu = (Lap_A u0) . nu,  nu = -e3
    lap_u = ops.lap_A(uv, geom)
    f3_flux = -lap_u[:, :, -1, 2]
    rhs = PoissonRhs(grid, f2=f2, f3=f3_flux,
                     g0=-ops.div_A(Ru, geom), Gvec=-f1)
    return solve_A_poisson(rhs, geom, bottom_flux="flat")


def _apply_R(geom: GeometryState, uv: np.ndarray) -> np.ndarray:
    if geom.R is None:
        return np.zeros_like(uv)
    return np.einsum("ij...,...j->...i", geom.R, uv)


def initial_accel(u0, p0: VolumeField, eta0: SurfaceField,
                  geom: GeometryState | None = None) -> VolumeField:
    """Material velocity rate at t = 0 from the momentum equation:

        D_t u(0) = Lap_A u0 - grad_A p(0) + F1(0) - R0 u0,

    so the plain time derivative is  d_t u(0) = D_t u(0) + R0 u0.  F1 does not
    depend on the capillary coefficient, so none is needed here."""
    grid = eta0.grid
    uv = u0.values if isinstance(u0, VolumeField) else np.asarray(u0)
    if geom is None or geom.R is None:
        geom = _geometry_with_surface_velocity(eta0, uv)
    state0 = FluidState(grid, 0.0, eta0, VolumeField(grid, uv), p0, geom=geom)
    f1, _, _ = forcing_F(state0, 0.0)
    accel = (ops.lap_A(uv, geom) - ops.grad_A(p0.values, geom) + f1
             - _apply_R(geom, uv))
    return VolumeField(grid, accel)
