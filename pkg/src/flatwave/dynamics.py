"""Time integration of the coupled surface/velocity system.

The evolution advances (eta, u, p) with backward-Euler steps of the momentum
equation written as a flat Stokes problem plus geometry forcings evaluated at
the previous iterate:

    u+/dt - Lap u+ + grad p+ = G1 + u/dt          in the slab,
    div u+ = G2                                    in the slab,
    (p+ I - D(u+)) e3 = (eta+ - sigma Lap* eta+) e3 + G3   on top,
    u+ = 0                                         on bottom,
    eta+ advanced by  d_t eta = kappa Lap* eta + kappa Psi + u . N + kappa-free G4 terms.

Two couplings of the surface update are provided.  "split" advances eta first
(implicit horizontal diffusion, explicit flux with the old velocity), rebuilds
the geometry, then performs one flat solve.  "coupled" appends the new surface
modes to the per-mode systems so the stress row sees the implicit surface.

The regularized surface equation carries a compensator source Psi chosen so
that the initial surface data needs no extra compatibility beyond the
unregularized problem; it decays exponentially on the configured time scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_solve

from .geometry import (GeometryState, NumericsError, SurfaceField, VolumeField,
                       build_geometry, identity_geometry)
from .grid import Grid
from .elliptic import FREE_STRESS, FlatStokesSolver, StokesRhs
from . import operators as ops

DIV_REJECT_TOL = 1e-6
DEFAULT_STRIDE = 25

MODE_SPLIT = "split"
MODE_COUPLED = "coupled"


class StepRejected(NumericsError):
    """A completed step failed its divergence-consistency tripwire."""


# ======================================================================
# configuration and state
# ======================================================================


@dataclass(frozen=True)
class SchemeConfig:
    """Time-stepping parameters.

    dt : time step.
    sigma : capillary coefficient (>= 0).
    kappa : surface regularization strength (>= 0).
    mode : "split" or "coupled" surface update.
    tau : decay time of the compensator source.
    linearized : drop all geometry forcings and freeze the flat geometry;
        the surface still evolves through the linear rows.
    """

    dt: float
    sigma: float = 1.0
    kappa: float = 0.0
    mode: str = MODE_SPLIT
    tau: float = 1.0
    linearized: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.sigma < 0 or self.kappa < 0:
            raise ValueError("sigma and kappa must be nonnegative")
        if self.mode not in (MODE_SPLIT, MODE_COUPLED):
            raise ValueError(f"mode must be '{MODE_SPLIT}' or '{MODE_COUPLED}'")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


class FluidState:
    """Simulation state at one time: surface, velocity, pressure, geometry."""

    def __init__(self, grid: Grid, t: float, eta: SurfaceField, u: VolumeField,
                 p: VolumeField, geom: GeometryState | None = None):
        self.grid = grid
        self.t = float(t)
        self.eta = eta
        self.u = u
        self.p = p
        self.geom = geom if geom is not None else build_geometry(eta)

    @classmethod
    def quiescent(cls, grid: Grid, eta: SurfaceField | None = None) -> "FluidState":
        eta = eta if eta is not None else SurfaceField.zero(grid)
        return cls(grid, 0.0, eta, VolumeField.zero(grid, vector=True),
                   VolumeField.zero(grid))


class Compensator:
    """Decaying surface source  Psi(t) = -(Lap* eta0) exp(-t / tau).

    At t = 0 it cancels the regularizing diffusion exactly, so switching the
    regularization on does not change the initial surface velocity.
    """

    def __init__(self, eta0: SurfaceField, tau: float = 1.0):
        self.grid = eta0.grid
        self.tau = float(tau)
        self.base = -ops.lap_star(eta0.values, eta0.grid)

    def __call__(self, t: float) -> np.ndarray:
        return self.base * np.exp(-t / self.tau)

    @classmethod
    def zero(cls, grid: Grid) -> "Compensator":
        return cls(SurfaceField.zero(grid), 1.0)


# ======================================================================
# forcings
# ======================================================================


def forcing_G(state: FluidState, sigma: float) -> tuple:
    """Geometry forcings (G1, G2, G3, G4) of the flat-form system.

    G1 : (n1, n2, nz, 3) momentum forcing,
    G2 : (n1, n2, nz) divergence data,
    G3 : (3, n1, n2) top stress data,
    G4 : (n1, n2) horizontal surface-flux correction (u . N minus u3).

    All products are dealiased.  The geometry of `state` must carry eta_t
    (needed for the mesh-velocity term); a missing eta_t contributes zero.
    """
    grid = state.grid
    geom = state.geom
    u = state.u.values
    p = state.p.values
    eta = state.eta

    du1 = grid.dx1(u)
    du2 = grid.dx2(u)
    du3 = grid.dz(u)

    # --- G1 -----------------------------------------------------------
    if geom.eta_bar_t is not None:
        mesh = geom.eta_bar_t * geom.b_tilde * geom.K
        g1 = grid.dealias(mesh[..., None] * du3)
    else:
        g1 = np.zeros_like(u)
    g1 -= ops.advect_A(u, geom)

    # second-derivative contraction (Acal^T Acal - I)_{kl} d_k d_l u
    C = np.einsum("jk...,jl...->kl...", geom.Acal, geom.Acal)
    C[0, 0] -= 1.0
    C[1, 1] -= 1.0
    C[2, 2] -= 1.0
    hess = {
        (0, 0): grid.dx1(du1), (0, 1): grid.dx2(du1), (0, 2): grid.dz(du1),
        (1, 1): grid.dx2(du2), (1, 2): grid.dz(du2), (2, 2): grid.dz(du3),
    }
    acc = np.zeros_like(u)
    for (k, l), d in hess.items():
        w = C[k, l][..., None] * d
        acc += w if k == l else 2.0 * w
    g1 += grid.dealias(acc)

    # first-derivative contraction Acal_{jk} (d_k Acal_{jl}) d_l u; only the
    # third column of Acal varies, so the contraction reduces to a scalar
    # coefficient on d3 u
    AK = geom.Acal[0, 2]   # -A K
    BK = geom.Acal[1, 2]   # -B K
    K = geom.K
    coeff = (grid.dx1(AK) + AK * grid.dz(AK)
             + grid.dx2(BK) + BK * grid.dz(BK)
             + K * grid.dz(K))
    g1 += grid.dealias(coeff[..., None] * du3)

    # pressure-gradient mismatch -(Acal - I) grad p
    g1 -= ops.grad_A(p, geom) - ops.grad_flat(p, grid)

    # --- G2 -----------------------------------------------------------
    g2 = forcing_G2(state.u, geom)

    # --- G3 -----------------------------------------------------------
    g3 = _forcing_G3(eta, u, p, geom, sigma, du1, du2, du3)

    # --- G4 -----------------------------------------------------------
    g4 = _forcing_G4(eta, u)

    return g1, g2, g3, g4


def forcing_G2(u: VolumeField, geom: GeometryState) -> np.ndarray:
    """Divergence data G2 = -(Acal - I)_{ij} d_j u_i for the given geometry."""
    vals = u.values if isinstance(u, VolumeField) else u
    return ops.div_flat(vals, geom.grid) - ops.div_A(vals, geom)


def _forcing_G3(eta: SurfaceField, u, p, geom: GeometryState, sigma: float,
                du1, du2, du3) -> np.ndarray:
    grid = eta.grid
    e1 = grid.dx1(eta.values)
    e2 = grid.dx2(eta.values)
    pt = p[:, :, 0]
    t1, t2, t3 = du1[:, :, 0, :], du2[:, :, 0, :], du3[:, :, 0, :]
    AKt = geom.A[:, :, 0] * geom.K[:, :, 0]
    BKt = geom.B[:, :, 0] * geom.K[:, :, 0]
    Kt = geom.K[:, :, 0]

    shear = -t2[:, :, 0] - t1[:, :, 1] + BKt * t3[:, :, 0] + AKt * t3[:, :, 1]
    v1 = np.stack([
        pt - eta.values - 2.0 * (t1[:, :, 0] - AKt * t3[:, :, 0]),
        shear,
        -t1[:, :, 2] - Kt * t3[:, :, 0] + AKt * t3[:, :, 2],
    ])
    v2 = np.stack([
        shear,
        pt - eta.values - 2.0 * (t2[:, :, 1] - BKt * t3[:, :, 1]),
        -t2[:, :, 2] - Kt * t3[:, :, 1] + BKt * t3[:, :, 2],
    ])
    v3 = np.stack([
        (Kt - 1.0) * t3[:, :, 0] + AKt * t3[:, :, 2],
        (Kt - 1.0) * t3[:, :, 1] + BKt * t3[:, :, 2],
        2.0 * (Kt - 1.0) * t3[:, :, 2],
    ])
    g3 = e1[None] * v1 + e2[None] * v2 + v3

    if sigma != 0.0:
        q = 1.0 / np.sqrt(1.0 + e1 * e1 + e2 * e2)
        f1 = grid.dealias((q - 1.0) * e1)
        f2 = grid.dealias((q - 1.0) * e2)
        s = grid.dx1(f1) + grid.dx2(f2)
        g3 = g3 - sigma * s[None] * geom.N

    return np.stack([grid.dealias(g3[i]) for i in range(3)])


def _forcing_G4(eta: SurfaceField, u) -> np.ndarray:
    grid = eta.grid
    top = u[:, :, 0, :]
    out = -top[:, :, 0] * grid.dx1(eta.values) - top[:, :, 1] * grid.dx2(eta.values)
    return grid.dealias(out)


def forcing_F(state: FluidState, sigma: float) -> tuple:
    """Self-contained forcings (F1, F3, F4) of the transformed system.

    F1 : (n1, n2, nz, 3) mesh-velocity and advection terms,
    F3 : (3, n1, n2) top stress data  eta N - sigma H N,
    F4 : (n1, n2) surface flux  u . N.
    """
    grid = state.grid
    geom = state.geom
    u = state.u.values

    if geom.eta_bar_t is not None:
        mesh = geom.eta_bar_t * geom.b_tilde * geom.K
        f1 = grid.dealias(mesh[..., None] * grid.dz(u))
    else:
        f1 = np.zeros_like(u)
    f1 -= ops.advect_A(u, geom)

    coeff = state.eta.values - sigma * geom.H.values
    f3 = np.stack([grid.dealias(coeff * geom.N[i]) for i in range(3)])

    f4 = ops.u_dot_N(u, state.eta, grid)
    return f1, f3, f4


def kinematic_rhs(state: FluidState, kappa: float, psi: np.ndarray) -> np.ndarray:
    """Instantaneous surface velocity  kappa Lap* eta + kappa Psi + u . N."""
    grid = state.grid
    out = ops.u_dot_N(state.u.values, state.eta, grid)
    if kappa != 0.0:
        out = out + kappa * (ops.lap_star(state.eta.values, grid) + psi)
    return out


# ======================================================================
# stepping
# ======================================================================


class Stepper:
    """Advances a FluidState by one backward-Euler step.

    Holds the per-mode solver whose LU factorizations are cached across steps;
    reuse one Stepper for a whole run.
    """

    def __init__(self, grid: Grid, scheme: SchemeConfig, psi: Compensator | None = None):
        self.grid = grid
        self.scheme = scheme
        self.psi = psi if psi is not None else Compensator.zero(grid)
        self.solver = FlatStokesSolver(grid)
        self._ident = identity_geometry(grid) if scheme.linearized else None

    # ------------------------------------------------------------------

    def step(self, state: FluidState) -> FluidState:
        if self.scheme.mode == MODE_SPLIT:
            return self._step_split(state)
        return self._step_coupled(state)

    # ------------------------------------------------------------------

    def _advance_eta(self, state: FluidState) -> SurfaceField:
        """Implicit-diffusion surface update using the current velocity flux."""
        grid = self.grid
        cfg = self.scheme
        kin = ops.u_dot_N(state.u.values, state.eta, grid)
        src_modes = grid.to_modes(kin + cfg.kappa * self.psi(state.t))
        # pin the horizontal mean: the continuous flux has zero mean (the fluid
        # volume is conserved), so the discrete mean increment is pure error
        src_modes[0, 0] = 0.0
        ksq = grid.kx1[:, None] ** 2 + grid.kx2[None, :] ** 2
        eta_modes = (state.eta.modes + cfg.dt * src_modes) / (1.0 + cfg.dt * cfg.kappa * ksq)
        return SurfaceField.from_modes(grid, eta_modes)

    def _step_split(self, state: FluidState) -> FluidState:
        grid = self.grid
        cfg = self.scheme
        alpha = 1.0 / cfg.dt

        eta_new = self._advance_eta(state)
        if cfg.linearized:
            g1 = np.zeros_like(state.u.values)
            g3 = np.zeros((3, grid.n1, grid.n2))
            h = np.zeros((grid.n1, grid.n2, grid.nz))
            geom_new = self._ident
        else:
            g1, _, g3, _ = forcing_G(state, cfg.sigma)
            geom_new = build_geometry(eta_new)
            h = forcing_G2(state.u, geom_new)

        stress = g3.copy()
        stress[2] += eta_new.values - cfg.sigma * ops.lap_star(eta_new.values, grid)
        f = g1 + alpha * state.u.values
        u_new, p_new = self.solver.solve(
            StokesRhs(grid, f=f, h=h, bc_top=stress, variant=FREE_STRESS), alpha=alpha)

        self._check_divergence(u_new.values, h, state.t + cfg.dt)
        return self._finalize(state, eta_new, u_new, p_new, geom_new)

    def _step_coupled(self, state: FluidState) -> FluidState:
        grid = self.grid
        cfg = self.scheme
        nz = grid.nz
        alpha = 1.0 / cfg.dt

        if cfg.linearized:
            g1 = np.zeros_like(state.u.values)
            g3 = np.zeros((3, grid.n1, grid.n2))
            h = np.zeros((grid.n1, grid.n2, grid.nz))
            g4 = np.zeros((grid.n1, grid.n2))
        else:
            g1, h, g3, g4 = forcing_G(state, cfg.sigma)

        f = g1 + alpha * state.u.values
        fm = grid.to_modes(f)
        hm = grid.to_modes(h)
        g3m = np.fft.fft2(g3, axes=(1, 2)) / (grid.n1 * grid.n2)
        surf_m = grid.to_modes(state.eta.values / cfg.dt
                               + cfg.kappa * self.psi(state.t) + g4)

        lus = self.solver.factorization(FREE_STRESS, alpha,
                                        coupled=(cfg.dt, cfg.sigma, cfg.kappa))
        um = np.empty((grid.n1, grid.n2, nz, 3), dtype=np.complex128)
        pm = np.empty((grid.n1, grid.n2, nz), dtype=np.complex128)
        em = np.empty((grid.n1, grid.n2), dtype=np.complex128)
        vec = np.empty(4 * nz + 1, dtype=np.complex128)
        idx = 0
        for i1 in range(grid.n1):
            for i2 in range(grid.n2):
                for c in range(3):
                    blk = vec[c * nz:(c + 1) * nz]
                    blk[:] = fm[i1, i2, :, c]
                    blk[0] = g3m[c, i1, i2]
                    blk[-1] = 0.0
                vec[3 * nz:4 * nz - 1] = hm[i1, i2, :nz - 1]
                vec[4 * nz - 1] = fm[i1, i2, nz - 1, 2]
                vec[4 * nz] = surf_m[i1, i2]
                sol = lu_solve(lus[idx], vec, check_finite=False)
                um[i1, i2, :, 0] = sol[0:nz]
                um[i1, i2, :, 1] = sol[nz:2 * nz]
                um[i1, i2, :, 2] = sol[2 * nz:3 * nz]
                pm[i1, i2, :] = sol[3 * nz:4 * nz]
                em[i1, i2] = sol[4 * nz]
                idx += 1
        uv = grid.to_values(um)
        uv[:, :, -1, :] = 0.0
        u_new = VolumeField(grid, uv)
        p_new = VolumeField(grid, grid.to_values(pm))
        eta_new = SurfaceField.from_modes(grid, em)
        geom_new = self._ident if cfg.linearized else build_geometry(eta_new)

        self._check_divergence(u_new.values, h, state.t + cfg.dt)
        return self._finalize(state, eta_new, u_new, p_new, geom_new)

    # ------------------------------------------------------------------

    def _check_divergence(self, u_vals: np.ndarray, h: np.ndarray, t: float) -> None:
        res = float(np.abs(ops.div_flat(u_vals, self.grid)[:, :, :-1]
                           - h[:, :, :-1]).max())
        if res > DIV_REJECT_TOL:
            raise StepRejected(f"divergence residual {res:.3e} > {DIV_REJECT_TOL} at t = {t:.6g}")

    def _finalize(self, old: FluidState, eta_new: SurfaceField, u_new: VolumeField,
                  p_new: VolumeField, geom_new: GeometryState) -> FluidState:
        cfg = self.scheme
        t_new = old.t + cfg.dt
        new = FluidState(self.grid, t_new, eta_new, u_new, p_new, geom=geom_new)
        if not cfg.linearized:
            eta_t = SurfaceField(self.grid, kinematic_rhs(new, cfg.kappa, self.psi(t_new)))
            new.geom = geom_new.with_eta_t(eta_t)
        return new


# ======================================================================
# simulation driver
# ======================================================================


class SimResult:
    """Output of simulate(): stride-sampled states and step count."""

    def __init__(self, times: list, states: list, steps: int):
        self.times = times
        self.states = states
        self.steps = steps


def simulate(state: FluidState, scheme: SchemeConfig, end_time: float,
             psi: Compensator | None = None, stride: int = DEFAULT_STRIDE,
             observer=None, keep_states: bool = True) -> SimResult:
    """Run the stepper from `state` to end_time.

    psi defaults to the compensator generated by the initial surface.  Every
    `stride` steps (and at the first and final step) the current state is
    passed to `observer(step_index, state)` and, when keep_states is true,
    recorded in the result.  Numerical failures propagate to the caller with
    the failure time in the message.
    """
    grid = state.grid
    if psi is None:
        psi = Compensator(state.eta, scheme.tau)
    stepper = Stepper(grid, scheme, psi)
    n_steps = int(round(end_time / scheme.dt))
    if abs(n_steps * scheme.dt - end_time) > 1e-9 * max(1.0, end_time):
        n_steps = int(np.ceil(end_time / scheme.dt - 1e-12))

    times, states = [], []

    def record(i, s):
        if observer is not None:
            observer(i, s)
        times.append(s.t)
        if keep_states:
            states.append(s)

    record(0, state)
    for i in range(1, n_steps + 1):
        try:
            state = stepper.step(state)
        except NumericsError as exc:
            raise type(exc)(f"{exc} [step {i}, t = {state.t + scheme.dt:.6g}]") from exc
        if i % stride == 0 or i == n_steps:
            record(i, state)
    return SimResult(times, states, n_steps)
