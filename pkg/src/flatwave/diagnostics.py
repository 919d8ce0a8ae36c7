"""Norms, energy functionals, recovered time derivatives, and balance checks.

Surface norms are Fourier-multiplier norms on the horizontal torus,

    surface_norm(f, s)^2 = sum_n (1 + |xi_n|^2)^s |f_hat(n)|^2 L1 L2,

exact for any real order s.  Volume norms are integer-order Sobolev norms on
the flat slab (sum of squared L2 norms of all derivatives up to the order,
horizontal derivatives spectral, vertical by the collocation matrices); orders
above VOLUME_ORDER_GUARD amplify collocation noise and are refused unless
explicitly overridden.

The energy and dissipation functionals are graded sums of squared norms of
(u, p, eta) and their first time derivatives.  The full analytic ladder would
need six time derivatives and thirteenth-order norms; the implemented
functionals clamp the volume orders at VOLUME_ORDER_GUARD and the temporal
order at jmax <= 1, and every report records the truncation parameters
(n, jmax, s_f) used.  Surface orders are not clamped (the multiplier norm is
exact at any order).  Time derivatives are recovered from the equations:
eta_t = u . N and u_t = Lap_A u - grad_A p + F1, with d_t p available only by
backward difference of stored history.

balance_residual measures the discrete defect of the quadratic balance

    d/dt [ 1/2 int_Omega J |u|^2 + 1/2 int_Sigma eta^2 + sigma |grad* eta|^2 ]
      + 1/2 int_Omega J |D_A u|^2
      = int_Omega J u . F1 - sigma int_Sigma (Lap* eta - H)(u . N)
        + kappa int_Sigma (eta - sigma Lap* eta)(Lap* eta + Psi),

with the time derivative replaced by the backward quotient of two consecutive
states and all right-side terms evaluated at the later one, matching the
implicit stepping; the defect is first order in the step size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GeometryState, SurfaceField, VolumeField, build_geometry
from .grid import Grid
from .dynamics import FluidState, forcing_F
from . import operators as ops

VOLUME_ORDER_GUARD = 4
DEFAULT_N = 2
DEFAULT_JMAX = 1
DEFAULT_S_F = 4.5


class OrderTooHigh(ValueError):
    """A volume norm order beyond the collocation guard was requested."""

    def __init__(self, order: int):
        super().__init__(
            f"volume norm order {order} exceeds the guard {VOLUME_ORDER_GUARD}; "
            "pass allow_high=True to override")
        self.order = order


class InsufficientHistory(ValueError):
    """A windowed diagnostic needs more consecutive states than supplied."""


# ======================================================================
# norms
# ======================================================================


def _dz_power(grid: Grid, g: np.ndarray, m: int) -> np.ndarray:
    """m-th vertical derivative, composing the prepared matrices beyond their
    range (only reachable with allow_high overrides)."""
    top = max(grid.dz_mats)
    while m > top:
        g = grid.dz(g, top)
        m -= top
    return grid.dz(g, m) if m else g


def surface_norm(f, s: float, grid: Grid | None = None) -> float:
    """Multiplier Sobolev norm of order s of a horizontal field.

    Accepts a SurfaceField or a raw (n1, n2) array plus its grid.  s may be
    any real number; s = 0 is the plain L2 norm.
    """
    if isinstance(f, SurfaceField):
        grid = f.grid
        vals = f.values
    else:
        if grid is None:
            raise ValueError("surface_norm needs a grid for raw arrays")
        vals = np.asarray(f)
    modes = grid.to_modes(vals)
    weight = (1.0 + grid.ksq) ** s
    total = np.sum(weight * np.abs(modes) ** 2) * grid.l1 * grid.l2
    return float(np.sqrt(total))


def volume_norm(f, k: int, allow_high: bool = False, grid: Grid | None = None) -> float:
    """Integer Sobolev norm of order k on the slab.

    Sums the squared L2 norms of every mixed derivative d1^a1 d2^a2 d3^a3 with
    a1 + a2 + a3 <= k over all components, then takes the square root.
    Horizontal derivatives are spectral, vertical ones use the collocation
    matrices, and the quadrature combines the vertical weights with the
    uniform horizontal cells.  Orders above VOLUME_ORDER_GUARD raise
    OrderTooHigh unless allow_high is set.
    """
    k = int(k)
    if k < 0:
        raise ValueError("volume norm order must be nonnegative")
    if k > VOLUME_ORDER_GUARD and not allow_high:
        raise OrderTooHigh(k)
    if isinstance(f, VolumeField):
        grid = f.grid
        vals = f.values
    else:
        if grid is None:
            raise ValueError("volume_norm needs a grid for raw arrays")
        vals = np.asarray(f)
    components = [vals[..., i] for i in range(vals.shape[-1])] if vals.ndim == 4 else [vals]

    total = 0.0
    for comp in components:
        modes = np.fft.fft2(comp, axes=(0, 1))
        for a1 in range(k + 1):
            for a2 in range(k + 1 - a1):
                mult = ((1j * grid.kx1[:, None]) ** a1
                        * (1j * grid.kx2[None, :]) ** a2)
                g = np.real(np.fft.ifft2(modes * mult[:, :, None], axes=(0, 1)))
                for a3 in range(k + 1 - a1 - a2):
                    dg = _dz_power(grid, g, a3)
                    total += grid.volume_integral(dg * dg)
    return float(np.sqrt(total))


# ======================================================================
# time-derivative recovery
# ======================================================================


@dataclass(frozen=True)
class TimeDerivatives:
    """Rates recovered from the equations (p_t only with history)."""

    u_t: VolumeField
    eta_t: SurfaceField
    p_t: VolumeField | None = None


def recover_time_derivatives(state: FluidState, sigma: float | None = None,
                             history=None) -> TimeDerivatives:
    """Recover (u_t, eta_t, p_t) at the state's time from the equations.

    eta_t = u . N from the kinematic row; u_t from the momentum row,
    u_t = Lap_A u - grad_A p + F1 with F1 the mesh-transport minus advection
    forcing.  p_t is a backward difference against the latest earlier state in
    `history` (a state or sequence of states) and None without one.  `sigma`
    is accepted for signature uniformity; none of the recovered rates involve
    the capillary coefficient.
    """
    grid = state.grid
    eta_t = SurfaceField(grid, ops.u_dot_N(state.u.values, state.eta, grid))

    geom = state.geom if state.geom is not None else build_geometry(state.eta)
    if geom.eta_bar_t is None:
        geom = geom.with_eta_t(eta_t)
    carrier = FluidState(grid, state.t, state.eta, state.u, state.p, geom=geom)
    f1, _, _ = forcing_F(carrier, 0.0)
    u_t = (ops.lap_A(state.u.values, geom)
           - ops.grad_A(state.p.values, geom) + f1)

    p_t = None
    if history is not None:
        earlier = [history] if isinstance(history, FluidState) else list(history)
        earlier = [s for s in earlier if s.t < state.t]
        if earlier:
            prev = max(earlier, key=lambda s: s.t)
            p_t = VolumeField(grid, (state.p.values - prev.p.values)
                              / (state.t - prev.t))
    return TimeDerivatives(VolumeField(grid, u_t), eta_t, p_t)


# ======================================================================
# energy and dissipation functionals
# ======================================================================


def _check_orders(n: int, jmax: int) -> None:
    if n < 1:
        raise ValueError("functional grade n must be >= 1")
    if not 0 <= jmax <= 1:
        raise ValueError("temporal order jmax must be 0 or 1 "
                         "(higher time derivatives are not recovered)")


def _clamp(order: int) -> int:
    return min(order, VOLUME_ORDER_GUARD)


def energy(state: FluidState, sigma: float, n: int = DEFAULT_N,
           jmax: int = DEFAULT_JMAX) -> float:
    """Truncated graded energy of a state.

    E = |u|_{2n}^2 + |u_t|_{2n-2}^2 + |p|_{2n-1}^2
        + sigma |eta|_{2n+1}^2 + |eta|_{2n}^2 + |eta_t|_{2n-1/2}^2,

    with volume orders clamped at VOLUME_ORDER_GUARD and the u_t / eta_t terms
    present only for jmax >= 1.  Nonnegative, zero exactly on the zero state.
    """
    _check_orders(n, jmax)
    derivs = recover_time_derivatives(state, sigma)
    total = volume_norm(state.u, _clamp(2 * n)) ** 2
    total += volume_norm(state.p, _clamp(2 * n - 1)) ** 2
    total += sigma * surface_norm(state.eta, 2 * n + 1) ** 2
    total += surface_norm(state.eta, 2 * n) ** 2
    if jmax >= 1:
        total += volume_norm(derivs.u_t, _clamp(2 * n - 2)) ** 2
        total += surface_norm(derivs.eta_t, 2 * n - 0.5) ** 2
    return float(total)


def dissipation(state: FluidState, sigma: float, n: int = DEFAULT_N,
                jmax: int = DEFAULT_JMAX) -> float:
    """Truncated graded dissipation of a state.

    D = |u|_{2n+1}^2 + |u_t|_{2n-1}^2 + |p|_{2n}^2
        + sigma^2 |eta|_{2n+3/2}^2 + sigma^2 |eta_t|_{2n+1/2}^2
        + |eta|_{2n-1/2}^2 + |eta_t|_{2n-1/2}^2,

    truncated exactly like `energy`.
    """
    _check_orders(n, jmax)
    derivs = recover_time_derivatives(state, sigma)
    total = volume_norm(state.u, _clamp(2 * n + 1)) ** 2
    total += volume_norm(state.p, _clamp(2 * n)) ** 2
    total += sigma ** 2 * surface_norm(state.eta, 2 * n + 1.5) ** 2
    total += surface_norm(state.eta, 2 * n - 0.5) ** 2
    if jmax >= 1:
        total += volume_norm(derivs.u_t, _clamp(2 * n - 1)) ** 2
        total += sigma ** 2 * surface_norm(derivs.eta_t, 2 * n + 0.5) ** 2
        total += surface_norm(derivs.eta_t, 2 * n - 0.5) ** 2
    return float(total)


def kcal(state: FluidState) -> float:
    """Pointwise-gradient functional:

    |grad u|_{Linf}^2 + |grad^2 u|_{Linf}^2 + |grad* u|_{H2(Sigma)}^2,

    with the last term the surface norm of the horizontal velocity gradient
    on the top row.
    """
    grid = state.grid
    u = state.u.values

    gu = ops.grad_tensor(u, grid)          # (3, 3, n1, n2, nz)
    first = float(np.max(np.sum(gu * gu, axis=(0, 1))))

    second = np.zeros((grid.n1, grid.n2, grid.nz))
    for i in range(3):
        fx1 = gu[i, 0]
        fx2 = gu[i, 1]
        fz = gu[i, 2]
        h11 = grid.dx1(fx1)
        h12 = grid.dx2(fx1)
        h13 = grid.dz(fx1)
        h22 = grid.dx2(fx2)
        h23 = grid.dz(fx2)
        h33 = grid.dz(fz)
        second += (h11 ** 2 + h22 ** 2 + h33 ** 2
                   + 2.0 * (h12 ** 2 + h13 ** 2 + h23 ** 2))
    second_max = float(second.max())

    top = 0.0
    for i in range(3):
        top += surface_norm(gu[i, 0, :, :, 0], 2.0, grid=grid) ** 2
        top += surface_norm(gu[i, 1, :, :, 0], 2.0, grid=grid) ** 2

    return first + second_max + top


def surface_mass(state: FluidState) -> float:
    """Integral of the surface elevation over the horizontal torus."""
    return state.grid.surface_integral(state.eta.values)


# ======================================================================
# quadratic balance
# ======================================================================


def quadratic_energy(state: FluidState, sigma: float) -> float:
    """Q = 1/2 int_Omega J |u|^2 + 1/2 int_Sigma eta^2 + sigma |grad* eta|^2."""
    grid = state.grid
    geom = state.geom if state.geom is not None else build_geometry(state.eta)
    usq = np.sum(state.u.values ** 2, axis=-1)
    volume = grid.volume_integral(geom.J * usq)
    ev = state.eta.values
    surf = grid.surface_integral(ev ** 2 + sigma * (grid.dx1(ev) ** 2
                                                    + grid.dx2(ev) ** 2))
    return 0.5 * (volume + surf)


def viscous_dissipation(state: FluidState) -> float:
    """1/2 int_Omega J |D_A u|^2 with the symmetrized transformed gradient."""
    grid = state.grid
    geom = state.geom if state.geom is not None else build_geometry(state.eta)
    D = ops.symgrad_A(state.u.values, geom)
    return 0.5 * grid.volume_integral(geom.J * np.sum(D * D, axis=(0, 1)))


def _work_terms(state: FluidState, sigma: float, kappa: float, psi) -> float:
    """Right-side work of the quadratic balance at one state."""
    grid = state.grid
    geom = state.geom if state.geom is not None else build_geometry(state.eta)
    f1, _, _ = forcing_F(state, sigma)
    work = grid.volume_integral(
        geom.J * np.einsum("...i,...i->...", state.u.values, f1))

    ev = state.eta.values
    flux = ops.u_dot_N(state.u.values, state.eta, grid)
    lap_eta = ops.lap_star(ev, grid)
    work -= sigma * grid.surface_integral((lap_eta - geom.H.values) * flux)

    if kappa != 0.0:
        psi_vals = psi(state.t) if psi is not None else 0.0
        work += kappa * grid.surface_integral(
            (ev - sigma * lap_eta) * (lap_eta + psi_vals))
    return work


def balance_from(t0: float, q0: float, state1: FluidState, sigma: float,
                 kappa: float = 0.0, psi=None) -> float:
    """Balance defect given only (t, Q) of the earlier state; lets callers
    stream long runs without retaining full earlier states."""
    dt = state1.t - t0
    if dt <= 0:
        raise InsufficientHistory("states must be strictly increasing in time")
    rate = (quadratic_energy(state1, sigma) - q0) / dt
    return float(rate + viscous_dissipation(state1)
                 - _work_terms(state1, sigma, kappa, psi))


def balance_residual(states, sigma: float, kappa: float = 0.0, psi=None) -> float:
    """Discrete defect of the quadratic balance over the last two states.

    Needs at least two consecutive states (raises InsufficientHistory
    otherwise).  The backward quotient of Q is balanced against the viscous
    dissipation and the work terms at the later state; for regularized runs
    pass kappa and the surface source psi(t) so the smoothing work is
    accounted for.
    """
    states = list(states)
    if len(states) < 2:
        raise InsufficientHistory(
            f"balance_residual needs two states, got {len(states)}")
    s0, s1 = states[-2], states[-1]
    return balance_from(s0.t, quadratic_energy(s0, sigma), s1, sigma, kappa, psi)


# ======================================================================
# reports
# ======================================================================


@dataclass(frozen=True)
class EnergyReport:
    """Scalar diagnostics of one state, with the truncation parameters used."""

    t: float
    E: float
    D: float
    F2N: float
    Kcal: float
    mass: float
    balance_residual: float
    n: int = DEFAULT_N
    jmax: int = DEFAULT_JMAX
    s_f: float = DEFAULT_S_F

    COLUMNS = ("t", "E", "D", "F2N", "Kcal", "mass", "balance_residual")

    def row(self) -> tuple:
        return (self.t, self.E, self.D, self.F2N, self.Kcal, self.mass,
                self.balance_residual)


def compute_report(state: FluidState, sigma: float, n: int = DEFAULT_N,
                   jmax: int = DEFAULT_JMAX, s_f: float = DEFAULT_S_F,
                   prev=None, kappa: float = 0.0, psi=None) -> EnergyReport:
    """Assemble the EnergyReport of a state.

    The balance residual needs the previous snapshot, either as a FluidState
    or as a light (t, Q) pair, and is NaN without one.
    """
    balance = math.nan
    if isinstance(prev, FluidState):
        balance = balance_residual([prev, state], sigma, kappa, psi)
    elif prev is not None:
        t0, q0 = prev
        balance = balance_from(t0, q0, state, sigma, kappa, psi)
    return EnergyReport(
        t=state.t,
        E=energy(state, sigma, n, jmax),
        D=dissipation(state, sigma, n, jmax),
        F2N=surface_norm(state.eta, s_f) ** 2,
        Kcal=kcal(state),
        mass=surface_mass(state),
        balance_residual=balance,
        n=n, jmax=jmax, s_f=s_f)
