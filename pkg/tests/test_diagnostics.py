"""Norms, graded functionals, quadratic balance, and report assembly."""
import math

import numpy as np
import pytest

from flatwave.geometry import SurfaceField, VolumeField, build_geometry
from flatwave import operators as ops
from flatwave.dynamics import Compensator, FluidState, SchemeConfig, Stepper
from flatwave.diagnostics import (DEFAULT_S_F, EnergyReport, InsufficientHistory,
                                  OrderTooHigh, balance_from, balance_residual,
                                  compute_report, dissipation, energy, kcal,
                                  quadratic_energy, recover_time_derivatives,
                                  surface_mass, surface_norm,
                                  viscous_dissipation, volume_norm)
from flatwave.initial_data import initial_accel, _apply_R

from conftest import single_mode_eta


def eta_only_state(grid, amp=0.01, k1=1):
    return FluidState.quiescent(grid, eta=single_mode_eta(grid, amp=amp, k1=k1))


# ======================================================================
# norms
# ======================================================================


def test_surface_norm_constant(grid16):
    # modes concentrate at k = 0 with weight 1: |c| sqrt(L1 L2)
    c = 0.37
    val = surface_norm(np.full((16, 16), c), 1.7, grid=grid16)
    assert val == pytest.approx(c * 2.0 * np.pi, rel=1e-13)


def test_surface_norm_single_mode_closed_form(grid16):
    # a cos(k x1) has squared norm a^2 (L1 L2 / 2) (1 + k^2)^s
    a, k, s = 0.02, 2, 1.5
    eta = single_mode_eta(grid16, amp=a, k1=k)
    oracle = a * np.sqrt(grid16.l1 * grid16.l2 / 2.0) * (1.0 + k * k) ** (s / 2.0)
    assert surface_norm(eta, s) == pytest.approx(oracle, rel=1e-12)


def test_surface_norm_order_zero_is_l2(grid16, rng):
    vals = rng.normal(size=(16, 16))
    l2 = np.sqrt(grid16.surface_integral(vals**2))
    assert surface_norm(vals, 0.0, grid=grid16) == pytest.approx(l2, rel=1e-12)


def test_surface_norm_needs_grid_for_arrays(grid16):
    with pytest.raises(ValueError):
        surface_norm(np.zeros((16, 16)), 1.0)


def test_volume_norm_constant(grid16):
    c = 1.3
    val = volume_norm(np.full((16, 16, grid16.nz), c), 0, grid=grid16)
    assert val == pytest.approx(c * np.sqrt(grid16.l1 * grid16.l2 * grid16.b),
                                rel=1e-12)


def test_volume_norm_single_mode_closed_form(grid16):
    # cos(x1): each surviving derivative contributes vol/2 = 2 pi^2
    f = np.cos(grid16.x1)[:, None, None] + np.zeros((16, 16, grid16.nz))
    assert volume_norm(f, 1, grid=grid16) == pytest.approx(2.0 * np.pi, rel=1e-11)
    assert volume_norm(f, 2, grid=grid16) == pytest.approx(np.sqrt(6.0) * np.pi,
                                                           rel=1e-11)


def test_volume_norm_vector_matches_component(grid16):
    f = np.cos(grid16.x1)[:, None, None] + np.zeros((16, 16, grid16.nz))
    vec = np.zeros((16, 16, grid16.nz, 3))
    vec[..., 1] = f
    assert volume_norm(vec, 1, grid=grid16) == pytest.approx(
        volume_norm(f, 1, grid=grid16), rel=1e-13)


def test_volume_norm_order_guard(grid16):
    f = np.zeros((16, 16, grid16.nz))
    with pytest.raises(OrderTooHigh) as exc:
        volume_norm(f, 5, grid=grid16)
    assert exc.value.order == 5
    assert np.isfinite(volume_norm(f, 5, allow_high=True, grid=grid16))
    with pytest.raises(ValueError):
        volume_norm(f, -1, grid=grid16)


# ======================================================================
# time-derivative recovery
# ======================================================================


def test_recovered_eta_t_is_kinematic_flux(prepared16):
    derivs = recover_time_derivatives(prepared16)
    oracle = ops.u_dot_N(prepared16.u.values, prepared16.eta, prepared16.grid)
    assert np.array_equal(derivs.eta_t.values, oracle)


def test_recovered_u_t_matches_momentum_rate(prepared16):
    # the plain rate is the material rate plus the mesh-rotation term
    derivs = recover_time_derivatives(prepared16)
    accel = initial_accel(prepared16.u, prepared16.p, prepared16.eta,
                          geom=prepared16.geom)
    oracle = accel.values + _apply_R(prepared16.geom, prepared16.u.values)
    assert np.abs(derivs.u_t.values - oracle).max() <= 1e-10


def test_p_t_backward_difference(grid16):
    state0 = eta_only_state(grid16)
    p1 = VolumeField(grid16, np.full((16, 16, grid16.nz), 0.5))
    state1 = FluidState(grid16, 0.1, state0.eta, state0.u, p1, geom=state0.geom)
    assert recover_time_derivatives(state1).p_t is None
    derivs = recover_time_derivatives(state1, history=[state0])
    assert np.abs(derivs.p_t.values - 5.0).max() <= 1e-12
    # states that are not strictly earlier are ignored
    assert recover_time_derivatives(state0, history=[state1]).p_t is None


# ======================================================================
# graded functionals
# ======================================================================


def test_energy_zero_state(grid16):
    assert energy(FluidState.quiescent(grid16), sigma=1.0) == 0.0
    assert dissipation(FluidState.quiescent(grid16), sigma=1.0) == 0.0


def test_energy_closed_form_surface_only(grid16):
    # u = p = 0 so only the two surface terms survive:
    # E = sigma |eta|_5^2 + |eta|_4^2 with |a cos x1|_s^2 = a^2 (L1 L2/2) 2^s
    a, sigma = 0.01, 0.7
    state = eta_only_state(grid16, amp=a)
    base = a * a * grid16.l1 * grid16.l2 / 2.0
    oracle = base * (sigma * 2.0**5 + 2.0**4)
    assert energy(state, sigma) == pytest.approx(oracle, rel=1e-11)


def test_dissipation_closed_form_surface_only(grid16):
    a, sigma = 0.01, 0.7
    state = eta_only_state(grid16, amp=a)
    base = a * a * grid16.l1 * grid16.l2 / 2.0
    oracle = base * (sigma**2 * 2.0**5.5 + 2.0**3.5)
    assert dissipation(state, sigma) == pytest.approx(oracle, rel=1e-11)


def test_energy_monotone_and_continuous_in_sigma(grid16):
    state = eta_only_state(grid16)
    values = [energy(state, s) for s in (1.0, 0.5, 0.1, 0.0)]
    assert values == sorted(values, reverse=True)
    assert energy(state, 1e-9) == pytest.approx(energy(state, 0.0),
                                                abs=1e-8 * values[0])


def test_energy_order_validation(grid16):
    state = eta_only_state(grid16)
    with pytest.raises(ValueError):
        energy(state, 1.0, n=0)
    with pytest.raises(ValueError):
        energy(state, 1.0, jmax=2)
    # volume orders clamp instead of tripping the collocation guard
    assert np.isfinite(energy(state, 1.0, n=3))


def test_kcal_closed_form_shear(grid16):
    # u1 = c z: constant gradient c, no second derivatives, flat top trace
    c = 0.4
    u = np.zeros((16, 16, grid16.nz, 3))
    u[..., 0] = c * grid16.z[None, None, :]
    state = FluidState(grid16, 0.0, SurfaceField.zero(grid16),
                       VolumeField(grid16, u), VolumeField.zero(grid16))
    assert kcal(state) == pytest.approx(c * c, rel=1e-10)
    assert kcal(FluidState.quiescent(grid16)) == 0.0


def test_surface_mass(grid16):
    state = eta_only_state(grid16)
    assert abs(surface_mass(state)) <= 1e-12
    flat = FluidState.quiescent(grid16, eta=SurfaceField(
        grid16, np.full((16, 16), 0.02)))
    assert surface_mass(flat) == pytest.approx(0.02 * grid16.l1 * grid16.l2,
                                               rel=1e-13)


# ======================================================================
# quadratic balance
# ======================================================================


def test_quadratic_energy_closed_forms(grid16):
    a, sigma = 0.01, 0.8
    state = eta_only_state(grid16, amp=a)
    # 1/2 (|eta|^2 + sigma |grad* eta|^2) = pi^2 a^2 (1 + sigma) for cos x1
    assert quadratic_energy(state, sigma) == pytest.approx(
        np.pi**2 * a * a * (1.0 + sigma), rel=1e-12)
    c = 0.3
    u = np.zeros((16, 16, grid16.nz, 3))
    u[..., 0] = c
    flat = FluidState(grid16, 0.0, SurfaceField.zero(grid16),
                      VolumeField(grid16, u), VolumeField.zero(grid16))
    vol = grid16.l1 * grid16.l2 * grid16.b
    assert quadratic_energy(flat, 0.0) == pytest.approx(0.5 * c * c * vol,
                                                        rel=1e-12)


def test_viscous_dissipation_closed_form(grid16):
    # u1 = c z: D = grad u + (grad u)^T has two entries of size c, so
    # 1/2 int J |D|^2 = c^2 vol = 4 pi^2 c^2
    c = 0.4
    u = np.zeros((16, 16, grid16.nz, 3))
    u[..., 0] = c * grid16.z[None, None, :]
    state = FluidState(grid16, 0.0, SurfaceField.zero(grid16),
                       VolumeField(grid16, u), VolumeField.zero(grid16))
    assert viscous_dissipation(state) == pytest.approx(
        4.0 * np.pi**2 * c * c, rel=1e-12)


def test_balance_zero_at_equilibrium(grid16):
    s0 = FluidState.quiescent(grid16)
    s1 = FluidState(grid16, 1e-3, s0.eta, s0.u, s0.p, geom=s0.geom)
    assert balance_residual([s0, s1], sigma=1.0) == 0.0


def test_balance_requires_history(grid16):
    s0 = FluidState.quiescent(grid16)
    with pytest.raises(InsufficientHistory):
        balance_residual([s0], sigma=1.0)
    with pytest.raises(InsufficientHistory):
        balance_from(0.0, 0.0, s0, sigma=1.0)  # dt = 0


def test_balance_small_on_reference_steps(prepared16):
    grid = prepared16.grid
    scheme = SchemeConfig(dt=2e-3, sigma=1.0, kappa=0.0)
    stepper = Stepper(grid, scheme, Compensator(prepared16.eta, 1.0))
    s1 = stepper.step(prepared16)
    s2 = stepper.step(s1)
    assert abs(balance_residual([s1, s2], sigma=1.0)) <= 1e-4


def test_balance_kappa_work_is_additive(prepared16):
    # ignoring the smoothing work shifts the defect by exactly the kappa term
    grid = prepared16.grid
    kappa = 1e-2
    psi = Compensator(prepared16.eta, 1.0)
    scheme = SchemeConfig(dt=2e-3, sigma=1.0, kappa=kappa)
    stepper = Stepper(grid, scheme, psi)
    s1 = stepper.step(prepared16)
    s2 = stepper.step(s1)
    with_k = balance_residual([s1, s2], 1.0, kappa=kappa, psi=psi)
    without = balance_residual([s1, s2], 1.0)
    ev = s2.eta.values
    lap_eta = ops.lap_star(ev, grid)
    work = kappa * grid.surface_integral(
        (ev - 1.0 * lap_eta) * (lap_eta + psi(s2.t)))
    assert with_k - without == pytest.approx(-work, rel=1e-10)


# ======================================================================
# report assembly
# ======================================================================


def test_report_row_matches_columns(prepared16):
    rep = compute_report(prepared16, sigma=1.0)
    assert EnergyReport.COLUMNS == ("t", "E", "D", "F2N", "Kcal", "mass",
                                    "balance_residual")
    row = rep.row()
    assert row[0] == prepared16.t
    assert row[1] == rep.E and row[2] == rep.D
    assert math.isnan(row[-1])  # no previous snapshot
    assert rep.F2N == pytest.approx(
        surface_norm(prepared16.eta, DEFAULT_S_F) ** 2, rel=1e-13)
    assert rep.mass == surface_mass(prepared16)


def test_report_prev_state_and_pair_agree(prepared16):
    grid = prepared16.grid
    scheme = SchemeConfig(dt=2e-3, sigma=1.0)
    stepper = Stepper(grid, scheme, Compensator(prepared16.eta, 1.0))
    s1 = stepper.step(prepared16)
    via_state = compute_report(s1, sigma=1.0, prev=prepared16)
    q0 = quadratic_energy(prepared16, 1.0)
    via_pair = compute_report(s1, sigma=1.0, prev=(prepared16.t, q0))
    assert via_state.balance_residual == pytest.approx(
        via_pair.balance_residual, rel=1e-13)
    assert np.isfinite(via_state.balance_residual)
