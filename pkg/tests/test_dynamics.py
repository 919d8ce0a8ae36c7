"""Forcings, compensator, and the backward-Euler steppers."""
import numpy as np
import pytest

from flatwave.grid import Grid
from flatwave.geometry import SurfaceField, VolumeField, build_geometry
from flatwave import operators as ops
from flatwave.dynamics import (Compensator, FluidState, SchemeConfig,
                               SimResult, Stepper, forcing_F, forcing_G,
                               forcing_G2, kinematic_rhs, simulate)

from conftest import single_mode_eta, smooth_volume_vector


def flat_state_with_velocity(grid, u_vals, eta_t=None):
    """State with eta = 0 and a prescribed velocity (and optional eta_t)."""
    geom = build_geometry(SurfaceField.zero(grid))
    if eta_t is not None:
        geom = geom.with_eta_t(eta_t)
    return FluidState(grid, 0.0, SurfaceField.zero(grid),
                      VolumeField(grid, u_vals), VolumeField.zero(grid),
                      geom=geom)


# ======================================================================
# forcings
# ======================================================================


def test_forcings_vanish_at_rest(grid16):
    state = FluidState.quiescent(grid16)
    g1, g2, g3, g4 = forcing_G(state, sigma=1.0)
    for arr in (g1, g2, g3, g4):
        assert np.abs(arr).max() == 0.0
    f1, f3, f4 = forcing_F(state, sigma=1.0)
    for arr in (f1, f3, f4):
        assert np.abs(arr).max() == 0.0


@pytest.mark.parametrize("top_normal_flow", [True, False])
def test_geometry_forcings_vanish_on_flat_surface(grid16, rng, top_normal_flow):
    # with eta = 0 the transformed and flat operators coincide, so the
    # divergence, stress, and flux corrections must vanish identically
    u = smooth_volume_vector(grid16, rng, kmax=1, bottom_zero=True)
    if not top_normal_flow:
        u[:, :, 0, 2] = 0.0
    state = flat_state_with_velocity(grid16, u)
    _, g2, g3, g4 = forcing_G(state, sigma=1.0)
    assert np.abs(g2).max() <= 1e-12
    assert np.abs(g3).max() <= 1e-12
    assert np.abs(g4).max() <= 1e-12


def test_g1_equals_f1_on_flat_surface(grid16, rng):
    # at eta = 0 every geometry-perturbation term of G1 is zero and both
    # reduce to mesh-velocity transport minus advection
    u = smooth_volume_vector(grid16, rng, kmax=1, bottom_zero=True)
    eta_t = single_mode_eta(grid16, amp=0.02, k1=1)
    state = flat_state_with_velocity(grid16, u, eta_t=eta_t)
    g1 = forcing_G(state, sigma=1.0)[0]
    f1 = forcing_F(state, sigma=1.0)[0]
    assert np.abs(g1 - f1).max() <= 1e-12


def test_f1_closed_form_flat_moving_mesh(grid16):
    # oracle first: with eta = 0, eta_t = c cos x1, and the polynomial field
    # u = (sin x1 (z+b)^2, 0, cos x1 z^2) everything has a closed form:
    #   mesh term  ext(eta_t) (1 + z/b) d3 u,  ext = c cos x1 exp(z)
    #   advection  (u1 d1 + u3 d3) u
    # (the extension scales mode k by exp(|k| z); here |k| = 1)
    g = grid16
    b = g.b
    X1 = g.x1[:, None, None]
    Z = g.z[None, None, :]
    shape = (g.n1, g.n2, g.nz)
    c = 0.03
    u = np.zeros(shape + (3,))
    u[..., 0] = np.sin(X1) * (Z + b) ** 2
    u[..., 2] = np.cos(X1) * Z**2

    ext = c * np.cos(X1) * np.exp(Z)
    bt = 1.0 + Z / b
    d3u = np.zeros(shape + (3,))
    d3u[..., 0] = np.sin(X1) * 2.0 * (Z + b)
    d3u[..., 2] = np.cos(X1) * 2.0 * Z
    adv = np.zeros(shape + (3,))
    adv[..., 0] = (np.sin(X1) * np.cos(X1)
                   * ((Z + b) ** 4 + 2.0 * Z**2 * (Z + b)))
    adv[..., 2] = (-np.sin(X1) ** 2 * (Z + b) ** 2 * Z**2
                   + 2.0 * Z**3 * np.cos(X1) ** 2)
    oracle = (ext * bt)[..., None] * d3u - adv

    eta_t = SurfaceField(g, np.broadcast_to(
        c * np.cos(g.x1)[:, None], (g.n1, g.n2)).copy())
    state = flat_state_with_velocity(g, u, eta_t=eta_t)
    f1 = forcing_F(state, sigma=1.0)[0]
    assert np.abs(f1 - oracle).max() <= 1e-9


def test_g2_matches_inline_contraction(grid16, rng):
    eta = single_mode_eta(grid16, amp=0.02)
    geom = build_geometry(eta)
    u = smooth_volume_vector(grid16, rng, kmax=1, bottom_zero=True)
    # oracle: independent inline assembly of div_flat - Acal_{ij} d_j u_i
    d = np.stack([grid16.dx1(u), grid16.dx2(u), grid16.dz(u)])  # (3,...,3)
    div_flat = d[0][..., 0] + d[1][..., 1] + d[2][..., 2]
    dd = np.moveaxis(d, -1, 0)  # dd[i, j] = d_j u_i
    contraction = np.einsum("ij...,ij...->...", geom.Acal, dd)
    oracle = grid16.dealias(div_flat - contraction)
    g2 = forcing_G2(VolumeField(grid16, u), geom)
    assert np.abs(g2 - oracle).max() <= 1e-9


def test_g3_matches_inline_formula_for_pure_surface(grid16):
    # u = 0, p = 0: only the surface terms of the stress correction survive
    eta = single_mode_eta(grid16, amp=0.02)
    state = FluidState.quiescent(grid16, eta=eta)
    sigma = 0.7
    g3 = forcing_G(state, sigma)[2]

    e1 = grid16.dx1(eta.values)
    e2 = grid16.dx2(eta.values)
    oracle = np.stack([-e1 * eta.values, -e2 * eta.values,
                       np.zeros_like(e1)])
    q = 1.0 / np.sqrt(1.0 + e1**2 + e2**2)
    s = (grid16.dx1(grid16.dealias((q - 1.0) * e1))
         + grid16.dx2(grid16.dealias((q - 1.0) * e2)))
    N = state.geom.N
    oracle = oracle - sigma * s[None] * N
    oracle = np.stack([grid16.dealias(oracle[i]) for i in range(3)])
    assert np.abs(g3 - oracle).max() <= 1e-12


def test_g4_closed_form_single_modes(grid16):
    # eta = a cos x1 and u1|top = c cos x1 give G4 = (a c / 2) sin 2 x1
    a, c = 0.04, 0.6
    eta = single_mode_eta(grid16, amp=a)
    u = np.zeros((16, 16, grid16.nz, 3))
    u[..., 0] = np.cos(grid16.x1)[:, None, None] * c
    geom = build_geometry(eta)
    state = FluidState(grid16, 0.0, eta, VolumeField(grid16, u),
                       VolumeField.zero(grid16), geom=geom)
    g4 = forcing_G(state, sigma=1.0)[3]
    oracle = 0.5 * a * c * np.sin(2.0 * grid16.x1)[:, None] + np.zeros((16, 16))
    assert np.abs(g4 - oracle).max() <= 1e-13


def test_g1_perturbation_scales_linearly_in_eta(grid16, rng):
    # the geometry-dependent part of G1 must shrink like the amplitude
    u = smooth_volume_vector(grid16, rng, kmax=1, bottom_zero=True)
    base = forcing_G(flat_state_with_velocity(grid16, u), sigma=1.0)[0]

    def perturbation(amp):
        eta = single_mode_eta(grid16, amp=amp)
        state = FluidState(grid16, 0.0, eta, VolumeField(grid16, u),
                           VolumeField.zero(grid16))
        return np.abs(forcing_G(state, sigma=1.0)[0] - base).max()

    r = perturbation(1e-2) / perturbation(1e-3)
    assert 7.0 <= r <= 13.0


def test_f3_assembles_surface_stress(grid16):
    eta = single_mode_eta(grid16, amp=0.01)
    state = FluidState.quiescent(grid16, eta=eta)
    for sigma in (0.0, 1.0):
        f3 = forcing_F(state, sigma)[1]
        coeff = eta.values - sigma * state.geom.H.values
        oracle = np.stack([grid16.dealias(coeff * state.geom.N[i])
                           for i in range(3)])
        assert np.abs(f3 - oracle).max() <= 1e-13


# ======================================================================
# compensator and kinematic right-hand side
# ======================================================================


def test_compensator_closed_form(grid16):
    # lap* of a cos(2 x1) is -4 a cos(2 x1), so Psi(t) = 4 a cos(2 x1) e^{-t}
    a = 0.05
    eta0 = single_mode_eta(grid16, amp=a, k1=2)
    psi = Compensator(eta0, tau=1.0)
    base = 4.0 * a * np.cos(2.0 * grid16.x1)[:, None] + np.zeros((16, 16))
    assert np.abs(psi(0.0) - base).max() <= 1e-11
    assert np.abs(psi(2.0) - base * np.exp(-2.0)).max() <= 1e-11
    assert np.abs(Compensator.zero(grid16)(0.0)).max() == 0.0


def test_compensator_cancels_diffusion_at_start(grid16, rng):
    # at t = 0 the regularized kinematic rhs equals the unregularized one
    eta0 = single_mode_eta(grid16, amp=0.01)
    u = smooth_volume_vector(grid16, rng, kmax=1, bottom_zero=True)
    state = FluidState(grid16, 0.0, eta0, VolumeField(grid16, u),
                       VolumeField.zero(grid16))
    psi = Compensator(eta0, tau=1.0)
    plain = kinematic_rhs(state, 0.0, psi(0.0))
    reg = kinematic_rhs(state, 1e-2, psi(0.0))
    assert np.array_equal(plain, reg)


def test_scheme_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(dt=0.0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, sigma=-1.0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, kappa=-1.0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, mode="semi")
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, tau=0.0)


# ======================================================================
# stepping
# ======================================================================


@pytest.mark.parametrize("mode", ["split", "coupled"])
def test_rest_state_is_a_fixed_point(grid8, mode):
    scheme = SchemeConfig(dt=2e-3, sigma=1.0, kappa=0.0, mode=mode)
    stepper = Stepper(grid8, scheme)
    state = FluidState.quiescent(grid8)
    for _ in range(20):
        state = stepper.step(state)
    assert np.abs(state.eta.values).max() <= 1e-13
    assert np.abs(state.u.values).max() <= 1e-13
    assert abs(state.t - 20 * scheme.dt) <= 1e-12


@pytest.mark.parametrize("mode", ["split", "coupled"])
def test_surface_mean_is_conserved(prepared16, mode):
    grid = prepared16.grid
    scheme = SchemeConfig(dt=2e-3, sigma=1.0, kappa=0.0, mode=mode)
    stepper = Stepper(grid, scheme, Compensator(prepared16.eta, 1.0))
    state = prepared16
    for _ in range(3):
        state = stepper.step(state)
        assert abs(grid.surface_integral(state.eta.values)) <= 1e-10


@pytest.mark.parametrize("mode", ["split", "coupled"])
def test_self_convergence_first_order(prepared16, mode):
    # halving dt should roughly halve the distance to the next-finer run
    T = 0.02
    etas = {}
    for dt in (4e-3, 2e-3, 1e-3):
        scheme = SchemeConfig(dt=dt, sigma=1.0, kappa=0.0, mode=mode)
        res = simulate(prepared16, scheme, T, stride=1000)
        etas[dt] = res.states[-1].eta.values
    e1 = np.abs(etas[4e-3] - etas[2e-3]).max()
    e2 = np.abs(etas[2e-3] - etas[1e-3]).max()
    assert 0.38 <= e2 / e1 <= 0.62


def test_linearized_tracks_nonlinear_for_tiny_data(grid8):
    eta0 = single_mode_eta(grid8, amp=1e-3)
    T, dt = 0.01, 2e-3
    finals = {}
    for lin in (False, True):
        scheme = SchemeConfig(dt=dt, sigma=1.0, mode="split", linearized=lin)
        res = simulate(FluidState.quiescent(grid8, eta=eta0), scheme, T)
        finals[lin] = res.states[-1].eta.values
    diff = np.abs(finals[True] - finals[False]).max()
    assert diff <= 1e-2 * np.abs(finals[False]).max()


# ======================================================================
# simulate driver
# ======================================================================


def test_simulate_zero_horizon(grid8):
    state = FluidState.quiescent(grid8)
    res = simulate(state, SchemeConfig(dt=1e-3), 0.0)
    assert res.steps == 0
    assert res.times == [0.0]
    assert len(res.states) == 1
    assert res.states[0] is state


def test_simulate_recording_schedule(grid8):
    seen = []
    state = FluidState.quiescent(grid8)
    res = simulate(state, SchemeConfig(dt=1e-3), 5e-3, stride=2,
                   observer=lambda i, s: seen.append(i))
    assert res.steps == 5
    assert seen == [0, 2, 4, 5]
    assert res.times == pytest.approx([0.0, 2e-3, 4e-3, 5e-3])
    assert len(res.states) == len(res.times)


def test_simulate_keep_states_false(grid8):
    res = simulate(FluidState.quiescent(grid8), SchemeConfig(dt=1e-3), 4e-3,
                   stride=2, keep_states=False)
    assert res.states == []
    assert res.times == pytest.approx([0.0, 2e-3, 4e-3])
