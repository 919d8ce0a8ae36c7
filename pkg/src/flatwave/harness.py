"""Batch experiments: limit sweeps, decay fits, and initial-data audits.

The two sweep drivers share one repaired velocity field (the bottom-trace,
divergence, and tangential-stress repairs are all independent of the capillary
coefficient, because the projection of the normal-direction stress data onto
the tangent plane vanishes identically) and re-derive only the initial
pressure per run.  Every member run is compared against the limit run of its
family (capillary coefficient zero, or smoothing coefficient zero) through

    d = sup_t |eta - eta_limit|_{H2(Sigma)} + sup_t |u - u_limit|_{L2(Omega)}

over the recorded snapshot times.  Runs are deterministic, so a member whose
parameter equals the limit value reuses the limit series and scores exactly
zero.  An empirical convergence order is fitted on the three smallest nonzero
parameters.  All drivers run serially; members are independent and could be
dispatched to separate processes without changing any result.

run_decay fits the truncated energy series against an exponential model
log E ~ -rate * t and, for zero capillary coefficient, additionally against an
algebraic model log E ~ -power * log(1 + t), reporting which fits better.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import NumericsError, SurfaceField
from .dynamics import Compensator, FluidState, SchemeConfig, simulate
from .initial_data import (CompatibilityReport, check_compatibility,
                           initial_accel, initial_pressure,
                           prepare_initial_data, _apply_R)
from . import diagnostics as diag

DEFAULT_SIGMAS = (1.0, 0.1, 0.01, 0.001, 0.0)
DEFAULT_KAPPAS = (0.1, 0.01, 0.001)
DEFAULT_FIT_WINDOW = (1.0, 5.0)
DEFAULT_SMALLNESS = 0.05
FIT_R2_FLOOR = 0.9


class FitUnreliable(NumericsError):
    """No decay model reached the minimum goodness of fit."""


class SweepAborted(NumericsError):
    """A sweep member failed; partial results are carried along."""

    def __init__(self, parameter: str, value: float, cause: Exception,
                 partial: "SweepResult"):
        super().__init__(f"{parameter} = {value:g} run failed: {cause}")
        self.parameter = parameter
        self.value = value
        self.cause = cause
        self.partial = partial


# ======================================================================
# single-run collection
# ======================================================================


@dataclass(frozen=True)
class RunSeries:
    """Light per-run record: snapshot times, fields, and scalar reports."""

    parameter: float
    times: tuple
    etas: tuple
    us: tuple
    reports: tuple


def _collect_run(state0: FluidState, scheme: SchemeConfig, end_time: float,
                 stride: int, n: int, jmax: int, s_f: float,
                 parameter: float) -> RunSeries:
    """Run the scheme, recording field copies and EnergyReports per stride."""
    psi = Compensator(state0.eta, scheme.tau)
    times, etas, us, reports = [], [], [], []
    last_q = [None]

    def observer(_i, s):
        prev = None if last_q[0] is None else last_q[0]
        rep = diag.compute_report(s, scheme.sigma, n=n, jmax=jmax, s_f=s_f,
                                  prev=prev, kappa=scheme.kappa, psi=psi)
        last_q[0] = (s.t, diag.quadratic_energy(s, scheme.sigma))
        times.append(s.t)
        etas.append(s.eta.values.copy())
        us.append(s.u.values.copy())
        reports.append(rep)

    simulate(state0, scheme, end_time, psi=psi, stride=stride,
             observer=observer, keep_states=False)
    return RunSeries(parameter, tuple(times), tuple(etas), tuple(us),
                     tuple(reports))


def _divergence_metric(grid, a: RunSeries, b: RunSeries) -> float:
    """sup_t H2(Sigma) surface distance plus sup_t L2(Omega) velocity distance."""
    if len(a.times) != len(b.times) or any(
            abs(ta - tb) > 1e-9 for ta, tb in zip(a.times, b.times)):
        raise ValueError("runs sampled at different times cannot be compared")
    sup_eta = max(diag.surface_norm(ea - eb, 2.0, grid=grid)
                  for ea, eb in zip(a.etas, b.etas))
    sup_u = max(diag.volume_norm(ua - ub, 0, grid=grid)
                for ua, ub in zip(a.us, b.us))
    return float(sup_eta + sup_u)


# ======================================================================
# sweeps
# ======================================================================


@dataclass(frozen=True)
class SweepResult:
    """Limit-sweep outcome: per-member divergence metrics and report series."""

    parameter: str
    values: tuple
    metrics: tuple
    order: float
    monotone: bool
    times: tuple
    reports: tuple
    baseline_reports: tuple

    def summary(self) -> str:
        lines = [f"{self.parameter}-sweep vs {self.parameter} = 0 limit:"]
        for v, d in zip(self.values, self.metrics):
            lines.append(f"  {self.parameter} = {v:<8g} d = {d:.6e}")
        lines.append(f"  fitted order {self.order:.3f}; "
                     f"monotone within 5%: {self.monotone}")
        return "\n".join(lines)


def _fit_order(values, metrics) -> float:
    """Log-log slope over the three smallest nonzero parameters."""
    pairs = sorted((v, d) for v, d in zip(values, metrics) if v > 0 and d > 0)
    pairs = pairs[:3]
    if len(pairs) < 2:
        return math.nan
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def _is_monotone(values, metrics, slack: float = 0.05) -> bool:
    """d nonincreasing as the parameter decreases, within relative slack."""
    pairs = sorted(zip(values, metrics), reverse=True)
    for (_, d_big), (_, d_small) in zip(pairs, pairs[1:]):
        if d_small > d_big * (1.0 + slack):
            return False
    return True


def _prepared_velocity(eta0: SurfaceField, u0, max_passes: int = 8) -> FluidState:
    """Repair (eta0, u0) once; the repair is capillary-independent."""
    return prepare_initial_data(eta0, u0, sigma=0.0, max_passes=max_passes)


def _with_pressure(prepared: FluidState, sigma: float) -> FluidState:
    """Rebuild the t = 0 state with the pressure consistent at this sigma."""
    p0 = initial_pressure(prepared.u, prepared.eta, sigma, geom=prepared.geom)
    return FluidState(prepared.grid, 0.0, prepared.eta, prepared.u, p0,
                      geom=prepared.geom)


def _sweep(parameter: str, eta0: SurfaceField, u0, scheme: SchemeConfig,
           end_time: float, values, stride: int, n: int, jmax: int,
           s_f: float) -> SweepResult:
    grid = eta0.grid
    prepared = _prepared_velocity(eta0, u0)

    def make_run(value: float) -> RunSeries:
        member = replace(scheme, **{parameter: value})
        if parameter == "sigma":
            state0 = _with_pressure(prepared, value)
        else:
            state0 = _with_pressure(prepared, scheme.sigma)
        return _collect_run(state0, member, end_time, stride, n, jmax, s_f,
                            parameter=value)

    def partial(done_values, done_metrics, done_reports, baseline) -> SweepResult:
        base_reports = baseline.reports if baseline is not None else ()
        base_times = baseline.times if baseline is not None else ()
        return SweepResult(parameter, tuple(done_values), tuple(done_metrics),
                           _fit_order(done_values, done_metrics),
                           _is_monotone(done_values, done_metrics),
                           base_times, tuple(done_reports), base_reports)

    baseline = None
    done_values, done_metrics, done_reports = [], [], []
    current = 0.0
    try:
        baseline = make_run(0.0)
        for value in values:
            current = float(value)
            series = baseline if value == 0.0 else make_run(value)
            done_values.append(current)
            done_metrics.append(_divergence_metric(grid, series, baseline))
            done_reports.append(series.reports)
    except NumericsError as exc:
        raise SweepAborted(parameter, current, exc,
                           partial(done_values, done_metrics, done_reports,
                                   baseline)) from exc
    return partial(done_values, done_metrics, done_reports, baseline)


def run_sigma_sweep(eta0: SurfaceField, u0, scheme: SchemeConfig,
                    end_time: float, sigmas=DEFAULT_SIGMAS,
                    stride: int = 25, n: int = diag.DEFAULT_N,
                    jmax: int = diag.DEFAULT_JMAX,
                    s_f: float = diag.DEFAULT_S_F) -> SweepResult:
    """Capillary-limit sweep: run every sigma and compare to the sigma = 0 run.

    The velocity data is prepared once (the repair does not depend on sigma);
    each member re-derives its initial pressure, which does.  Raises
    SweepAborted with partial results if any member run fails.
    """
    return _sweep("sigma", eta0, u0, scheme, end_time, tuple(sigmas), stride,
                  n, jmax, s_f)


def run_kappa_sweep(eta0: SurfaceField, u0, scheme: SchemeConfig,
                    end_time: float, kappas=DEFAULT_KAPPAS,
                    stride: int = 25, n: int = diag.DEFAULT_N,
                    jmax: int = diag.DEFAULT_JMAX,
                    s_f: float = diag.DEFAULT_S_F) -> SweepResult:
    """Smoothing-limit sweep at fixed sigma > 0, compared to the kappa = 0 run.

    The compensator is active in every member (it is built from the initial
    surface), so switching the smoothing on leaves the first right-hand side
    unchanged.  Raises SweepAborted with partial results on member failure.
    """
    if scheme.sigma <= 0:
        raise ValueError("the smoothing sweep expects a fixed sigma > 0")
    return _sweep("kappa", eta0, u0, scheme, end_time, tuple(kappas), stride,
                  n, jmax, s_f)


# ======================================================================
# decay fits
# ======================================================================


@dataclass(frozen=True)
class DecayReport:
    """Energy-decay fit: exponential model, optional algebraic alternative."""

    sigma: float
    times: tuple
    energies: tuple
    window: tuple
    rate: float
    r2_exp: float
    power: float
    r2_pow: float
    better_model: str
    monotone: bool
    degenerate: bool
    reports: tuple

    def summary(self) -> str:
        if self.degenerate:
            return ("decay: degenerate (negligible energy or too few samples "
                    "in the fit window); no fit")
        lines = [f"decay fit on t in [{self.window[0]:g}, {self.window[1]:g}]:",
                 f"  exponential rate {self.rate:.4f} (R2 = {self.r2_exp:.5f})"]
        if not math.isnan(self.power):
            lines.append(f"  algebraic power {self.power:.4f} "
                         f"(R2 = {self.r2_pow:.5f})")
        lines.append(f"  better model: {self.better_model}; "
                     f"monotone on window: {self.monotone}")
        return "\n".join(lines)


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return float(slope), math.nan
    return float(slope), float(1.0 - np.sum(resid ** 2) / ss_tot)


def run_decay(eta0: SurfaceField, u0, scheme: SchemeConfig, end_time: float,
              fit_window=DEFAULT_FIT_WINDOW, stride: int = 25,
              smallness: float = DEFAULT_SMALLNESS, n: int = diag.DEFAULT_N,
              jmax: int = diag.DEFAULT_JMAX,
              s_f: float = diag.DEFAULT_S_F) -> DecayReport:
    """Small-data decay study: fit the truncated energy over the window.

    Requires zero-mean initial surface below the smallness bound and a
    nonempty fit window that starts before end_time.  Fits log E against t
    (exponential) and, when sigma = 0, also against log(1 + t) (algebraic),
    reporting the better model.  Raises FitUnreliable when no model reaches
    R2 = 0.9; negligible energy or a window with too few samples is reported
    as degenerate instead of fitted.
    """
    if float(np.abs(eta0.values).max()) > smallness:
        raise ValueError(f"initial surface exceeds the smallness bound "
                         f"{smallness:g}")
    if abs(eta0.mean()) > 1e-10:
        raise ValueError("decay studies need a zero-mean initial surface")
    lo, hi = fit_window
    if not lo < hi:
        raise ValueError(f"empty fit window [{lo:g}, {hi:g}]")
    if lo >= end_time:
        raise ValueError(f"fit window starts at {lo:g} but the run ends "
                         f"at {end_time:g}")

    prepared = _prepared_velocity(eta0, u0)
    state0 = _with_pressure(prepared, scheme.sigma)
    series = _collect_run(state0, scheme, end_time, stride, n, jmax, s_f,
                          parameter=scheme.sigma)
    times = np.array(series.times)
    energies = np.array([r.E for r in series.reports])

    mask = (times >= lo) & (times <= hi) & (energies > 0)
    if energies.max(initial=0.0) < 1e-28 or mask.sum() < 3:
        return DecayReport(scheme.sigma, tuple(times), tuple(energies),
                           (lo, hi), math.nan, math.nan, math.nan, math.nan,
                           "degenerate", True, True, series.reports)

    tw = times[mask]
    logE = np.log(energies[mask])
    slope, r2_exp = _linear_fit(tw, logE)
    rate = -slope

    power, r2_pow = math.nan, -math.inf
    if scheme.sigma == 0.0:
        pslope, r2_pow = _linear_fit(np.log1p(tw), logE)
        power = -pslope

    better = "exponential" if r2_exp >= r2_pow else "algebraic"
    ew = energies[mask]
    monotone = bool(np.all(ew[1:] <= ew[:-1] * (1.0 + 1e-10)))

    if max(r2_exp, r2_pow) < FIT_R2_FLOOR:
        raise FitUnreliable(
            f"decay fit unreliable: exponential R2 = {r2_exp:.3f}, "
            f"algebraic R2 = {r2_pow if r2_pow > -math.inf else math.nan}")
    return DecayReport(scheme.sigma, tuple(times), tuple(energies), (lo, hi),
                       rate, r2_exp, power,
                       r2_pow if r2_pow > -math.inf else math.nan,
                       better, monotone, False, series.reports)


# ======================================================================
# data audits
# ======================================================================


@dataclass(frozen=True)
class AuditReport:
    """Before/after admissibility residuals and norms of constructed fields."""

    before: CompatibilityReport
    after: CompatibilityReport
    norms: dict
    state: FluidState

    def summary(self) -> str:
        lines = ["data audit:",
                 f"  before: {self.before}",
                 f"  after:  {self.after}"]
        for name, value in self.norms.items():
            lines.append(f"  {name} = {value:.6e}")
        return "\n".join(lines)


def audit_data(u0, eta0: SurfaceField, sigma: float = 1.0) -> AuditReport:
    """Check raw data, repair it, re-check, and report the constructed fields."""
    before = check_compatibility(u0, eta0, sigma)
    state = prepare_initial_data(eta0, u0, sigma=sigma)
    after = check_compatibility(state.u, eta0, sigma, geom=state.geom)
    accel = initial_accel(state.u, state.p, eta0, geom=state.geom)
    dtu = accel.values + _apply_R(state.geom, state.u.values)
    grid = eta0.grid
    norms = {
        "eta0_h2": diag.surface_norm(eta0, 2.0),
        "u0_l2": diag.volume_norm(state.u, 0),
        "u0_h2": diag.volume_norm(state.u, 2),
        "p0_h1": diag.volume_norm(state.p, 1),
        "eta_t0_l2": diag.surface_norm(state.geom.eta_t, 0.0),
        "accel_l2": diag.volume_norm(accel, 0),
        "dtu0_l2": diag.volume_norm(dtu, 0, grid=grid),
    }
    return AuditReport(before, after, norms, state)
