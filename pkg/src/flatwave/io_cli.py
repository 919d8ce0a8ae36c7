"""Configuration files, persistence formats, plotting, and the command line.

Formats (the public contracts of the package):

* Diagnostics CSV: header ``t,E,D,F2N,Kcal,mass,balance_residual``, one row
  per recorded snapshot, every number printed with 17 significant digits,
  flushed per row.  Sweep tables use ``value,metric`` with ``#``-prefixed
  comment lines carrying the parameter name, fitted order, and monotonicity.
* Snapshots: raw little-endian 64-bit floats, one file per state, fields in
  the order eta, eta_t, u, p, each flattened with x1 fastest, then x2, then
  x3, then component; a text sidecar ``<path>.meta`` records format name,
  version, grid, time, and the run's physical coefficients as ``key = value``
  lines.  Reads validate the version and the byte count.
* Config: one JSON object with sections grid / physics / scheme /
  diagnostics / io / initial_data; unknown keys anywhere are hard errors,
  omitted keys take the reference-configuration defaults visible in the
  section dataclasses below.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 i/o
error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .grid import Grid
from .geometry import NumericsError, SurfaceField, VolumeField
from .dynamics import Compensator, FluidState, SchemeConfig, simulate
from .initial_data import prepare_initial_data
from . import diagnostics as diag
from . import harness

FORMAT_NAME = "flatwave-snapshot"
FORMAT_VERSION = 1
FLOAT_FMT = "%.17g"
SNAPSHOT_FIELDS = ("eta", "eta_t", "u", "p")


class ConfigError(Exception):
    """Base for configuration problems (exit code 2)."""


class ParseError(ConfigError):
    """Config file is not valid JSON; carries position information."""


class ValidationError(ConfigError):
    """Config value out of range or key unknown; names the field."""


class IoError(Exception):
    """Base for persistence problems (exit code 4)."""


class FormatError(IoError):
    """A data file does not match the documented layout."""


class VersionError(IoError):
    """A data file declares an unsupported format version."""


# ======================================================================
# configuration
# ======================================================================


@dataclass(frozen=True)
class GridSection:
    n1: int = 16
    n2: int = 16
    nz: int = 33
    l1: float = 2.0 * math.pi
    l2: float = 2.0 * math.pi
    b: float = 1.0


@dataclass(frozen=True)
class PhysicsSection:
    sigma: float = 1.0
    kappa: float = 0.0


@dataclass(frozen=True)
class SchemeSection:
    dt: float = 2e-3
    end_time: float = 5.0
    mode: str = "split"
    compensator_tau: float = 1.0


@dataclass(frozen=True)
class DiagnosticsSection:
    n: int = 2
    jmax: int = 1
    stride: int = 25
    s_f: float = 4.5


@dataclass(frozen=True)
class IoSection:
    out_dir: str = "out"
    snapshot_stride: int = 0


@dataclass(frozen=True)
class InitialDataSection:
    # each mode is [k1, k2, amplitude] or [k1, k2, amplitude, phase], giving
    # amplitude * cos(2 pi k1 x1 / l1 + 2 pi k2 x2 / l2 + phase)
    eta_modes: tuple = ((1, 0, 0.01), (0, 1, 0.005))
    eta_file: str | None = None
    u: str = "zero"
    u_file: str | None = None


@dataclass(frozen=True)
class SimConfig:
    """Complete run description; defaults are the reference configuration."""

    grid: GridSection = field(default_factory=GridSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    io: IoSection = field(default_factory=IoSection)
    initial_data: InitialDataSection = field(default_factory=InitialDataSection)

    def build_grid(self) -> Grid:
        g = self.grid
        return Grid(g.n1, g.n2, g.nz, g.l1, g.l2, g.b)

    def build_scheme(self) -> SchemeConfig:
        return SchemeConfig(dt=self.scheme.dt, sigma=self.physics.sigma,
                            kappa=self.physics.kappa, mode=self.scheme.mode,
                            tau=self.scheme.compensator_tau)

    def to_dict(self) -> dict:
        out = {}
        for sec in fields(self):
            section = getattr(self, sec.name)
            out[sec.name] = {f.name: _plain(getattr(section, f.name))
                             for f in fields(section)}
        return out


def _plain(value):
    if isinstance(value, tuple):
        return [list(v) if isinstance(v, (tuple, list)) else v for v in value]
    return value


_SECTIONS = {
    "grid": GridSection,
    "physics": PhysicsSection,
    "scheme": SchemeSection,
    "diagnostics": DiagnosticsSection,
    "io": IoSection,
    "initial_data": InitialDataSection,
}


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ValidationError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(
            f"unknown key '{name}.{sorted(unknown)[0]}' (known: {sorted(known)})")
    kwargs = dict(data)
    if name == "initial_data" and "eta_modes" in kwargs:
        kwargs["eta_modes"] = tuple(tuple(m) for m in kwargs["eta_modes"])
    return cls(**kwargs)


def _require_number(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{name} must be a number")


def _require_int(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{name} must be an integer")


def validate_config(cfg: SimConfig) -> SimConfig:
    """Type- and range-check every field, naming the offender in the error."""
    g, s, d = cfg.grid, cfg.scheme, cfg.diagnostics
    for name, value in (("grid.n1", g.n1), ("grid.n2", g.n2), ("grid.nz", g.nz)):
        _require_int(name, value)
        if value <= 0:
            raise ValidationError(f"{name} must be a positive integer")
    for name, value in (("grid.l1", g.l1), ("grid.l2", g.l2), ("grid.b", g.b),
                        ("physics.sigma", cfg.physics.sigma),
                        ("physics.kappa", cfg.physics.kappa),
                        ("scheme.dt", s.dt), ("scheme.end_time", s.end_time),
                        ("scheme.compensator_tau", s.compensator_tau),
                        ("diagnostics.s_f", d.s_f)):
        _require_number(name, value)
    for name, value in (("diagnostics.n", d.n), ("diagnostics.jmax", d.jmax),
                        ("diagnostics.stride", d.stride),
                        ("io.snapshot_stride", cfg.io.snapshot_stride)):
        _require_int(name, value)
    for name, value in (("grid.l1", g.l1), ("grid.l2", g.l2), ("grid.b", g.b)):
        if not value > 0:
            raise ValidationError(f"{name} must be positive")
    if cfg.physics.sigma < 0:
        raise ValidationError("physics.sigma must be >= 0")
    if cfg.physics.kappa < 0:
        raise ValidationError("physics.kappa must be >= 0")
    if not s.dt > 0:
        raise ValidationError("scheme.dt must be positive")
    if not s.end_time > 0:
        raise ValidationError("scheme.end_time must be positive")
    if s.mode not in ("split", "coupled"):
        raise ValidationError("scheme.mode must be 'split' or 'coupled'")
    if not s.compensator_tau > 0:
        raise ValidationError("scheme.compensator_tau must be positive")
    if d.n < 1:
        raise ValidationError("diagnostics.n must be >= 1")
    if d.jmax not in (0, 1):
        raise ValidationError("diagnostics.jmax must be 0 or 1")
    if d.stride < 1:
        raise ValidationError("diagnostics.stride must be >= 1")
    if cfg.io.snapshot_stride < 0:
        raise ValidationError("io.snapshot_stride must be >= 0")
    idata = cfg.initial_data
    if idata.u not in ("zero", "file"):
        raise ValidationError("initial_data.u must be 'zero' or 'file'")
    if idata.u == "file" and not idata.u_file:
        raise ValidationError("initial_data.u_file is required when u = 'file'")
    for i, mode in enumerate(idata.eta_modes):
        if len(mode) not in (3, 4):
            raise ValidationError(
                f"initial_data.eta_modes[{i}] must be [k1, k2, amp(, phase)]")
        for entry in mode:
            _require_number(f"initial_data.eta_modes[{i}]", entry)
    return cfg


def config_from_dict(data: dict) -> SimConfig:
    if not isinstance(data, dict):
        raise ValidationError("config root must be a JSON object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValidationError(
            f"unknown section '{sorted(unknown)[0]}' (known: {sorted(_SECTIONS)})")
    sections = {}
    for name, cls in _SECTIONS.items():
        try:
            sections[name] = _build_section(name, cls, data.get(name, {}))
        except TypeError as exc:
            raise ValidationError(f"section '{name}': {exc}") from exc
    return validate_config(SimConfig(**sections))


def load_config(path) -> SimConfig:
    """Parse and validate a JSON config file; defaults fill omitted keys."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def save_config(cfg: SimConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def build_initial_surface(cfg: SimConfig, grid: Grid) -> SurfaceField:
    """Surface elevation from the inline mode list or a raw file."""
    idata = cfg.initial_data
    if idata.eta_file:
        vals = _read_raw(idata.eta_file, (grid.n1, grid.n2))
        return SurfaceField(grid, vals)
    X1 = grid.x1[:, None]
    X2 = grid.x2[None, :]
    vals = np.zeros((grid.n1, grid.n2))
    for mode in idata.eta_modes:
        k1, k2, amp = mode[0], mode[1], mode[2]
        phase = mode[3] if len(mode) > 3 else 0.0
        vals += amp * np.cos(2 * np.pi * k1 * X1 / grid.l1
                             + 2 * np.pi * k2 * X2 / grid.l2 + phase)
    return SurfaceField(grid, vals)


def build_initial_velocity(cfg: SimConfig, grid: Grid) -> np.ndarray:
    idata = cfg.initial_data
    if idata.u == "file":
        return _read_raw(idata.u_file, (grid.n1, grid.n2, grid.nz, 3))
    return np.zeros((grid.n1, grid.n2, grid.nz, 3))


# ======================================================================
# diagnostics CSV
# ======================================================================


class DiagnosticsWriter:
    """Streaming CSV writer for EnergyReports, flushed per row."""

    def __init__(self, path):
        self.path = Path(path)
        self._handle = open(self.path, "w")
        self._handle.write(",".join(diag.EnergyReport.COLUMNS) + "\n")
        self._handle.flush()

    def write(self, report: diag.EnergyReport) -> None:
        self._handle.write(",".join(FLOAT_FMT % v for v in report.row()) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_diagnostics(reports, path) -> None:
    """Write a finite report stream as CSV (header first, 17 digits)."""
    with DiagnosticsWriter(path) as writer:
        for report in reports:
            writer.write(report)


def read_diagnostics(path) -> dict:
    """Read a diagnostics CSV back into column arrays keyed by name."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"diagnostics file not found: {path}")
    with open(path) as handle:
        header = handle.readline().strip().split(",")
        rows = [line.strip().split(",") for line in handle if line.strip()]
    if header != list(diag.EnergyReport.COLUMNS):
        raise FormatError(f"{path}: unexpected header {header}")
    data = np.array([[float(v) for v in row] for row in rows]) if rows else \
        np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_sweep(result: harness.SweepResult, path) -> None:
    """Persist a sweep table: comment lines, then value,metric rows."""
    with open(path, "w") as handle:
        handle.write(f"# parameter = {result.parameter}\n")
        handle.write(f"# order = {FLOAT_FMT % result.order}\n")
        handle.write(f"# monotone = {result.monotone}\n")
        handle.write("value,metric\n")
        for v, d in zip(result.values, result.metrics):
            handle.write(f"{FLOAT_FMT % v},{FLOAT_FMT % d}\n")
        handle.flush()


def read_sweep(path) -> tuple:
    """Read a sweep table; returns (values, metrics) arrays."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"sweep file not found: {path}")
    values, metrics = [], []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("value"):
                continue
            v, d = line.split(",")
            values.append(float(v))
            metrics.append(float(d))
    return np.array(values), np.array(metrics)


# ======================================================================
# snapshots
# ======================================================================


def _read_raw(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IoError(f"data file not found: {path}")
    raw = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise FormatError(f"{path}: expected {expected} floats, found {raw.size}")
    return raw.reshape(shape, order="F").copy()


def write_snapshot(state: FluidState, path, sigma: float = 0.0,
                   kappa: float = 0.0) -> None:
    """Write a state as raw little-endian floats plus a text sidecar."""
    path = Path(path)
    grid = state.grid
    eta_t = state.geom.eta_t.values if state.geom.eta_t is not None else \
        np.zeros((grid.n1, grid.n2))
    blocks = [state.eta.values, eta_t, state.u.values, state.p.values]
    with open(path, "wb") as handle:
        for block in blocks:
            handle.write(np.asarray(block, dtype="<f8").ravel(order="F").tobytes())
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n1": grid.n1, "n2": grid.n2, "nz": grid.nz,
        "l1": FLOAT_FMT % grid.l1, "l2": FLOAT_FMT % grid.l2,
        "b": FLOAT_FMT % grid.b,
        "t": FLOAT_FMT % state.t,
        "sigma": FLOAT_FMT % sigma,
        "kappa": FLOAT_FMT % kappa,
        "fields": ",".join(SNAPSHOT_FIELDS),
    }
    with open(str(path) + ".meta", "w") as handle:
        for key, value in meta.items():
            handle.write(f"{key} = {value}\n")


def read_sidecar(path) -> dict:
    meta_path = Path(str(path) + ".meta")
    if not meta_path.exists():
        raise IoError(f"snapshot sidecar not found: {meta_path}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def read_snapshot(path) -> FluidState:
    """Rebuild a FluidState from a snapshot file and its sidecar."""
    path = Path(path)
    meta = read_sidecar(path)
    if meta.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: not a {FORMAT_NAME} file")
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise VersionError(
            f"{path}: version {meta.get('version')} unsupported "
            f"(expected {FORMAT_VERSION})")
    n1, n2, nz = int(meta["n1"]), int(meta["n2"]), int(meta["nz"])
    grid = Grid(n1, n2, nz, float(meta["l1"]), float(meta["l2"]),
                float(meta["b"]))
    if not path.exists():
        raise IoError(f"snapshot not found: {path}")
    raw = np.fromfile(path, dtype="<f8")
    sizes = [n1 * n2, n1 * n2, n1 * n2 * nz * 3, n1 * n2 * nz]
    if raw.size != sum(sizes):
        raise FormatError(
            f"{path}: expected {sum(sizes)} floats, found {raw.size}")
    parts = np.split(raw, np.cumsum(sizes)[:-1])
    eta = SurfaceField(grid, parts[0].reshape((n1, n2), order="F").copy())
    eta_t = SurfaceField(grid, parts[1].reshape((n1, n2), order="F").copy())
    u = VolumeField(grid, parts[2].reshape((n1, n2, nz, 3), order="F").copy())
    p = VolumeField(grid, parts[3].reshape((n1, n2, nz), order="F").copy())
    state = FluidState(grid, float(meta["t"]), eta, u, p)
    state.geom = state.geom.with_eta_t(eta_t)
    return state


# ======================================================================
# plots
# ======================================================================


PLOT_SCRIPT_NAME = "plot_results.py"

_PLOT_TEMPLATE = '''\
#!/usr/bin/env python3
"""Self-contained plot script generated alongside the result tables."""
import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = Path(__file__).parent


def read_csv(name):
    rows = []
    with open(HERE / name) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split(","))
    header, data = rows[0], rows[1:]
    cols = {{name: [float(r[i]) for r in data] for i, name in enumerate(header)}}
    return cols

{body}
print("plots written next to the tables")
'''

_ENERGY_SNIPPET = '''
cols = read_csv("{csv}")
plt.figure(figsize=(6, 4))
plt.semilogy(cols["t"], cols["E"], marker=".")
plt.xlabel("t")
plt.ylabel("E")
plt.title("truncated energy")
plt.tight_layout()
plt.savefig(HERE / "energy_decay.png", dpi=150)
plt.close()
'''

_SWEEP_SNIPPET = '''
values, metrics = read_csv("{csv}")["value"], read_csv("{csv}")["metric"]
pairs = [(v, d) for v, d in zip(values, metrics) if v > 0 and d > 0]
plt.figure(figsize=(6, 4))
if pairs:
    plt.loglog([p[0] for p in pairs], [p[1] for p in pairs], marker="o")
else:
    plt.text(0.5, 0.5, "no nonzero sweep points", ha="center")
plt.xlabel("{param}")
plt.ylabel("d")
plt.title("{param}-limit divergence")
plt.tight_layout()
plt.savefig(HERE / "{png}", dpi=150)
plt.close()
'''

_EMPTY_SNIPPET = '''
# {param} sweep table has no data rows; nothing to draw for it.
'''


def emit_plots(out_dir, diagnostics_csv=None, sigma_csv=None, kappa_csv=None,
               render: bool = True) -> Path:
    """Write (and by default run) a self-contained plotting script.

    Inputs are paths relative to out_dir or absolute; missing files raise
    IoError.  The script only references files that exist at emission time;
    sweep tables without data rows get a placeholder note.  Inputs inside
    out_dir are embedded relative to the script, so the script keeps working
    when the directory moves as a whole; inputs outside out_dir are embedded
    as absolute paths and pin the script to this machine.  With render=True
    the figures are also written immediately.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = []

    def resolve(name):
        p = Path(name)
        if not p.is_absolute():
            p = out / p
        if not p.exists():
            raise IoError(f"plot input not found: {p}")
        return p

    def embed(p: Path) -> str:
        try:
            return p.resolve().relative_to(out.resolve()).as_posix()
        except ValueError:
            return str(p.resolve())

    if diagnostics_csv is not None:
        p = resolve(diagnostics_csv)
        body.append(_ENERGY_SNIPPET.format(csv=embed(p)))
    for param, csv_path, png in (("sigma", sigma_csv, "sigma_limit.png"),
                                 ("kappa", kappa_csv, "kappa_limit.png")):
        if csv_path is None:
            continue
        p = resolve(csv_path)
        values, _ = read_sweep(p)
        if values.size == 0:
            body.append(_EMPTY_SNIPPET.format(param=param))
        else:
            body.append(_SWEEP_SNIPPET.format(csv=embed(p), param=param, png=png))
    if not body:
        raise IoError("emit_plots needs at least one input table")

    script = out / PLOT_SCRIPT_NAME
    script.write_text(_PLOT_TEMPLATE.format(body="".join(body)))
    if render:
        _render_plots(out, diagnostics_csv, sigma_csv, kappa_csv)
    return script


def _render_plots(out: Path, diagnostics_csv, sigma_csv, kappa_csv) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if diagnostics_csv is not None:
        cols = read_diagnostics(out / diagnostics_csv if not Path(
            diagnostics_csv).is_absolute() else diagnostics_csv)
        plt.figure(figsize=(6, 4))
        plt.semilogy(cols["t"], cols["E"], marker=".")
        plt.xlabel("t")
        plt.ylabel("E")
        plt.title("truncated energy")
        plt.tight_layout()
        plt.savefig(out / "energy_decay.png", dpi=150)
        plt.close()
    for csv_path, param, png in ((sigma_csv, "sigma", "sigma_limit.png"),
                                 (kappa_csv, "kappa", "kappa_limit.png")):
        if csv_path is None:
            continue
        p = Path(csv_path)
        values, metrics = read_sweep(out / p if not p.is_absolute() else p)
        mask = (values > 0) & (metrics > 0)
        plt.figure(figsize=(6, 4))
        if mask.any():
            plt.loglog(values[mask], metrics[mask], marker="o")
        else:
            plt.text(0.5, 0.5, "no nonzero sweep points", ha="center")
        plt.xlabel(param)
        plt.ylabel("d")
        plt.title(f"{param}-limit divergence")
        plt.tight_layout()
        plt.savefig(out / png, dpi=150)
        plt.close()


# ======================================================================
# command-line interface
# ======================================================================


def _prepare_state(cfg: SimConfig, grid: Grid) -> FluidState:
    eta0 = build_initial_surface(cfg, grid)
    u0 = build_initial_velocity(cfg, grid)
    return prepare_initial_data(eta0, u0, sigma=cfg.physics.sigma)


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    physics = cfg.physics
    scheme = cfg.scheme
    io_sec = cfg.io
    diags = cfg.diagnostics
    if args.sigma is not None:
        physics = replace(physics, sigma=args.sigma)
    if args.kappa is not None:
        physics = replace(physics, kappa=args.kappa)
    if args.dt is not None:
        scheme = replace(scheme, dt=args.dt)
    if args.end_time is not None:
        scheme = replace(scheme, end_time=args.end_time)
    if args.mode is not None:
        scheme = replace(scheme, mode=args.mode)
    if args.stride is not None:
        diags = replace(diags, stride=args.stride)
    if args.out is not None:
        io_sec = replace(io_sec, out_dir=args.out)
    return validate_config(replace(cfg, physics=physics, scheme=scheme,
                                   io=io_sec, diagnostics=diags))


def _load(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    return _apply_overrides(cfg, args)


def _out_dir(cfg: SimConfig) -> Path:
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    grid = cfg.build_grid()
    out = _out_dir(cfg)
    scheme = cfg.build_scheme()
    d = cfg.diagnostics
    state0 = _prepare_state(cfg, grid)
    psi = Compensator(state0.eta, scheme.tau)

    last = [None]
    snap_count = [0]
    final = [state0]
    with DiagnosticsWriter(out / "diagnostics.csv") as writer:
        def observer(step, state):
            report = diag.compute_report(state, scheme.sigma, n=d.n,
                                         jmax=d.jmax, s_f=d.s_f, prev=last[0],
                                         kappa=scheme.kappa, psi=psi)
            last[0] = (state.t, diag.quadratic_energy(state, scheme.sigma))
            final[0] = state
            writer.write(report)
            if cfg.io.snapshot_stride > 0:
                if snap_count[0] % cfg.io.snapshot_stride == 0:
                    write_snapshot(state, out / f"snap_{step:06d}.bin",
                                   sigma=scheme.sigma, kappa=scheme.kappa)
                snap_count[0] += 1

        result = simulate(state0, scheme, cfg.scheme.end_time, psi=psi,
                          stride=d.stride, observer=observer,
                          keep_states=False)
    write_snapshot(final[0], out / "final.bin", sigma=scheme.sigma,
                   kappa=scheme.kappa)
    print(f"simulated {result.steps} steps to t = {result.times[-1]:g}; "
          f"diagnostics in {out / 'diagnostics.csv'}")
    return 0


def _cmd_sweep(args, parameter: str) -> int:
    cfg = _load(args)
    grid = cfg.build_grid()
    out = _out_dir(cfg)
    scheme = cfg.build_scheme()
    d = cfg.diagnostics
    eta0 = build_initial_surface(cfg, grid)
    u0 = build_initial_velocity(cfg, grid)

    if parameter == "sigma":
        values = _parse_values(args.sigmas, harness.DEFAULT_SIGMAS)
        runner = harness.run_sigma_sweep
    else:
        values = _parse_values(args.kappas, harness.DEFAULT_KAPPAS)
        runner = harness.run_kappa_sweep

    table = out / f"sweep_{parameter}.csv"
    try:
        result = runner(eta0, u0, scheme, cfg.scheme.end_time, values,
                        stride=d.stride, n=d.n, jmax=d.jmax, s_f=d.s_f)
    except harness.SweepAborted as exc:
        _persist_sweep(exc.partial, table, out, parameter)
        print(f"sweep aborted: {exc}", file=sys.stderr)
        raise
    _persist_sweep(result, table, out, parameter)
    print(result.summary())
    print(f"table in {table}")
    return 0


def _persist_sweep(result: harness.SweepResult, table: Path, out: Path,
                   parameter: str) -> None:
    write_sweep(result, table)
    for value, reports in zip(result.values, result.reports):
        write_diagnostics(reports, out / f"diag_{parameter}_{value:g}.csv")
    if result.baseline_reports:
        write_diagnostics(result.baseline_reports,
                          out / f"diag_{parameter}_baseline.csv")


def _cmd_decay(args) -> int:
    cfg = _load(args)
    grid = cfg.build_grid()
    out = _out_dir(cfg)
    scheme = cfg.build_scheme()
    d = cfg.diagnostics
    eta0 = build_initial_surface(cfg, grid)
    u0 = build_initial_velocity(cfg, grid)
    if args.window:
        try:
            lo, hi = (float(x) for x in args.window.split(","))
        except ValueError as exc:
            raise ValidationError(
                f"bad fit window {args.window!r}: expected 'lo,hi'") from exc
        window = (lo, hi)
    else:
        window = harness.DEFAULT_FIT_WINDOW
    try:
        report = harness.run_decay(eta0, u0, scheme, cfg.scheme.end_time,
                                   fit_window=window, stride=d.stride, n=d.n,
                                   jmax=d.jmax, s_f=d.s_f)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    write_diagnostics(report.reports, out / "decay_diagnostics.csv")
    (out / "decay_report.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def _cmd_check_data(args) -> int:
    cfg = _load(args)
    grid = cfg.build_grid()
    eta0 = build_initial_surface(cfg, grid)
    u0 = build_initial_velocity(cfg, grid)
    report = harness.audit_data(u0, eta0, sigma=cfg.physics.sigma)
    print(report.summary())
    return 0


def _cmd_diagnose(args) -> int:
    state = read_snapshot(args.snapshot)
    meta = read_sidecar(args.snapshot)
    sigma = args.sigma if args.sigma is not None else float(meta["sigma"])
    report = diag.compute_report(state, sigma)
    for name, value in zip(diag.EnergyReport.COLUMNS, report.row()):
        print(f"{name} = {FLOAT_FMT % value}")
    return 0


def _cmd_plot(args) -> int:
    script = emit_plots(args.dir, diagnostics_csv=args.diagnostics,
                        sigma_csv=args.sigma_sweep, kappa_csv=args.kappa_sweep,
                        render=not args.no_render)
    print(f"plot script written to {script}")
    return 0


def _parse_values(text, default) -> tuple:
    if text is None:
        return tuple(default)
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValidationError("sweep value list is empty")
    try:
        return tuple(float(v) for v in items)
    except ValueError as exc:
        raise ValidationError(f"bad sweep value: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flatwave",
        description="batch simulator for viscous surface waves on a slab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults: reference run)")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--sigma", type=float, help="capillary coefficient override")
        p.add_argument("--kappa", type=float, help="smoothing coefficient override")
        p.add_argument("--dt", type=float, help="time step override")
        p.add_argument("--end-time", dest="end_time", type=float,
                       help="final time override")
        p.add_argument("--mode", choices=("split", "coupled"),
                       help="stepping mode override")
        p.add_argument("--stride", type=int, help="diagnostics stride override")

    p = sub.add_parser("simulate", help="run one simulation with diagnostics")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep-sigma", help="capillary-limit sweep")
    common(p)
    p.add_argument("--sigmas", help="comma-separated values (default reference)")
    p.set_defaults(func=lambda a: _cmd_sweep(a, "sigma"))

    p = sub.add_parser("sweep-kappa", help="smoothing-limit sweep")
    common(p)
    p.add_argument("--kappas", help="comma-separated values (default reference)")
    p.set_defaults(func=lambda a: _cmd_sweep(a, "kappa"))

    p = sub.add_parser("decay", help="small-data energy-decay fit")
    common(p)
    p.add_argument("--window", help="fit window 'lo,hi' (default 1,5)")
    p.set_defaults(func=_cmd_decay)

    p = sub.add_parser("check-data", help="audit and repair initial data")
    common(p)
    p.set_defaults(func=_cmd_check_data)

    p = sub.add_parser("diagnose", help="report diagnostics of a snapshot")
    p.add_argument("--snapshot", required=True, help="snapshot file")
    p.add_argument("--sigma", type=float,
                   help="capillary coefficient (default: sidecar value)")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("plot", help="render figures and emit the plot script")
    p.add_argument("--dir", required=True, help="directory with result tables")
    p.add_argument("--diagnostics", help="diagnostics CSV name")
    p.add_argument("--sigma-sweep", dest="sigma_sweep", help="sigma sweep table")
    p.add_argument("--kappa-sweep", dest="kappa_sweep", help="kappa sweep table")
    p.add_argument("--no-render", action="store_true",
                   help="write the script only, skip rendering")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, harness.SweepAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
