"""Flat `key = value` run configuration.

Sections [model] [grid] [boundary] [run] [mfg] [particles] [output] hold
typed keys; `#` starts a comment. Parsing reports *every* error with its
line number instead of stopping at the first one, and
parse_config(serialize(cfg)) reproduces cfg exactly.

The boundary section declares per-edge conditions for the density
(left/right/bottom/top) and, optionally, separate conditions for the
value function (phi_left/...). `phi_b = auto` resolves the Dirichlet
anchor to f^(1-beta)(rho_ref) * extent, the value consistent with the
uniform exact solution, and is re-resolved per beta by the beta sweep.
"""

import math
from dataclasses import dataclass

import numpy as np

from .coupling import MfgProblem, QuasiStationaryRun
from .errors import ConfigError
from .fp import FpStepConfig
from .grid import BoundarySpec, Exit, Grid2D, Inflow, Periodic, ScalarField, Wall
from .model import ModelParams, saturation_power

_EDGE_NAMES = ("periodic", "exit", "wall", "inflow")


@dataclass(frozen=True)
class RunConfig:
    # [model]
    beta: float
    rho_max: float
    sigma: float
    f_floor: float
    # [grid]
    nx: int
    ny: int
    lx: float
    ly: float
    # [boundary]
    left: str
    right: str
    bottom: str
    top: str
    rho_b: float
    phi_left: str
    phi_right: str
    phi_bottom: str
    phi_top: str
    phi_b: str  # decimal literal or "auto"
    rho_ref: float
    # [run]
    t_end: float
    dt: float
    snapshot_every: int
    hjb_mode: str
    diffusion_mode: str
    cfl_safety: float
    rho0_uniform: float
    rho0_bump_amplitude: float
    rho0_bump_x: float
    rho0_bump_y: float
    rho0_bump_width: float
    # [mfg]
    mfg_t_end: float
    mfg_dt: float
    mfg_damping: float
    mfg_tolerance: float
    mfg_max_outer: int
    phi_t_uniform: float
    phi_t_cos_x: float
    phi_t_cos_y: float
    # [particles]
    particle_count: int
    particle_seed: int
    particle_smoothing: int
    # [output]
    output_directory: str

    # -- builders ---------------------------------------------------------

    def params(self):
        return ModelParams(beta=self.beta, rho_max=self.rho_max,
                           sigma=self.sigma, f_floor=self.f_floor)

    def build_grid(self):
        return Grid2D(self.nx, self.ny, self.lx, self.ly)

    def resolved_phi_b(self):
        if self.phi_b == "auto":
            return None  # per-edge, resolved in potential_spec
        return float(self.phi_b)

    def _condition(self, name, phi_value):
        if name == "periodic":
            return Periodic()
        if name == "exit":
            return Exit()
        if name == "wall":
            return Wall()
        return Inflow(rho_b=self.rho_b, phi_b=phi_value)

    def density_spec(self):
        phi_b = self.resolved_phi_b() or 0.0
        return BoundarySpec(*(self._condition(getattr(self, e), phi_b)
                              for e in ("left", "right", "bottom", "top")))

    def potential_spec(self):
        params = self.params()
        fixed = self.resolved_phi_b()

        def anchor(extent):
            if fixed is not None:
                return fixed
            return float(saturation_power(self.rho_ref, 1.0 - params.beta, params)) * extent

        return BoundarySpec(
            self._condition(self.phi_left, anchor(self.lx)),
            self._condition(self.phi_right, anchor(self.lx)),
            self._condition(self.phi_bottom, anchor(self.ly)),
            self._condition(self.phi_top, anchor(self.ly)),
        )

    def build_rho0(self, grid=None):
        grid = grid or self.build_grid()
        a, w = self.rho0_bump_amplitude, self.rho0_bump_width
        cx, cy = self.rho0_bump_x, self.rho0_bump_y
        return ScalarField.from_function(
            grid,
            lambda x, y: self.rho0_uniform
            + a * np.exp(-w * ((x - cx) ** 2 + (y - cy) ** 2)),
        )

    def fp_config(self):
        return FpStepConfig(diffusion_mode=self.diffusion_mode,
                            cfl_safety=self.cfl_safety)

    def quasi_run(self):
        grid = self.build_grid()
        return QuasiStationaryRun(
            params=self.params(),
            grid=grid,
            density_bc=self.density_spec(),
            potential_bc=self.potential_spec(),
            rho0=self.build_rho0(grid),
            t_end=self.t_end,
            dt=self.dt,
            snapshot_every=self.snapshot_every,
            hjb_mode=self.hjb_mode,
            fp=self.fp_config(),
        )

    def build_phi_t(self, grid):
        return ScalarField.from_function(
            grid,
            lambda x, y: self.phi_t_uniform
            + self.phi_t_cos_x * np.cos(2.0 * np.pi * x / grid.lx)
            + self.phi_t_cos_y * np.cos(2.0 * np.pi * y / grid.ly),
        )

    def mfg_problem(self):
        grid = self.build_grid()
        return MfgProblem(
            params=self.params(),
            grid=grid,
            rho0=self.build_rho0(grid),
            phi_T=self.build_phi_t(grid),
            t_end=self.mfg_t_end,
            dt=self.mfg_dt,
            damping=self.mfg_damping,
            tolerance=self.mfg_tolerance,
            max_outer=self.mfg_max_outer,
            fp=self.fp_config(),
        )


# key -> (section, type tag, required, default); defaults marked None are
# derived after parsing (f_floor, rho_ref).
_SCHEMA = {
    "beta": ("model", "float", True, None),
    "rho_max": ("model", "float", True, None),
    "sigma": ("model", "float", True, None),
    "f_floor": ("model", "float", False, None),
    "nx": ("grid", "int", True, None),
    "ny": ("grid", "int", True, None),
    "lx": ("grid", "float", True, None),
    "ly": ("grid", "float", True, None),
    "left": ("boundary", "edge", True, None),
    "right": ("boundary", "edge", True, None),
    "bottom": ("boundary", "edge", True, None),
    "top": ("boundary", "edge", True, None),
    "rho_b": ("boundary", "float", False, 0.0),
    "phi_left": ("boundary", "edge", False, None),
    "phi_right": ("boundary", "edge", False, None),
    "phi_bottom": ("boundary", "edge", False, None),
    "phi_top": ("boundary", "edge", False, None),
    "phi_b": ("boundary", "anchor", False, "auto"),
    "rho_ref": ("boundary", "float", False, None),
    "t_end": ("run", "float", True, None),
    "dt": ("run", "float", True, None),
    "snapshot_every": ("run", "int", False, 20),
    "hjb_mode": ("run", "hjb_mode", False, "sweeping"),
    "diffusion_mode": ("run", "diffusion_mode", False, "implicit"),
    "cfl_safety": ("run", "float", False, 0.9),
    "rho0_uniform": ("run", "float", True, None),
    "rho0_bump_amplitude": ("run", "float", False, 0.0),
    "rho0_bump_x": ("run", "float", False, 1.0),
    "rho0_bump_y": ("run", "float", False, 1.0),
    "rho0_bump_width": ("run", "float", False, 10.0),
    "mfg_t_end": ("mfg", "float", False, 1.0),
    "mfg_dt": ("mfg", "float", False, 0.02),
    "mfg_damping": ("mfg", "float", False, 0.5),
    "mfg_tolerance": ("mfg", "float", False, 1e-6),
    "mfg_max_outer": ("mfg", "int", False, 200),
    "phi_t_uniform": ("mfg", "float", False, 0.0),
    "phi_t_cos_x": ("mfg", "float", False, 0.0),
    "phi_t_cos_y": ("mfg", "float", False, 0.0),
    "count": ("particles", "int", False, 20000),
    "seed": ("particles", "int", False, 0),
    "smoothing": ("particles", "int", False, 1),
    "directory": ("output", "str", False, "out"),
}

# config keys that map to differently named dataclass fields
_FIELD_FOR_KEY = {
    "count": "particle_count",
    "seed": "particle_seed",
    "smoothing": "particle_smoothing",
    "directory": "output_directory",
}

_SECTIONS = ("model", "grid", "boundary", "run", "mfg", "particles", "output")


def _coerce(tag, raw):
    if tag == "int":
        return int(raw)
    if tag == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("not finite")
        return v
    if tag == "str":
        return raw
    if tag == "edge":
        if raw not in _EDGE_NAMES:
            raise ValueError(f"must be one of {', '.join(_EDGE_NAMES)}")
        return raw
    if tag == "anchor":
        if raw == "auto":
            return raw
        float(raw)  # must parse as a number
        return raw
    if tag == "hjb_mode":
        if raw not in ("sweeping", "viscous"):
            raise ValueError("must be 'sweeping' or 'viscous'")
        return raw
    if tag == "diffusion_mode":
        if raw not in ("implicit", "explicit"):
            raise ValueError("must be 'implicit' or 'explicit'")
        return raw
    raise AssertionError(tag)


def parse_config(text):
    """Parse config text into a RunConfig; raises ConfigError carrying
    every (line, message) pair found."""
    errors = []
    values = {}
    key_lines = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                errors.append((lineno, f"unknown section [{name}]"))
                section = None
            else:
                section = name
            continue
        if "=" not in line:
            errors.append((lineno, f"expected 'key = value', got {line!r}"))
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if section is None:
            errors.append((lineno, f"key {key!r} outside any section"))
            continue
        schema = _SCHEMA.get(key)
        if schema is None or schema[0] != section:
            errors.append((lineno, f"unknown key {key!r} in section [{section}]"))
            continue
        if key in values:
            errors.append((lineno, f"duplicate key {key!r}"))
            continue
        try:
            values[key] = _coerce(schema[1], raw)
            key_lines[key] = lineno
        except ValueError as exc:
            errors.append((lineno, f"{key}: bad value {raw!r} ({exc})"))

    for key, (section_name, _tag, required, default) in _SCHEMA.items():
        if key in values:
            continue
        if required:
            errors.append((0, f"missing required key {key!r} in section [{section_name}]"))
        elif default is not None:
            values[key] = default

    if errors:
        raise ConfigError(errors)

    # derived defaults
    values.setdefault("f_floor", 1e-6 * values["rho_max"])
    values.setdefault("rho_ref", 0.5 * values["rho_max"])
    for edge in ("left", "right", "bottom", "top"):
        values.setdefault(f"phi_{edge}", values[edge])

    def line_of(key):
        return key_lines.get(key, 0)

    def check(cond, key, message):
        if not cond:
            errors.append((line_of(key), message))

    check(0.0 <= values["beta"] <= 2.0, "beta", "beta out of [0,2]")
    check(values["rho_max"] > 0.0, "rho_max", "rho_max must be positive")
    check(values["sigma"] >= 0.0, "sigma", "sigma must be nonnegative")
    check(0.0 < values["f_floor"] < values["rho_max"], "f_floor",
          "f_floor must lie in (0, rho_max)")
    check(values["nx"] >= 4 and values["ny"] >= 4, "nx", "need nx, ny >= 4")
    check(values["lx"] > 0.0 and values["ly"] > 0.0, "lx", "extents must be positive")
    for a, b in (("left", "right"), ("bottom", "top")):
        pa, pb = values[a] == "periodic", values[b] == "periodic"
        check(pa == pb, a, f"periodic edges must pair: {a}/{b}")
        pa, pb = values[f"phi_{a}"] == "periodic", values[f"phi_{b}"] == "periodic"
        check(pa == pb, f"phi_{a}", f"periodic edges must pair: phi_{a}/phi_{b}")
    check(values["t_end"] > 0.0, "t_end", "t_end must be positive")
    check(values["dt"] > 0.0, "dt", "dt must be positive")
    check(values["snapshot_every"] >= 1, "snapshot_every", "snapshot_every must be >= 1")
    check(0.0 < values["cfl_safety"] <= 1.0, "cfl_safety", "cfl_safety must lie in (0, 1]")
    check(values["rho0_uniform"] >= 0.0, "rho0_uniform", "rho0_uniform must be nonnegative")
    check(
        values["rho0_uniform"] + max(values["rho0_bump_amplitude"], 0.0) <= values["rho_max"],
        "rho0_uniform", "initial density exceeds rho_max",
    )
    check(values["mfg_dt"] > 0.0 and values["mfg_t_end"] > 0.0, "mfg_dt",
          "mfg horizon and step must be positive")
    check(0.0 < values["mfg_damping"] <= 1.0, "mfg_damping", "damping must lie in (0, 1]")
    check(values["count"] >= 1, "count", "particle count must be >= 1")
    check(values["smoothing"] >= 0, "smoothing", "smoothing must be >= 0")

    if errors:
        raise ConfigError(errors)

    kwargs = {}
    for key, value in values.items():
        kwargs[_FIELD_FOR_KEY.get(key, key)] = value
    return RunConfig(**kwargs)


def _format_value(v):
    if isinstance(v, bool):
        raise AssertionError("no boolean keys")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(config):
    """Canonical text form; parse_config(serialize(c)) == c."""
    lines = []
    current = None
    for key, (section, _tag, _req, _default) in _SCHEMA.items():
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        attr = _FIELD_FOR_KEY.get(key, key)
        lines.append(f"{key} = {_format_value(getattr(config, attr))}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
