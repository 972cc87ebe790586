"""TOML run configuration: parsing, validation and object construction.

Every key has a default, so an empty file is a valid configuration.
Validation collects all violations, each prefixed with its field path, and
raises a single :class:`ConfigError`. Unknown sections and keys are
rejected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli

from . import grid as gr
from . import model as md
from . import penrose as pn
from . import solver as so
from .errors import ConfigError

_POS = (lambda v: v > 0, "must be > 0")
_NONNEG = (lambda v: v >= 0, "must be >= 0")


def _pow2(v):
    return v >= 8 and (v & (v - 1)) == 0


def _choice(*opts):
    return (lambda v: v in opts, f"must be one of {list(opts)}")


# (type, default, [(predicate, message), ...])
SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {
        "d": (int, 1, [_choice(1, 2)]),
        "Nx": (int, 32, [(_pow2, "must be a power of two >= 8")]),
        "Nv": (int, 128, [(lambda v: v >= 8 and v % 2 == 0, "must be even and >= 8")]),
        "Vmax": (float, 6.0, [_POS]),
    },
    "physics": {
        "epsilon": (float, 0.1, [_NONNEG]),
        "pressure_law": (str, "power", [_choice("power", "off", "rho_exp")]),
        "pressure_gamma": (float, 2.0, [(lambda v: v > 1, "must be > 1")]),
        "Theta": (float, 0.5, [(lambda v: 0 < v < 1, "must satisfy 0 < Theta < 1")]),
        "mu": (float, 0.5, [_POS]),
        "theta_lower": (float, 0.5, [_POS]),
        "theta_upper": (float, 1.5, [_POS]),
    },
    "time": {
        "dt": (float, 2.5e-3, [_POS]),
        "T_end": (float, 0.5, [_NONNEG]),
        "splitting": (str, "strang", [_choice(*so.SPLITTINGS)]),
        "momentum_mode": (str, "explicit", [_choice(*so.MOMENTUM_MODES)]),
        "coupling": (str, "midpoint", [_choice(*so.COUPLINGS)]),
        "safety": (float, 0.9, [_POS]),
        "interp_order": (int, 3, [_choice(3, 5)]),
        "dealias": (bool, False, []),
    },
    "penrose": {
        "variant": (str, "standard", [_choice("standard", "optimal")]),
        "c_required": (float, 0.1, [_NONNEG]),
        "samples_phi": (int, 64, [_POS]),
        "samples_beta": (int, 48, [_POS]),
        "samples_khat": (int, 32, [_POS]),
        "samples_x_stride": (int, 1, [_POS]),
        "cadence": (int, 20, [_POS]),
        "enabled": (bool, True, []),
        "require": (bool, False, []),
        "band_tol": (float, 1e-6, [_POS]),
    },
    "output": {
        "dir": (str, "out", []),
        "snapshot_every": (int, 0, [_NONNEG]),
    },
    "diagnostics": {
        "sobolev_m": (int, 4, [(lambda v: v >= 1, "must be >= 1")]),
        "sobolev_r": (float, 3.0, [_NONNEG]),
        "tail_tol": (float, gr.DEFAULT_TAIL_TOL, [_POS]),
    },
    "avgops": {
        "ladder": (list, [32, 64, 128], [(lambda v: len(v) >= 2 and all(
            isinstance(n, int) and _pow2(n) for n in v), "must list >= 2 powers of two >= 8")]),
        "T": (float, 1.0, [_POS]),
        "T_values": (list, [0.5, 1.0, 2.0], [(lambda v: len(v) >= 1 and all(
            isinstance(t, (int, float)) and t > 0 for t in v), "must list positive times")]),
        "growth_Nx": (int, 64, [(_pow2, "must be a power of two >= 8")]),
        "time_factor": (int, 1, [_POS]),
        "probes": (int, 16, [(lambda v: v >= 8, "must be >= 8")]),
        "width": (float, 1.0, [_POS]),
        "amplitude": (float, 1.0, [_POS]),
        "ratio": (float, 1.25, [(lambda v: v > 1, "must be > 1")]),
    },
    "flow": {
        "amplitude": (float, 0.5, [_NONNEG]),
        "horizon": (float, 0.5, [_POS]),
        "dt_sub": (float, 1e-3, [_POS]),
    },
}

KINETIC_KEYS = {"maxwellian", "bumps", "modulation"}
BUMP_KEYS = {"amplitude", "center", "width"}
MODULATION_KEYS = {"mode", "amplitude"}
FLUID_SCHEMA = {
    "rho0": (float, 1.0, [_POS]),
    "rho_perturbation_mode": (int, 1, [_NONNEG]),
    "rho_perturbation_amp": (float, 0.1, [(lambda v: abs(v) < 1, "must satisfy |amp| < 1")]),
    "u0": (object, 0.0, []),
}
DEFAULT_MAXWELLIAN = {"amplitude": 0.1 / math.sqrt(math.pi), "center": 0.0, "width": 1.0}


@dataclass
class RunConfig:
    """Validated configuration with constructed domain objects."""

    grid: gr.PhaseGrid
    law: md.PressureLaw
    witness: md.BoundWitness
    solver: so.SolverConfig
    kinetic: md.KineticSpec
    fluid: md.FluidSpec
    output_dir: str
    avgops: dict
    flow: dict
    resolved: dict = field(default_factory=dict)
    source: Optional[str] = None

    def build_initial(self):
        """Initial ``(Distribution, FluidState)``."""
        return md.build_initial(self.grid, self.kinetic, self.fluid)

    def echo(self) -> dict:
        return self.resolved


def _coerce(path: str, typ, value, errs: list):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{path}: expected a number, got {value!r}")
            return None
        value = float(value)
        if not math.isfinite(value):
            errs.append(f"{path}: must be finite")
            return None
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{path}: expected an integer, got {value!r}")
            return None
        return value
    if typ is bool:
        if not isinstance(value, bool):
            errs.append(f"{path}: expected true or false, got {value!r}")
            return None
        return value
    if typ is str:
        if not isinstance(value, str):
            errs.append(f"{path}: expected a string, got {value!r}")
            return None
        return value
    if typ is list:
        if not isinstance(value, list):
            errs.append(f"{path}: expected an array, got {value!r}")
            return None
        return value
    return value


def _section(name: str, table: Any, schema: dict, errs: list) -> dict:
    out = {}
    if not isinstance(table, dict):
        errs.append(f"{name}: expected a table")
        table = {}
    for key in table:
        if key not in schema:
            errs.append(f"{name}.{key}: unknown key")
    for key, (typ, default, checks) in schema.items():
        path = f"{name}.{key}"
        if key in table:
            val = _coerce(path, typ, table[key], errs)
            if val is None:
                continue
        else:
            val = default
        for pred, msg in checks:
            if not pred(val):
                errs.append(f"{path}: {msg}, got {val!r}")
                break
        out[key] = val
    return out


def _vector(path, value, d, errs):
    if isinstance(value, bool):
        errs.append(f"{path}: expected a number or a list of {d} numbers")
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, list) and len(value) == d and all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in value):
        return [float(c) for c in value]
    errs.append(f"{path}: expected a number or a list of {d} numbers, got {value!r}")
    return None


def _bump(path, table, d, errs):
    if not isinstance(table, dict):
        errs.append(f"{path}: expected a table")
        return None
    for key in table:
        if key not in BUMP_KEYS:
            errs.append(f"{path}.{key}: unknown key")
    amp = _coerce(f"{path}.amplitude", float, table.get("amplitude", 0.0), errs)
    width = _coerce(f"{path}.width", float, table.get("width", 1.0), errs)
    center = _vector(f"{path}.center", table.get("center", 0.0), d, errs)
    if amp is not None and amp < 0:
        errs.append(f"{path}.amplitude: must be >= 0, got {amp}")
    if width is not None and width <= 0:
        errs.append(f"{path}.width: must be > 0, got {width}")
    if None in (amp, width, center):
        return None
    return {"amplitude": amp, "center": center, "width": width}


def _kinetic(table, d, errs):
    if not isinstance(table, dict):
        errs.append("initial.kinetic: expected a table")
        table = {}
    for key in table:
        if key not in KINETIC_KEYS:
            errs.append(f"initial.kinetic.{key}: unknown key")
    bumps = []
    if "maxwellian" in table:
        b = _bump("initial.kinetic.maxwellian", table["maxwellian"], d, errs)
        if b:
            bumps.append(b)
    raw = table.get("bumps", [])
    if not isinstance(raw, list):
        errs.append("initial.kinetic.bumps: expected an array of tables")
        raw = []
    for i, t in enumerate(raw):
        b = _bump(f"initial.kinetic.bumps[{i}]", t, d, errs)
        if b:
            bumps.append(b)
    if "maxwellian" not in table and "bumps" not in table:
        bumps.append(dict(DEFAULT_MAXWELLIAN))
    if len(bumps) > 4:
        errs.append(f"initial.kinetic: at most 4 bumps are supported, got {len(bumps)}")
    mod = table.get("modulation", {})
    if not isinstance(mod, dict):
        errs.append("initial.kinetic.modulation: expected a table")
        mod = {}
    for key in mod:
        if key not in MODULATION_KEYS:
            errs.append(f"initial.kinetic.modulation.{key}: unknown key")
    mode = _coerce("initial.kinetic.modulation.mode", int, mod.get("mode", 0), errs)
    amp = _coerce("initial.kinetic.modulation.amplitude", float, mod.get("amplitude", 0.0), errs)
    if mode is not None and mode < 0:
        errs.append("initial.kinetic.modulation.mode: must be >= 0")
    if amp is not None and abs(amp) >= 1:
        errs.append("initial.kinetic.modulation.amplitude: must satisfy |amp| < 1")
    return {"bumps": bumps, "modulation": {"mode": mode, "amplitude": amp}}


def _law(phys) -> md.PressureLaw:
    name = phys["pressure_law"]
    if name == "off":
        return md.PressureLaw.off()
    if name == "rho_exp":
        return md.PressureLaw(lambda r: r * np.exp(-r), lambda r: (1.0 - r) * np.exp(-r),
                              name="rho*exp(-rho)")
    return md.PressureLaw.power(phys["pressure_gamma"])


def parse_dict(data: dict, source: Optional[str] = None) -> RunConfig:
    """Validate a configuration mapping and build a :class:`RunConfig`."""
    errs: list = []
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table")
    known = set(SCHEMA) | {"initial"}
    for key in data:
        if key not in known:
            errs.append(f"{key}: unknown section")
    sec = {name: _section(name, data.get(name, {}), schema, errs)
           for name, schema in SCHEMA.items()}
    init = data.get("initial", {})
    if not isinstance(init, dict):
        errs.append("initial: expected a table")
        init = {}
    for key in init:
        if key not in ("kinetic", "fluid"):
            errs.append(f"initial.{key}: unknown key")
    d = sec["grid"].get("d", 1)
    kin = _kinetic(init.get("kinetic", {}), d, errs)
    flu = _section("initial.fluid", init.get("fluid", {}), FLUID_SCHEMA, errs)
    if "u0" in flu:
        flu["u0"] = _vector("initial.fluid.u0", flu["u0"], d, errs)
    ph = sec["physics"]
    if {"theta_lower", "theta_upper"} <= ph.keys() and ph["theta_lower"] > ph["theta_upper"]:
        errs.append("physics.theta_lower: must not exceed physics.theta_upper")
    if errs:
        raise ConfigError(errs)

    g = sec["grid"]
    try:
        grid = gr.PhaseGrid(g["d"], g["Nx"], g["Nv"], g["Vmax"])
    except ConfigError as exc:
        raise ConfigError([f"grid: {m}" for m in exc.messages]) from None
    t, pe, dg = sec["time"], sec["penrose"], sec["diagnostics"]
    sampling = pn.PenroseSampling(pe["samples_phi"], pe["samples_beta"], pe["samples_khat"],
                                  pe["samples_x_stride"])
    try:
        scfg = so.SolverConfig(
            eps=ph["epsilon"], dt=t["dt"], T_end=t["T_end"], splitting=t["splitting"],
            momentum_mode=t["momentum_mode"], coupling=t["coupling"], safety=t["safety"],
            penrose_cadence=pe["cadence"], penrose_variant=pe["variant"],
            c_required=pe["c_required"], penrose_sampling=sampling,
            penrose_band_tol=pe["band_tol"], penrose_enabled=pe["enabled"],
            require_penrose=pe["require"], tail_tol=dg["tail_tol"], dealias=t["dealias"],
            sobolev_m=dg["sobolev_m"], sobolev_r=dg["sobolev_r"],
            snapshot_every=sec["output"]["snapshot_every"], interp_order=t["interp_order"])
    except ConfigError as exc:
        raise ConfigError([f"time: {m}" for m in exc.messages]) from None
    kinetic = md.KineticSpec(tuple(md.Bump(**b) for b in kin["bumps"]),
                             kin["modulation"]["mode"], kin["modulation"]["amplitude"])
    fluid = md.FluidSpec(flu["rho0"], flu["rho_perturbation_mode"], flu["rho_perturbation_amp"],
                         flu["u0"])
    witness = md.BoundWitness(ph["Theta"], ph["mu"], ph["theta_lower"], ph["theta_upper"])
    resolved = {**sec, "initial": {"kinetic": kin, "fluid": flu}}
    return RunConfig(grid, _law(ph), witness, scfg, kinetic, fluid, sec["output"]["dir"],
                     sec["avgops"], sec["flow"], resolved, source)


def parse_config(path) -> RunConfig:
    """Read and validate a TOML configuration file."""
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = tomli.loads(text.decode("utf-8"))
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_dict(data, str(p))
