"""Run configuration: an INI file with fixed sections and typed keys.

Grammar (see README): ``[section]`` headers, ``key = value`` lines, ``#`` or
``;`` comments. Unknown sections or keys are errors. Overrides given as
``section.key=value`` replace file values.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapt import AdaptationConfig
from .adjoint import INDICATORS
from .krylov import LinearSolverConfig
from .physics import FUNCTIONAL_KINDS, ConfigError, Stabilization
from .solver import ContinuationConfig

CASES = ("flow", "mms-scalar", "mms-euler", "layer-scalar", "step-scalar")
METHODS = ("hdg", "dg", "both")
MODELS = ("scalar", "euler", "navier-stokes")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "default") else float(t)


SCHEMA = {
    "run": {"case": str, "method": str, "p0": int, "mesh": str, "output_dir": str,
            "j_ref": _opt_float, "target_error": _opt_float, "indicator": str, "write_vtk": _bool, "vtk_subdivision": int,
            "dump_matrices": _bool, "wall_curve": str},
    "model": {"name": str, "mach": float, "aoa": float, "reynolds": float, "gamma": float,
              "prandtl": float, "advection": _floats, "diffusivity": float},
    "functional": {"kind": str},
    "adaptation": {"theta": float, "eps_s": float, "p_max": int, "max_cycles": int,
                   "mode": str, "sensor": str},
    "continuation": {"c0": float, "c1": float, "n0": int, "newton_tol": float,
                     "newton_rtol": float, "max_newton": int, "switch_tol": float,
                     "pure_newton": _bool, "max_cfl_cuts": int},
    "linear": {"restart": int, "rtol": float, "max_iter": int, "fill_level": int,
               "ordering": str, "preconditioner": str},
    "stabilization": {"alpha": _opt_float, "shock_capturing": _bool, "eps0": float,
                      "beta": float, "eta_br2": float},
}


@dataclass
class RunConfig:
    case: str = "flow"
    method: str = "hdg"
    p0: int = 1
    mesh: str = "square:4"
    output_dir: str = "output"
    j_ref: float | None = None
    target_error: float | None = None
    indicator: str = "local-only"
    write_vtk: bool = True
    vtk_subdivision: int = 0
    dump_matrices: bool = False
    wall_curve: str = "none"
    model: dict = field(default_factory=lambda: {"name": "euler"})
    functional: str | None = None
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)
    linear: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    stabilization: Stabilization = field(default_factory=Stabilization)
    source: str = ""

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = {k: getattr(v, k) for k in v.__dataclass_fields__}
            elif isinstance(v, dict):
                v = dict(v)
            out[f.name] = v
        return out


def parse_config(text: str, overrides=(), source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict] = {name: {} for name in SCHEMA}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in parser.items(sec):
            values[sec][key] = raw
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        if sec not in SCHEMA:
            raise ConfigError(f"override {item!r}: unknown section")
        values[sec][key.strip()] = raw.strip()
    typed: dict[str, dict] = {}
    for sec, items in values.items():
        typed[sec] = {}
        for key, raw in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            try:
                typed[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {sec}.{key}: {exc}") from None
    return _build(typed, source)


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, overrides, source=str(path))
    mesh = cfg.mesh
    if ":" not in mesh.split("/")[-1] and not Path(mesh).is_absolute():
        cfg.mesh = str((path.parent / mesh).resolve()) if (path.parent / mesh).exists() else mesh
    return cfg


def _build(t: dict, source: str) -> RunConfig:
    run = t["run"]
    cfg = RunConfig(source=source)
    for key, val in run.items():
        setattr(cfg, key, val)
    if cfg.case not in CASES:
        raise ConfigError(f"case must be one of {CASES}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if cfg.indicator not in INDICATORS:
        raise ConfigError(f"indicator must be one of {INDICATORS}")
    if cfg.p0 < 0:
        raise ConfigError("p0 must be non-negative")
    if cfg.wall_curve not in ("none", "naca0012"):
        raise ConfigError("wall_curve must be 'none' or 'naca0012'")
    model = {"name": _default_model(cfg.case)}
    model.update(t["model"])
    if model["name"] not in MODELS:
        raise ConfigError(f"model name must be one of {MODELS}")
    cfg.model = model
    cfg.functional = t["functional"].get("kind")
    if cfg.functional is not None and cfg.functional not in FUNCTIONAL_KINDS:
        raise ConfigError(f"functional kind must be one of {FUNCTIONAL_KINDS}")
    try:
        cfg.adaptation = AdaptationConfig(**t["adaptation"])
        cfg.continuation = ContinuationConfig(**t["continuation"])
        cfg.linear = LinearSolverConfig(**t["linear"])
        cfg.stabilization = Stabilization(**t["stabilization"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    _check_consistency(cfg)
    return cfg


def _default_model(case: str) -> str:
    return {"mms-scalar": "scalar", "layer-scalar": "scalar", "step-scalar": "scalar",
            "mms-euler": "euler"}.get(case, "euler")


def _check_consistency(cfg: RunConfig) -> None:
    name = cfg.model["name"]
    fun = cfg.functional
    if fun is not None and fun.startswith("viscous") and name != "navier-stokes":
        raise ConfigError(f"functional {fun} requires the navier-stokes model")
    if fun is not None and fun != "mms-volume" and name == "scalar":
        raise ConfigError(f"functional {fun} requires a compressible-flow model")
    if name == "navier-stokes" and not math.isfinite(cfg.model.get("reynolds", math.inf)):
        raise ConfigError("navier-stokes requires model.reynolds")
    if cfg.case in ("mms-scalar", "layer-scalar", "step-scalar") and name != "scalar":
        raise ConfigError(f"case {cfg.case} uses the scalar model")
    if cfg.case == "mms-euler" and name != "euler":
        raise ConfigError("case mms-euler uses the euler model")
    if cfg.case == "flow" and fun is None:
        raise ConfigError("case flow needs [functional] kind")
    if cfg.p0 > cfg.adaptation.p_max:
        raise ConfigError("p0 exceeds adaptation.p_max")
