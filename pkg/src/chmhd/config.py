"""Run configuration: TOML parsing, defaults per experiment and validation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import tomli

from .mesh import Rect
from .physics import PhysParams

KINDS = ("converge", "spinodal", "bubble", "custom")


class ConfigError(ValueError):
    pass


_NUM = (int, float)

# section -> key -> accepted types
SCHEMA: dict[str, dict[str, tuple]] = {
    "domain": {"x0": _NUM, "x1": _NUM, "y0": _NUM, "y1": _NUM, "nx": (int,), "ny": (int,)},
    "time": {"dt": _NUM, "t_end": _NUM},
    "params": {"rho1": _NUM, "rho2": _NUM, "eta1": _NUM, "eta2": _NUM, "sigma1": _NUM,
               "sigma2": _NUM, "m1": _NUM, "m2": _NUM, "mu": _NUM, "gamma": _NUM,
               "epsilon": _NUM, "lam": _NUM, "gravity": (list,)},
    "experiment": {"kind": (str,), "seed": (int,), "psi0": _NUM, "amplitude": _NUM,
                   "center": (list,), "radius": _NUM, "b_far": (list,), "density": (str,),
                   "density_ratio": _NUM, "levels": (list,), "t_final": _NUM, "dt_sweep": (list,), "steps": (int,),
                   "snapshot_times": (list,), "initial": (str,)},
    "solver": {"newton_tol": _NUM, "newton_rtol": _NUM, "newton_max": (int,),
               "jacobian_reuse": (int,), "reuse_contraction": _NUM, "extrapolate": (bool,),
               "check_bounds": (bool,), "check_solve": (bool,)},
    "output": {"directory": (str,), "vtk_every": (int,), "figures": (bool,),
               "energy_csv": (str,), "mass_csv": (str,), "centroid_csv": (str,),
               "table_csv": (str,), "series_csv": (str,)},
}

_UNIT = {"x0": 0.0, "x1": 1.0, "y0": 0.0, "y1": 1.0}
_ONES = dict(rho1=1.0, rho2=1.0, eta1=1.0, eta2=1.0, sigma1=1.0, sigma2=1.0, m1=1.0, m2=1.0,
             mu=1.0, gamma=1.0, epsilon=1.0, lam=1.0, gravity=[0.0, 0.0])
_SOLVER = dict(newton_tol=1e-10, newton_rtol=1e-8, newton_max=20, jacobian_reuse=0,
               reuse_contraction=0.25, extrapolate=False, check_bounds=False, check_solve=True)
_OUTPUT = dict(directory="out", vtk_every=0, figures=True, energy_csv="energy.csv",
               mass_csv="mass.csv", centroid_csv="centroid.csv", table_csv="convergence.csv",
               series_csv="series.csv")


def defaults(kind: str) -> dict:
    """Fully populated default document for an experiment kind."""
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind: unknown kind {kind!r}, expected one of {KINDS}")
    doc = {
        "domain": dict(_UNIT, nx=8, ny=8),
        "time": {"dt": 0.01, "t_end": 0.1},
        "params": dict(_ONES),
        "experiment": {"kind": kind, "seed": 0, "psi0": -0.05, "amplitude": 0.001,
                       "center": [0.5, 0.3], "radius": 0.2, "b_far": [0.0, 1.0],
                       "density": "both", "density_ratio": 1e-3, "levels": [8, 16, 32], "t_final": 0.1,
                       "dt_sweep": [], "steps": 50, "snapshot_times": [],
                       "initial": "spinodal"},
        "solver": dict(_SOLVER),
        "output": dict(_OUTPUT),
    }
    if kind == "spinodal":
        doc["domain"].update(nx=32, ny=32)
        doc["time"] = {"dt": 0.001, "t_end": 1.0}
        doc["params"].update(rho2=1e-3, gamma=0.01, epsilon=0.01)
        doc["experiment"]["snapshot_times"] = [0.0001, 0.05, 0.2, 1.0]
    elif kind == "bubble":
        doc["domain"].update(y1=1.5, nx=64, ny=96)
        doc["time"] = {"dt": 0.001, "t_end": 1.0}
        doc["params"].update(rho1=9.0, rho2=1.0, m1=1e-4, m2=1e-4, epsilon=0.01, gamma=1.0,
                             lam=5.0, gravity=[0.0, -10.0])
        doc["experiment"]["snapshot_times"] = [0.0, 0.25, 0.5, 0.75, 1.0]
        doc["solver"].update(newton_tol=1e-8, jacobian_reuse=15, reuse_contraction=0.5,
                             extrapolate=True)
    elif kind == "custom":
        doc["experiment"]["initial"] = "spinodal"
    return doc


@dataclass
class RunConfig:
    kind: str
    rect: Rect
    nx: int
    ny: int
    dt: float
    t_end: float
    params: PhysParams
    experiment: dict
    solver: dict
    output: dict
    document: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.document)


def _check_types(doc: dict) -> None:
    for section, body in doc.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            types = SCHEMA[section][key]
            ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
            if not ok:
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(f"{section}.{key}: expected {names}, got {type(value).__name__} {value!r}")


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for section, body in user.items():
        out.setdefault(section, {}).update(copy.deepcopy(body))
    return out


def _vec2(doc, section, key):
    v = doc[section][key]
    if len(v) != 2 or not all(isinstance(c, _NUM) and not isinstance(c, bool) for c in v):
        raise ConfigError(f"{section}.{key}: expected a list of two numbers, got {v!r}")
    return [float(c) for c in v]


def build(doc: dict) -> RunConfig:
    """Validate a (possibly partial) document and fill in defaults."""
    _check_types(doc)
    kind = doc.get("experiment", {}).get("kind")
    if kind is None:
        raise ConfigError("missing required key experiment.kind")
    full = _merge(defaults(kind), doc)
    _check_types(full)
    d, t, e = full["domain"], full["time"], full["experiment"]
    try:
        rect = Rect(float(d["x0"]), float(d["x1"]), float(d["y0"]), float(d["y1"]))
    except ValueError as exc:
        raise ConfigError(f"domain: {exc}") from exc
    if d["nx"] < 1 or d["ny"] < 1:
        raise ConfigError(f"domain.nx/ny must be >= 1, got {d['nx']}x{d['ny']}")
    if not t["dt"] > 0:
        raise ConfigError(f"time.dt must be positive, got {t['dt']}")
    if t["t_end"] < 0:
        raise ConfigError(f"time.t_end must be non-negative, got {t['t_end']}")
    p = dict(full["params"])
    p["gravity"] = tuple(_vec2(full, "params", "gravity"))
    try:
        params = PhysParams(**{k: (float(v) if k != "gravity" else v) for k, v in p.items()})
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    e["center"] = _vec2(full, "experiment", "center")
    e["b_far"] = _vec2(full, "experiment", "b_far")
    if e["density"] not in ("matched", "ratio", "both"):
        raise ConfigError(f"experiment.density: expected matched/ratio/both, got {e['density']!r}")
    if e["initial"] not in ("spinodal", "bubble"):
        raise ConfigError(f"experiment.initial: expected spinodal or bubble, got {e['initial']!r}")
    if not e["radius"] > 0:
        raise ConfigError(f"experiment.radius must be positive, got {e['radius']}")
    if kind == "converge" and (len(e["levels"]) < 1 or not all(isinstance(n, int) and n > 0 for n in e["levels"])):
        raise ConfigError(f"experiment.levels: expected positive integers, got {e['levels']!r}")
    for v in e["dt_sweep"]:
        if not (isinstance(v, _NUM) and v > 0):
            raise ConfigError(f"experiment.dt_sweep: entries must be positive numbers, got {v!r}")
    s = full["solver"]
    if not (s["newton_tol"] > 0 and s["newton_rtol"] > 0 and s["newton_max"] >= 1):
        raise ConfigError("solver: tolerances must be positive and newton_max >= 1")
    if s["jacobian_reuse"] < 0:
        raise ConfigError("solver.jacobian_reuse must be >= 0")
    if not 0 < s["reuse_contraction"] <= 1:
        raise ConfigError("solver.reuse_contraction must lie in (0, 1]")
    if not e["density_ratio"] > 0:
        raise ConfigError(f"experiment.density_ratio must be positive, got {e['density_ratio']}")
    return RunConfig(kind=kind, rect=rect, nx=d["nx"], ny=d["ny"], dt=float(t["dt"]),
                     t_end=float(t["t_end"]), params=params, experiment=e, solver=s,
                     output=full["output"], document=full)


def parse_config(text: str, overrides: list[str] | None = None) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    for item in overrides or ():
        apply_override(doc, item)
    return build(doc)


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def parse_value(raw: str) -> Any:
    """TOML literal if it parses as one, else the raw string."""
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_override(doc: dict, item: str) -> dict:
    """Apply ``section.key=value`` to a raw document in place."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected section.key=value")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override {item!r}: key must be section.key")
    section, key = parts
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"override {item!r}: unknown key {section}.{key}")
    doc.setdefault(section, {})[key] = parse_value(raw.strip())
    return doc
