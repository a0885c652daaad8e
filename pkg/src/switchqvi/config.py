"""JSON run configuration: schema validation, defaults and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, SwitchQVIError
from .grid import Grid, build_grid, default_bounds
from .model import DiffusionSpec, SwitchingProblem
from .qvi import SolverConfig
from .strategy import MCSettings

DEFAULTS = {
    "grid": {"boundary": "neumann_zero"},
    "solver": {},
    "validation": {"probe_step": 1e-3, "n_paths": 1000, "T": None, "sample_points": 256},
    "mc": {"dt": 0.02, "T": None, "n_paths": 10000, "seed": 0, "max_switches": 1000,
           "eps_bind": 1e-7, "eps_disc": 0.0, "log_paths": 0},
    "verify": {"delta": 1.0, "region": "full"},
    "sweep": {"axis": "shift", "values": [0.0, 1.0, 2.0]},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}
DEFAULT_CELLS = {1: 200, 2: 40}


def _schema() -> dict:
    text = resources.files("switchqvi").joinpath("schema/run_config.schema.json").read_text("utf-8")
    return json.loads(text)


def _line_of(text: str, path) -> int | None:
    """Best-effort source line of a JSON path, by walking the object keys."""
    pos, found = 0, False
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
            if m is None:
                break
            pos, found = m.start(), True
    return text.count("\n", 0, pos) + 1 if found else None


def _field(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted configuration; ``data`` is what the config hash covers."""

    data: dict
    source: str = "<memory>"

    # sections -----------------------------------------------------------
    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def hash(self) -> str:
        hashed = {k: v for k, v in self.data.items() if k not in ("output", "name", "description")}
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        data = copy.deepcopy(self.data)
        data["mc"]["seed"] = int(seed)
        return RunConfig(data, self.source)

    def with_threads(self, threads: int) -> "RunConfig":
        data = copy.deepcopy(self.data)
        data["solver"]["threads"] = int(threads)
        return RunConfig(data, self.source)

    # builders -----------------------------------------------------------
    def problem(self) -> SwitchingProblem:
        p = self.data["problem"]
        try:
            return SwitchingProblem.from_strings(p["generators"], p["costs"], p["discount"],
                                                 coupling=p.get("coupling"), labels=p.get("labels"),
                                                 dim_state=p["dim_state"], dim_noise=p["dim_noise"])
        except SwitchQVIError as exc:
            raise ConfigError(f"problem: {exc}", field="problem") from exc

    def diffusion(self) -> DiffusionSpec:
        d = self.data["diffusion"]
        fam = d["family"]
        need = {"constant": ("b", "sigma"), "affine": ("a", "B", "sigma"),
                "ornstein_uhlenbeck": ("kappa", "theta", "sigma"), "geometric": ("mu", "s"),
                "custom": ("drift", "diffusion")}[fam]
        missing = [k for k in need if k not in d]
        if missing:
            raise ConfigError(f"diffusion.{missing[0]} is required for family {fam!r}",
                              field=f"diffusion.{missing[0]}")
        try:
            spec = {"constant": DiffusionSpec.constant, "affine": DiffusionSpec.affine,
                    "ornstein_uhlenbeck": DiffusionSpec.ornstein_uhlenbeck,
                    "geometric": DiffusionSpec.geometric, "custom": DiffusionSpec.custom}[fam](
                *[d[k] for k in need])
        except (ValueError, SwitchQVIError) as exc:
            raise ConfigError(f"diffusion: {exc}", field="diffusion") from exc
        p = self.data["problem"]
        if spec.dim_state != p["dim_state"] or spec.dim_noise != p["dim_noise"]:
            raise ConfigError(f"diffusion has (k, d) = ({spec.dim_state}, {spec.dim_noise}) but problem "
                              f"declares ({p['dim_state']}, {p['dim_noise']})", field="diffusion")
        return spec

    def grid(self, cells=None) -> Grid:
        g = self.data["grid"]
        try:
            return build_grid(g["bounds"], g["cells"] if cells is None else cells, g["boundary"])
        except SwitchQVIError as exc:
            raise ConfigError(f"grid: {exc}", field="grid") from exc

    def solver(self) -> SolverConfig:
        try:
            return SolverConfig(**self.data["solver"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver: {exc}", field="solver") from exc

    def mc(self) -> MCSettings:
        m = self.data["mc"]
        return MCSettings(dt=m["dt"], T=m["T"], n_paths=m["n_paths"], seed=m["seed"],
                          max_switches=m["max_switches"], log_paths=m["log_paths"])

    def test_points(self) -> list[tuple[list[float], int]]:
        """``(x, mode)`` pairs with 0-based modes."""
        return [(tp["x"], tp["mode"] - 1) for tp in self.data["mc"]["test_points"]]


def parse_config(text: str, source: str = "<memory>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}",
                          line=exc.lineno, column=exc.colno) from exc
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line = _line_of(text, path)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: field {_field(path)}: {err.message}", field=_field(path), line=line)
    return RunConfig(_apply_defaults(raw, text, source), source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}", path=str(path)) from exc
    return parse_config(text, str(path))


def _apply_defaults(raw: dict, text: str, source: str) -> dict:
    data = copy.deepcopy(raw)
    for key, defaults in DEFAULTS.items():
        data[key] = {**copy.deepcopy(defaults), **data.get(key, {})}
    p = data["problem"]
    p.setdefault("dim_state", 1)
    p.setdefault("dim_noise", 1)
    m = len(p["generators"])
    if len(p["costs"]) != m or any(len(row) != m for row in p["costs"]):
        line = _line_of(text, ["problem", "costs"])
        raise ConfigError(f"{source}:{line}: field problem.costs: expected a {m} x {m} matrix",
                          field="problem.costs", line=line)
    for key in ("coupling", "labels"):
        if key in p and len(p[key]) != m:
            line = _line_of(text, ["problem", key])
            raise ConfigError(f"{source}:{line}: field problem.{key}: expected {m} entries",
                              field=f"problem.{key}", line=line)
    k = p["dim_state"]
    g = data["grid"]
    x0 = g.get("x0", [0.0] * k)
    g["x0"] = [float(v) for v in x0]
    g.setdefault("bounds", [list(b) for b in default_bounds(x0)])
    g.setdefault("cells", DEFAULT_CELLS.get(k, 40))
    if isinstance(g["cells"], int):
        g["cells"] = [g["cells"]] * k
    if len(g["bounds"]) != k or len(g["cells"]) != k or len(g["x0"]) != k:
        line = _line_of(text, ["grid"])
        raise ConfigError(f"{source}:{line}: field grid: bounds, cells and x0 need {k} entries",
                          field="grid", line=line)
    data["solver"] = _solver_defaults(data["solver"])
    mc = data["mc"]
    mc.setdefault("test_points", [{"x": g["x0"], "mode": 1}])
    for i, tp in enumerate(mc["test_points"]):
        if tp["mode"] > m or len(tp["x"]) != k:
            line = _line_of(text, ["mc", "test_points"])
            raise ConfigError(f"{source}:{line}: field mc.test_points[{i}]: needs mode <= {m} and {k} coordinates",
                              field=f"mc.test_points[{i}]", line=line)
    v = data["verify"]
    if "resolutions" not in v:
        n = min(g["cells"])
        v["resolutions"] = [max(2, n // 4), max(2, n // 4) * 2, max(2, n // 4) * 4]
    data["sweep"].setdefault("x0", g["x0"])
    return data


def _solver_defaults(section: dict) -> dict:
    try:
        return SolverConfig(**section).to_dict()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}", field="solver") from exc


def canonical_json(obj) -> str:
    """Stable, LF-terminated JSON used for every artifact."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_default, allow_nan=True) + "\n"


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
