"""Experiment configuration: ``key = value`` lines with dotted section prefixes.

The format is the dotted-key subset of TOML, e.g.::

    experiment = "duality"
    instance = "D1"
    n_paths = 1
    seed = 7
    output_dir = "out/d1"
    grid.T = 1.0
    grid.T_tail = 5.0
    grid.n_steps = 1000
    grid.n_tail_steps = 4000

See ``README.md`` for every recognised key.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigParseError, ValidationError
from .instances import REGISTRY

EXPERIMENTS = ("solve", "duality", "compare", "control", "convergence", "apriori")
KERNEL_KINDS = ("exponential", "constant", "polyexp")

DEFAULTS = {
    "solver": {"tol_y": 1e-20, "tol_z": 1e-20, "max_iter": 50, "freeze_mode": "freeze_both", "beta": 0.0},
    "regression": {"mode": None, "basis_degree": 2},
    "duality": {"rel_tol": 1e-3, "refine": None, "budget": None},
    "compare": {"tol": None},
    "control": {"epsilon": 1e-3, "n_random": 10, "random_paths": None, "export_paths": True},
    "convergence": {"from_iteration": 3},
    "apriori": {"scale": 2.0},
}

ALLOWED_TOP = {"experiment", "instance", "n_paths", "seed", "output_dir", "grid", "inline", "pair",
               *DEFAULTS}


@dataclass
class ExperimentConfig:
    experiment: str
    instance: str
    n_paths: int
    seed: int
    output_dir: Path
    grid: dict
    sections: dict
    source: str

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def resolved(self) -> dict:
        """Every knob affecting results, for the manifest."""
        out = {"experiment": self.experiment, "instance": self.instance, "n_paths": self.n_paths,
               "seed": self.seed, "output_dir": str(self.output_dir), "grid": dict(self.grid)}
        out.update(copy.deepcopy(self.sections))
        return out


def _require(raw: dict, key: str, kind, path: str):
    if key not in raw:
        raise ValidationError(f"missing required field '{path}'")
    v = raw[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ValidationError(f"field '{path}' must be an integer, got {v!r}")
    if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise ValidationError(f"field '{path}' must be a number, got {v!r}")
    if kind is str and not isinstance(v, str):
        raise ValidationError(f"field '{path}' must be a string, got {v!r}")
    return float(v) if kind is float else v


def parse_text(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"config parse error: {exc}") from exc


def load_config(path, seed_override=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return validate(parse_text(text), seed_override, source=str(path), base=path.parent)


def validate(raw: dict, seed_override=None, source: str = "<string>", base: Path = Path(".")) -> ExperimentConfig:
    unknown = set(raw) - ALLOWED_TOP
    if unknown:
        raise ValidationError(f"unknown field(s): {', '.join(sorted(unknown))}")
    experiment = _require(raw, "experiment", str, "experiment")
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"field 'experiment' must be one of {EXPERIMENTS}, got {experiment!r}")
    instance = _require(raw, "instance", str, "instance")
    if instance != "inline" and instance not in REGISTRY:
        raise ValidationError(f"field 'instance': unknown instance {instance!r}; known: {sorted(REGISTRY)}")
    if instance == "inline" and "inline" not in raw:
        raise ValidationError("instance = \"inline\" needs an 'inline' section")
    n_paths = _require(raw, "n_paths", int, "n_paths")
    if n_paths < 1:
        raise ValidationError("field 'n_paths' must be >= 1")
    seed = _require(raw, "seed", int, "seed") if seed_override is None else int(seed_override)
    if not 0 <= seed < 2 ** 64:
        raise ValidationError("field 'seed' must lie in [0, 2^64)")
    out = _require(raw, "output_dir", str, "output_dir")
    g = raw.get("grid")
    if not isinstance(g, dict):
        raise ValidationError("missing required field 'grid'")
    grid = {
        "T": _require(g, "T", float, "grid.T"),
        "T_tail": _require(g, "T_tail", float, "grid.T_tail"),
        "n_steps": _require(g, "n_steps", int, "grid.n_steps"),
        "n_tail_steps": _require(g, "n_tail_steps", int, "grid.n_tail_steps"),
    }
    if not grid["T"] > 0:
        raise ValidationError("field 'grid.T' must be positive")
    if not grid["T_tail"] > grid["T"]:
        raise ValidationError("field 'grid.T_tail' must exceed grid.T")
    for k in ("n_steps", "n_tail_steps"):
        if grid[k] < 1:
            raise ValidationError(f"field 'grid.{k}' must be >= 1")
    sections = {}
    for name, defaults in DEFAULTS.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ValidationError(f"field '{name}' must be a section")
        extra = set(given) - set(defaults)
        if extra:
            raise ValidationError(f"unknown field(s): {', '.join(f'{name}.{k}' for k in sorted(extra))}")
        merged = dict(defaults)
        merged.update(given)
        sections[name] = merged
    s = sections["solver"]
    if not (s["tol_y"] > 0 and s["tol_z"] > 0):
        raise ValidationError("fields 'solver.tol_y' and 'solver.tol_z' must be positive")
    if s["max_iter"] < 1:
        raise ValidationError("field 'solver.max_iter' must be >= 1")
    if "pair" in raw:
        sections["pair"] = dict(raw["pair"])
    if "inline" in raw:
        sections["inline"] = _validate_inline(raw["inline"])
    outdir = Path(out)
    if not outdir.is_absolute():
        outdir = base / outdir
    return ExperimentConfig(experiment, instance, n_paths, seed, outdir, grid, sections, source)


def _validate_inline(raw: dict) -> dict:
    """Inline linear instance: kernels ``mu``/``nu`` as ``{kind = ..., params}``, constants otherwise."""
    out = {"C_mu": _require(raw, "C_mu", float, "inline.C_mu"),
           "C_nu": float(raw.get("C_nu", 0.0)),
           "l": float(raw.get("l", 0.0)), "Q": float(raw.get("Q", 1.0)), "P": float(raw.get("P", 0.0))}
    for key in ("mu", "nu"):
        spec = raw.get(key, {"kind": "constant", "c": 0.0})
        if not isinstance(spec, dict) or spec.get("kind") not in KERNEL_KINDS:
            raise ValidationError(f"field 'inline.{key}.kind' must be one of {KERNEL_KINDS}")
        out[key] = dict(spec)
    extra = set(raw) - {"C_mu", "C_nu", "l", "Q", "P", "mu", "nu"}
    if extra:
        raise ValidationError(f"unknown field(s): {', '.join('inline.' + k for k in sorted(extra))}")
    return out
