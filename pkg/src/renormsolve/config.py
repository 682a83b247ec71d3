"""Run configuration: INI-style sections, parsed into a frozen RunConfig.

Field specs use a small call syntax, e.g. ``dipole(x0=0.3 0.3, x1=0.7 0.7, width=0.1, mass=1)``
or ``constant(value=0.5)``; vector arguments are space-separated decimals.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError, InvalidParameterError
from .renorm import ContinuationSchedule
from .solver import SolveOptions

EXPERIMENTS = ("solve", "continuation", "stability", "zero_order", "diagnose")
OPERATOR_NAMES = ("prototype", "linear-diffusion")
FIELD_KINDS = {
    "c": {"constant": ("value",), "bump": ("center", "width", "mass"), "file": ("path",)},
    "f": {
        "zero": (),
        "cosine": (),
        "cosine_shifted": (),
        "constant": ("value",),
        "bump": ("center", "width", "mass"),
        "dipole": ("x0", "x1", "width", "mass"),
        "file": ("path",),
    },
    "lambda": {"none": (), "power": ("r",)},
    "perturbation": {"cosine": (), "bump": ("center", "width", "mass"), "dipole": ("x0", "x1", "width", "mass")},
}
STRING_ARGS = {"path"}
FORMATS = ("json", "csv")


@dataclass(frozen=True)
class FieldSpec:
    """A named constructor with keyword arguments; numbers stored as tuples of floats."""

    kind: str
    args: tuple = ()

    def get(self, key, default=None):
        return dict(self.args).get(key, default)

    def scalar(self, key, default=None) -> float:
        val = self.get(key)
        if val is None:
            if default is None:
                raise ConfigError(f"{self.kind}: missing argument {key!r}", key)
            return default
        if len(val) != 1:
            raise ConfigError(f"{self.kind}: argument {key!r} must be a single number", key)
        return val[0]

    def vector(self, key) -> tuple:
        val = self.get(key)
        if val is None:
            raise ConfigError(f"{self.kind}: missing argument {key!r}", key)
        return val

    def render(self) -> str:
        parts = []
        for k, v in self.args:
            parts.append(f"{k}={v}" if isinstance(v, str) else f"{k}=" + " ".join(_fmt(x) for x in v))
        return f"{self.kind}({', '.join(parts)})"


_CALL = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*(?:\((.*)\))?\s*$")


def _fmt(x: float) -> str:
    return repr(float(x))


def _number(text: str, key: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a decimal number, got {text!r}", key) from None
    if not math.isfinite(val):
        raise ConfigError(f"{key}: value must be finite", key)
    return val


def parse_field_spec(text: str, slot: str, key: str) -> FieldSpec:
    m = _CALL.match(text)
    if not m:
        raise ConfigError(f"{key}: cannot parse {text!r}", key)
    kind, body = m.group(1), m.group(2)
    allowed = FIELD_KINDS[slot]
    if kind not in allowed:
        raise ConfigError(f"{key}: unknown kind {kind!r} (expected one of {sorted(allowed)})", key)
    args = []
    if body and body.strip():
        for item in body.split(","):
            if "=" not in item:
                raise ConfigError(f"{key}: argument {item.strip()!r} is not name=value", key)
            name, val = (s.strip() for s in item.split("=", 1))
            if name not in allowed[kind]:
                raise ConfigError(f"{key}: {kind} takes no argument {name!r}", f"{key}.{name}")
            if name in STRING_ARGS:
                args.append((name, val))
            else:
                args.append((name, tuple(_number(t, f"{key}.{name}") for t in val.split())))
    return FieldSpec(kind, tuple(args))


@dataclass(frozen=True)
class ProblemConfig:
    operator: str = "prototype"
    p: float = 2.0
    delta: float = 1e-6
    c: FieldSpec = FieldSpec("constant", (("value", (0.0,)),))
    f: FieldSpec = FieldSpec("cosine")
    lam: FieldSpec = FieldSpec("none")
    kappa: float = 1.0


@dataclass(frozen=True)
class MeshConfig:
    domain: str = "interval"
    resolution: int = 64
    lower: float = 0.0
    upper: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "solve"
    name: str = ""
    epsilon: float = 0.0
    members: tuple = (1.0, 2.0, 4.0, 8.0)
    perturbation: FieldSpec = FieldSpec("cosine")
    mode: str = "datum"
    allow_lambda: bool = False

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple = FORMATS
    wall_clock: bool = False


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    solver: SolveOptions = field(default_factory=SolveOptions)
    continuation: ContinuationSchedule = field(default_factory=ContinuationSchedule)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = field(default=".", compare=False)

    def to_ini(self, include_output: bool = True) -> str:
        return dumps(self, include_output)

    def digest(self) -> str:
        """Timestamp-free hash of the resolved configuration (output section excluded)."""
        return hashlib.sha256(dumps(self, include_output=False).encode()).hexdigest()[:12]

    def resolve_path(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_output_directory(self, directory) -> "RunConfig":
        return dataclasses.replace(self, output=dataclasses.replace(self.output, directory=str(directory)))


# --------------------------------------------------------------------------
# Schema
# --------------------------------------------------------------------------

_PROBLEM_KEYS = {"operator", "p", "delta", "c", "f", "lambda", "kappa"}
_MESH_KEYS = {"domain", "resolution", "lower", "upper"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolveOptions)}
_CONT_KEYS = {"epsilons", "k_levels", "n_levels", "stop_tol", "coupled_delta"}
_EXP_KEYS = {"kind", "name", "epsilon", "members", "perturbation", "mode", "allow_lambda"}
_OUT_KEYS = {"directory", "formats", "wall_clock"}
SCHEMA = {
    "problem": _PROBLEM_KEYS,
    "mesh": _MESH_KEYS,
    "solver": _SOLVER_KEYS,
    "continuation": _CONT_KEYS,
    "experiment": _EXP_KEYS,
    "output": _OUT_KEYS,
}
_INT_SOLVER = {"newton_max_iter", "picard_max_iter", "quadrature_order"}
_STR_SOLVER = {"gauge"}


def _bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}", key)


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", key) from None


def _floats(text: str, key: str) -> tuple:
    vals = tuple(_number(t, key) for t in text.split())
    if not vals:
        raise ConfigError(f"{key}: expected at least one number", key)
    return vals


def _wrap(key: str, build):
    try:
        return build()
    except ConfigError:
        raise
    except InvalidParameterError as err:
        raise ConfigError(f"{key}: {err}", key) from None


def parse(text: str, base_dir: str | Path = ".") -> RunConfig:
    """Parse configuration text; unknown sections or keys raise ConfigError naming them."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed configuration: {err}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section)
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", f"{section}.{key}")
    sec = {name: dict(cp[name]) if cp.has_section(name) else {} for name in SCHEMA}

    pr = sec["problem"]
    dp = ProblemConfig()
    operator = pr.get("operator", dp.operator).strip()
    if operator not in OPERATOR_NAMES:
        raise ConfigError(f"problem.operator: unknown operator {operator!r}", "problem.operator")
    problem = ProblemConfig(
        operator=operator,
        p=_number(pr["p"], "problem.p") if "p" in pr else dp.p,
        delta=_number(pr["delta"], "problem.delta") if "delta" in pr else dp.delta,
        c=parse_field_spec(pr["c"], "c", "problem.c") if "c" in pr else dp.c,
        f=parse_field_spec(pr["f"], "f", "problem.f") if "f" in pr else dp.f,
        lam=parse_field_spec(pr["lambda"], "lambda", "problem.lambda") if "lambda" in pr else dp.lam,
        kappa=_number(pr["kappa"], "problem.kappa") if "kappa" in pr else dp.kappa,
    )
    if not problem.p > 1:
        raise ConfigError("problem.p: exponent must be > 1", "problem.p")
    if problem.delta < 0:
        raise ConfigError("problem.delta: must be >= 0", "problem.delta")
    if operator == "linear-diffusion" and problem.p != 2:
        raise ConfigError("problem.p: linear-diffusion requires p = 2", "problem.p")

    ms = sec["mesh"]
    dm = MeshConfig()
    mesh = MeshConfig(
        domain=ms.get("domain", dm.domain).strip(),
        resolution=_int(ms["resolution"], "mesh.resolution") if "resolution" in ms else dm.resolution,
        lower=_number(ms["lower"], "mesh.lower") if "lower" in ms else dm.lower,
        upper=_number(ms["upper"], "mesh.upper") if "upper" in ms else dm.upper,
    )
    if mesh.domain not in ("interval", "unit_square"):
        raise ConfigError(f"mesh.domain: unknown domain {mesh.domain!r}", "mesh.domain")
    if mesh.resolution < 1:
        raise ConfigError("mesh.resolution: must be >= 1", "mesh.resolution")
    if mesh.domain == "interval" and not mesh.upper > mesh.lower:
        raise ConfigError("mesh.upper: must exceed mesh.lower", "mesh.upper")
    if mesh.domain == "unit_square" and ("lower" in ms or "upper" in ms):
        raise ConfigError("mesh.lower/upper apply to the interval only", "mesh.lower" if "lower" in ms else "mesh.upper")

    kw = {}
    for key, val in sec["solver"].items():
        name = f"solver.{key}"
        kw[key] = val.strip() if key in _STR_SOLVER else _int(val, name) if key in _INT_SOLVER else _number(val, name)
    solver = _wrap("solver", lambda: SolveOptions(**kw))

    ct = sec["continuation"]
    kw = {}
    for key in ("epsilons", "k_levels", "n_levels"):
        if key in ct:
            kw[key] = _floats(ct[key], f"continuation.{key}")
    if "stop_tol" in ct:
        kw["stop_tol"] = _number(ct["stop_tol"], "continuation.stop_tol")
    if "coupled_delta" in ct:
        kw["coupled_delta"] = _bool(ct["coupled_delta"], "continuation.coupled_delta")
    continuation = _wrap("continuation", lambda: ContinuationSchedule(**kw))

    ex = sec["experiment"]
    de = ExperimentConfig()
    experiment = ExperimentConfig(
        kind=ex.get("kind", de.kind).strip(),
        name=ex.get("name", de.name).strip(),
        epsilon=_number(ex["epsilon"], "experiment.epsilon") if "epsilon" in ex else de.epsilon,
        members=_floats(ex["members"], "experiment.members") if "members" in ex else de.members,
        perturbation=parse_field_spec(ex["perturbation"], "perturbation", "experiment.perturbation") if "perturbation" in ex else de.perturbation,
        mode=ex.get("mode", de.mode).strip(),
        allow_lambda=_bool(ex["allow_lambda"], "experiment.allow_lambda") if "allow_lambda" in ex else de.allow_lambda,
    )
    if experiment.kind not in EXPERIMENTS:
        raise ConfigError(f"experiment.kind: unknown experiment {experiment.kind!r}", "experiment.kind")
    if experiment.name and not re.fullmatch(r"[\w.-]+", experiment.name):
        raise ConfigError("experiment.name: use letters, digits, '.', '_' or '-'", "experiment.name")
    if experiment.epsilon < 0:
        raise ConfigError("experiment.epsilon: must be >= 0", "experiment.epsilon")
    if experiment.mode not in ("datum", "flux"):
        raise ConfigError(f"experiment.mode: expected datum or flux, got {experiment.mode!r}", "experiment.mode")
    if any(m <= 0 for m in experiment.members):
        raise ConfigError("experiment.members: must be positive", "experiment.members")
    has_lambda = problem.lam.kind != "none"
    if experiment.kind == "zero_order" and not has_lambda:
        raise ConfigError("problem.lambda: the zero_order experiment needs a lambda term", "problem.lambda")
    if has_lambda and experiment.kind not in ("zero_order",) and not experiment.allow_lambda:
        raise ConfigError("problem.lambda: only allowed for zero_order unless experiment.allow_lambda is set", "problem.lambda")

    ou = sec["output"]
    do = OutputConfig()
    formats = tuple(ou["formats"].split()) if "formats" in ou else do.formats
    for fmt in formats:
        if fmt not in FORMATS:
            raise ConfigError(f"output.formats: unknown format {fmt!r}", "output.formats")
    if "json" not in formats:
        formats = ("json",) + formats
    output = OutputConfig(
        directory=ou.get("directory", do.directory).strip(),
        formats=formats,
        wall_clock=_bool(ou["wall_clock"], "output.wall_clock") if "wall_clock" in ou else do.wall_clock,
    )

    cfg = RunConfig(problem, mesh, solver, continuation, experiment, output, str(base_dir))
    for spec_ in (problem.c, problem.f):
        if spec_.kind == "file":
            path = cfg.resolve_path(spec_.get("path", ""))
            if not path.is_file():
                raise ConfigError(f"referenced file {str(path)!r} does not exist", "problem")
    return cfg


def _floats_text(vals) -> str:
    return " ".join(_fmt(v) for v in vals)


def dumps(cfg: RunConfig, include_output: bool = True) -> str:
    """Canonical text of a configuration; every field is written explicitly."""
    pr, ms, sv, ct, ex, ou = cfg.problem, cfg.mesh, cfg.solver, cfg.continuation, cfg.experiment, cfg.output
    lines = [
        "[problem]",
        f"operator = {pr.operator}",
        f"p = {_fmt(pr.p)}",
        f"delta = {_fmt(pr.delta)}",
        f"c = {pr.c.render()}",
        f"f = {pr.f.render()}",
        f"lambda = {pr.lam.render()}",
        f"kappa = {_fmt(pr.kappa)}",
        "",
        "[mesh]",
        f"domain = {ms.domain}",
        f"resolution = {ms.resolution}",
    ]
    if ms.domain == "interval":
        lines += [f"lower = {_fmt(ms.lower)}", f"upper = {_fmt(ms.upper)}"]
    lines += ["", "[solver]"]
    for f_ in dataclasses.fields(SolveOptions):
        val = getattr(sv, f_.name)
        lines.append(f"{f_.name} = {val if isinstance(val, (str, int)) and not isinstance(val, bool) else _fmt(val)}")
    lines += [
        "",
        "[continuation]",
        f"epsilons = {_floats_text(ct.epsilons)}",
        f"k_levels = {_floats_text(ct.k_levels)}",
        f"n_levels = {_floats_text(ct.n_levels)}",
        f"stop_tol = {_fmt(ct.stop_tol)}",
        f"coupled_delta = {str(ct.coupled_delta).lower()}",
        "",
        "[experiment]",
        f"kind = {ex.kind}",
    ]
    if ex.name:
        lines.append(f"name = {ex.name}")
    lines += [
        f"epsilon = {_fmt(ex.epsilon)}",
        f"members = {_floats_text(ex.members)}",
        f"perturbation = {ex.perturbation.render()}",
        f"mode = {ex.mode}",
        f"allow_lambda = {str(ex.allow_lambda).lower()}",
    ]
    if include_output:
        lines += [
            "",
            "[output]",
            f"directory = {ou.directory}",
            f"formats = {' '.join(ou.formats)}",
            f"wall_clock = {str(ou.wall_clock).lower()}",
        ]
    return "\n".join(lines) + "\n"


def to_dict(cfg: RunConfig) -> dict:
    """Resolved configuration as plain data (output section omitted for reproducibility)."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    cp.read_string(dumps(cfg, include_output=False))
    return {s: dict(cp[s]) for s in cp.sections()}


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def bundled_names() -> list[str]:
    root = resources.files("renormsolve") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load(path_or_name) -> RunConfig:
    """Load a config file, or a bundled sample by name (e.g. ``poisson_1d``)."""
    path = Path(path_or_name)
    if path.is_file():
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read {path}: {err}") from None
        return parse(text, base_dir=path.parent)
    name = str(path_or_name)
    if name.endswith(".ini"):
        name = name[:-4]
    if name in bundled_names():
        res = resources.files("renormsolve") / "configs" / f"{name}.ini"
        return parse(res.read_text(), base_dir=".")
    raise ConfigError(f"no such config file or bundled sample: {path_or_name}", "config")
