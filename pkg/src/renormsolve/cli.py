"""Command-line entry point: run an experiment described by a config file.

Exit codes: 0 success, 1 internal error, 2 configuration or parameter error,
3 non-convergence, 4 non-finite numbers, 5 report I/O failure, 6 assumption
or compatibility violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from typing import Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import RunConfig
from .discretization import DiscreteField, Interval, Mesh, build_mesh, lp_norm, median, nodal_gap, read_snapshot
from .errors import ConfigError, RenormError
from .model import (
    AnalyticDatum,
    OperatorSpec,
    bump,
    cosine_datum,
    dipole,
    make_linear_diffusion,
    make_power_lambda,
    make_prototype,
    prepare_datum,
    regularize,
    unregularized,
    validate_assumptions,
    with_lambda,
)
from .renorm import apriori_report, epsilon_continuation, stability_experiment, weak_upgrade_check
from .report import SCHEMA_VERSION, RunReport, emit_report
from .solver import fixed_point_solve, zero_order_solve

log = logging.getLogger("renormsolve")

LOG_ENV = "RENORMSOLVE_LOG"
SEED = 0
COMMANDS = {
    "solve": "solve",
    "continue": "continuation",
    "stability": "stability",
    "zero-order": "zero_order",
    "diagnose": "diagnose",
}


# --------------------------------------------------------------------------
# Building problem objects from a config
# --------------------------------------------------------------------------


def make_mesh(cfg: RunConfig) -> Mesh:
    m = cfg.mesh
    domain = Interval(m.lower, m.upper) if m.domain == "interval" else "unit_square"
    return build_mesh(domain, m.resolution)


def _file_field(cfg: RunConfig, spec, mesh: Mesh) -> DiscreteField:
    path = cfg.resolve_path(spec.get("path"))
    other, values = read_snapshot(path)
    if values is None:
        raise ConfigError(f"snapshot {path} carries no nodal values", "problem")
    if other.nodes.shape != mesh.nodes.shape or not np.allclose(other.nodes, mesh.nodes, rtol=0, atol=1e-12):
        raise ConfigError(f"snapshot {path} was written on a different mesh", "problem")
    return DiscreteField(mesh, values.nodal_values)


def _point(spec, key: str, dim: int) -> tuple:
    vec = spec.vector(key)
    if len(vec) != dim:
        raise ConfigError(f"{spec.kind}: {key} needs {dim} coordinates", key)
    return vec


def make_coefficient(cfg: RunConfig, mesh: Mesh) -> DiscreteField:
    spec = cfg.problem.c
    if spec.kind == "constant":
        return mesh.constant(spec.scalar("value"))
    if spec.kind == "bump":
        b = bump(_point(spec, "center", mesh.dimension), spec.scalar("width"), spec.scalar("mass", 1.0))
        return mesh.interpolate(b)
    return _file_field(cfg, spec, mesh)


def _analytic(spec, mesh: Mesh):
    d = mesh.dimension
    if spec.kind == "zero":
        return AnalyticDatum(lambda x: np.zeros(len(x)), 0.0, "zero")
    if spec.kind == "cosine":
        return cosine_datum(d)
    if spec.kind == "cosine_shifted":
        # u - Laplacian(u) for u = prod cos(pi x_i)
        return AnalyticDatum(lambda x: (1.0 + d * math.pi**2) * np.prod(np.cos(math.pi * x), axis=1), name="cosine_shifted")
    if spec.kind == "constant":
        v = spec.scalar("value")
        return AnalyticDatum(lambda x: np.full(len(x), v), name="constant")
    if spec.kind == "bump":
        return bump(_point(spec, "center", d), spec.scalar("width"), spec.scalar("mass", 1.0))
    if spec.kind == "dipole":
        return dipole(_point(spec, "x0", d), _point(spec, "x1", d), spec.scalar("width"), spec.scalar("mass", 1.0))
    raise ConfigError(f"unsupported datum kind {spec.kind!r}", "problem.f")


def make_datum(cfg: RunConfig, mesh: Mesh):
    """The raw datum: an analytic callable or a nodal field."""
    spec = cfg.problem.f
    if spec.kind == "file":
        return _file_field(cfg, spec, mesh)
    return _analytic(spec, mesh)


def treat_datum(raw, mesh: Mesh, epsilon: float, require_compat: bool) -> DiscreteField:
    # epsilon = 0 means no clamp: the smallest positive float makes 1/epsilon effectively infinite
    eps = epsilon if epsilon > 0 else np.finfo(float).tiny
    return prepare_datum(raw, mesh, eps, require_compat=require_compat)


def make_spec(cfg: RunConfig, mesh: Mesh, f: DiscreteField) -> OperatorSpec:
    pr = cfg.problem
    c = make_coefficient(cfg, mesh)
    if pr.operator == "prototype":
        spec = make_prototype(pr.p, c, f, delta=pr.delta)
    else:
        spec = make_linear_diffusion(c, f, kappa=pr.kappa)
    if pr.lam.kind == "power":
        lam, lam_ds, g = make_power_lambda(pr.lam.scalar("r", 2.0))
        spec = with_lambda(spec, lam, lam_ds, g)
    return spec


def _regularized(spec: OperatorSpec, epsilon: float):
    return regularize(spec, epsilon) if epsilon > 0 else unregularized(spec)


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


def _estimate_summary(rep) -> dict:
    return {
        "epsilon": rep.epsilon,
        "mesh": rep.mesh,
        "M_hat": rep.M_hat,
        "log_estimate": rep.log_estimate,
        "measure_decay_sup": rep.measure_decay_sup,
        "poincare_ratio_max": max(rep.poincare_ratio.values),
        "energy_decay_first": rep.energy_decay.values[0],
        "energy_decay_last": rep.energy_decay.values[-1],
    }


def _field_summary(u: DiscreteField, p: float) -> dict:
    return {
        "n_nodes": u.mesh.n_nodes,
        "median": median(u),
        "nodal_gap": nodal_gap(u),
        "max_abs": u.max_abs(),
        "lp_norm": lp_norm(u, p),
    }


def _counters(solutions) -> dict:
    return {
        "solves": len(solutions),
        "picard_iterations": sum(s.iterations for s in solutions),
        "newton_iterations": sum(sum(s.inner_newton_counts) for s in solutions),
    }


def run_solve(cfg: RunConfig):
    mesh = make_mesh(cfg)
    eps = cfg.experiment.epsilon
    f = treat_datum(make_datum(cfg, mesh), mesh, eps, require_compat=True)
    spec = make_spec(cfg, mesh, f)
    rspec = _regularized(spec, eps)
    sol = fixed_point_solve(mesh, rspec, cfg.solver)
    rep = apriori_report(sol.field, rspec, cfg.continuation)
    body = {
        "solution": {**sol.summary(), "field": _field_summary(sol.field, spec.p)},
        "estimates": _estimate_summary(rep),
    }
    return body, {}, _counters([sol])


def run_continuation(cfg: RunConfig):
    mesh = make_mesh(cfg)
    raw = make_datum(cfg, mesh)
    sched = cfg.continuation
    spec = make_spec(cfg, mesh, treat_datum(raw, mesh, sched.epsilons[0], True))
    sol = epsilon_continuation(mesh, spec, sched, cfg.solver, f_raw=raw)
    reports = [apriori_report(s.field, s.rspec, sched) for s in sol.stages]
    final = reports[-1]
    upgrade = weak_upgrade_check(sol, sol.stages[-1].rspec, sched.k_levels)
    body = {
        "solution": {**sol.summary(), "field": _field_summary(sol.final_field, spec.p)},
        "estimates": {
            "stages": [_estimate_summary(r) for r in reports],
            "final": final.to_dict(),
            "weak_upgrade": upgrade.to_dict(),
        },
    }
    return body, final.curves(), _counters([s.solution for s in sol.stages])


def run_stability(cfg: RunConfig):
    mesh = make_mesh(cfg)
    raw = make_datum(cfg, mesh)
    sched = cfg.continuation
    spec = make_spec(cfg, mesh, treat_datum(raw, mesh, sched.epsilons[0], True))
    ex = cfg.experiment
    members = list(ex.members)
    if ex.mode == "datum":
        g = _analytic(ex.perturbation, mesh)
        if isinstance(raw, DiscreteField):
            g_field = mesh.interpolate(g)
            seq = [(raw + g_field * (1.0 / j), None) for j in members]
        else:
            seq = [(AnalyticDatum(lambda x, j=j: raw(x) + g(x) / j, name=f"member{j:g}"), None) for j in members]
    else:
        base_phi = spec.phi
        seq = [(raw, lambda x, s, c, j=j: (1.0 - 1.0 / j) * base_phi(x, s, c)) for j in members]
    table = stability_experiment(mesh, spec, seq, (raw, None), sched, cfg.solver, labels=[f"{j:g}" for j in members])
    body = {
        "solution": {
            "reference": {**table.reference.summary(), "field": _field_summary(table.reference.final_field, spec.p)},
        },
        "stability": table.to_dict(),
    }
    sols = [s.solution for s in table.reference.stages] + [s.solution for m in table.members for s in m.solution.stages]
    return body, table.curves(), _counters(sols)


def run_zero_order(cfg: RunConfig):
    mesh = make_mesh(cfg)
    eps = cfg.experiment.epsilon
    f = treat_datum(make_datum(cfg, mesh), mesh, eps, require_compat=False)
    spec = make_spec(cfg, mesh, f)
    rspec = _regularized(spec, eps)
    sol = zero_order_solve(mesh, rspec, cfg.solver)
    body = {
        "solution": {**sol.summary(), "field": _field_summary(sol.field, spec.p), "datum_integral": f.integral()},
    }
    return body, {}, _counters([sol])


def run_diagnose(cfg: RunConfig):
    mesh = make_mesh(cfg)
    eps = cfg.experiment.epsilon
    has_lambda = cfg.problem.lam.kind != "none"
    f = treat_datum(make_datum(cfg, mesh), mesh, eps, require_compat=not has_lambda)
    spec = make_spec(cfg, mesh, f)
    report = validate_assumptions(spec)
    defect, l1 = spec.compatibility_defect()
    body = {
        "diagnostics": {
            "assumptions": report.to_dict(),
            "mesh": {"label": mesh.label, "n_nodes": mesh.n_nodes, "n_elements": mesh.n_elements, "h": mesh.h},
            "datum": {"integral": defect, "l1_norm": l1, "max_abs": f.max_abs()},
            "q_exponent": spec.q_exponent if math.isfinite(spec.q_exponent) else None,
        }
    }
    return body, {}, {"solves": 0, "picard_iterations": 0, "newton_iterations": 0}


RUNNERS = {
    "solve": run_solve,
    "continuation": run_continuation,
    "stability": run_stability,
    "zero_order": run_zero_order,
    "diagnose": run_diagnose,
}


def execute(cfg: RunConfig) -> RunReport:
    """Run the configured experiment and assemble its report (nothing is written)."""
    start = time.perf_counter()
    body, curves, counters = RUNNERS[cfg.experiment.kind](cfg)
    timings = dict(counters)
    if cfg.output.wall_clock:
        timings["wall_clock_seconds"] = time.perf_counter() - start
    doc = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "experiment": cfg.experiment.kind,
        "config": cfgmod.to_dict(cfg),
        "config_hash": cfg.digest(),
        "seed": SEED,
        "timings": timings,
        **body,
    }
    return RunReport(cfg.experiment.label, cfg.digest(), doc, curves)


def run_config(path_or_cfg, out: str | None = None) -> tuple[int, list]:
    """Load, run and write; returns (exit status, written paths).  Errors propagate."""
    cfg = path_or_cfg if isinstance(path_or_cfg, RunConfig) else cfgmod.load(path_or_cfg)
    if out is not None:
        cfg = cfg.with_output_directory(out)
    report = execute(cfg)
    directory = cfg.resolve_path(cfg.output.directory) if out is None else out
    return 0, emit_report(report, directory, cfg.output.formats)


# --------------------------------------------------------------------------
# argparse front end
# --------------------------------------------------------------------------


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renormsolve", description="Finite element solver for Neumann problems with L^1 data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "single regularized (or unregularized) weak solve",
        "continue": "epsilon continuation with estimate curves",
        "stability": "stability under perturbed data",
        "zero-order": "problem with a zero-order term",
        "diagnose": "check structural assumptions without solving",
        "run": "run the experiment named in the config",
        "validate-config": "parse a config and print its canonical form",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="config file or bundled sample name")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
    sub.add_parser("list-configs", help="list bundled sample configs")
    return parser


def _error_block(err: BaseException, code: int) -> str:
    kind = getattr(err, "kind", "internal")
    block = {"error": {"kind": kind, "exit_code": code, "message": str(err)}}
    key = getattr(err, "key", None)
    if key:
        block["error"]["key"] = key
    return json.dumps(block, sort_keys=True)


def _with_kind(cfg: RunConfig, kind: str) -> RunConfig:
    if cfg.experiment.kind == kind:
        return cfg
    swapped = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, kind=kind))
    # re-run the cross-field checks for the new experiment kind
    return cfgmod.parse(swapped.to_ini(), base_dir=cfg.base_dir)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.command == "list-configs":
        print("\n".join(cfgmod.bundled_names()))
        return 0
    try:
        cfg = cfgmod.load(args.config)
        if args.command == "validate-config":
            sys.stdout.write(cfg.to_ini())
            print(f"# hash {cfg.digest()}")
            return 0
        if args.command in COMMANDS:
            cfg = _with_kind(cfg, COMMANDS[args.command])
        _, written = run_config(cfg, args.out)
        for path in written:
            print(path)
        return 0
    except RenormError as err:
        failure, code = err, err.exit_code
    except ArithmeticError as err:
        # unclassified numeric trouble from numpy/scipy
        failure, code = err, 4
    except Exception as err:  # noqa: BLE001 - last-resort mapping to the internal code
        log.debug("internal error", exc_info=True)
        failure, code = err, 1
    print(_error_block(failure, code), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
