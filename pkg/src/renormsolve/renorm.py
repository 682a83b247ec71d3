"""Epsilon continuation toward the renormalized limit, plus measured estimates.

Convergence is monitored on truncates T_k(u_eps) rather than on u_eps itself,
since for small p the untruncated field need not settle in any norm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .discretization import (
    DiscreteField,
    Mesh,
    distribution_measure,
    get_quadrature,
    lp_norm,
    median,
    truncate_field,
    w1p_norm,
    w1p_seminorm,
)
from .errors import InvalidParameterError, RenormError, ValidationError
from .model import OperatorSpec, RegularizedSpec, prepare_datum, regularize, validate_assumptions
from .solver import SolveOptions, WeakSolution, fixed_point_solve

log = logging.getLogger(__name__)

SATURATION_TOL = 1e-6


def _strictly_increasing(values, name: str) -> tuple:
    vals = tuple(float(v) for v in values)
    if not vals:
        raise InvalidParameterError(f"{name} must be nonempty")
    if any(v <= 0 or not math.isfinite(v) for v in vals):
        raise InvalidParameterError(f"{name} must be positive and finite")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise InvalidParameterError(f"{name} must be strictly increasing")
    return vals


@dataclass(frozen=True)
class ContinuationSchedule:
    epsilons: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    k_levels: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    n_levels: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    stop_tol: float = 1e-4
    coupled_delta: bool = False

    def __post_init__(self):
        eps = _strictly_increasing(tuple(reversed(tuple(self.epsilons))), "epsilons")
        object.__setattr__(self, "epsilons", tuple(reversed(eps)))
        object.__setattr__(self, "k_levels", _strictly_increasing(self.k_levels, "k_levels"))
        object.__setattr__(self, "n_levels", _strictly_increasing(self.n_levels, "n_levels"))
        if not self.stop_tol > 0:
            raise InvalidParameterError("stop_tol must be > 0")

    @property
    def levels(self) -> tuple:
        """Heights A used for the distribution curve: union of k and n levels."""
        return tuple(sorted(set(self.k_levels) | set(self.n_levels)))

    def delta_for(self, spec: OperatorSpec, epsilon: float) -> float:
        return epsilon if self.coupled_delta else spec.delta


@dataclass
class Curve:
    """A sampled map parameter -> value, tagged with where it came from."""

    name: str
    parameter: str
    parameters: list
    values: list
    tags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "parameter": self.parameter,
            "parameters": list(self.parameters),
            "values": list(self.values),
            "tags": dict(self.tags),
        }

    def rows(self):
        return list(zip(self.parameters, self.values))


@dataclass
class Stage:
    epsilon: float
    field: DiscreteField
    solution: WeakSolution
    rspec: RegularizedSpec


@dataclass
class RenormSolution:
    stages: list
    final_field: DiscreteField
    truncation_distances: dict
    converged: bool
    stop_tol: float

    @property
    def epsilons(self) -> list:
        return [s.epsilon for s in self.stages]

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "epsilons": self.epsilons,
            "stop_tol": self.stop_tol,
            "final_median": median(self.final_field),
            "truncation_distances": {repr(k): list(v) for k, v in self.truncation_distances.items()},
            "stages": [s.solution.summary() for s in self.stages],
        }


# --------------------------------------------------------------------------
# Continuation
# --------------------------------------------------------------------------


def epsilon_continuation(
    mesh: Mesh,
    spec: OperatorSpec,
    schedule: ContinuationSchedule | None = None,
    options: SolveOptions | None = None,
    f_raw=None,
) -> RenormSolution:
    """Solve the regularized problems along the schedule, warm-starting each stage.

    ``f_raw`` is the untreated datum (callable or field); it defaults to ``spec.f``.
    """
    schedule = schedule or ContinuationSchedule()
    options = options or SolveOptions()
    if spec.mesh is not mesh:
        raise InvalidParameterError("spec must live on the given mesh")
    source = spec.f if f_raw is None else f_raw
    p = spec.p
    stages: list[Stage] = []
    distances = {k: [] for k in schedule.k_levels}
    prev = None
    for eps in schedule.epsilons:
        try:
            f_eps = prepare_datum(source, mesh, eps)
            rspec = regularize(spec.with_datum(f_eps), eps, schedule.delta_for(spec, eps))
            sol = fixed_point_solve(mesh, rspec, options, v0=prev)
        except RenormError as err:
            raise err.in_context(f"continuation stage epsilon={eps:g}") from err
        log.info("stage eps=%g: %d Picard iterations", eps, sol.iterations)
        if prev is not None:
            for k in schedule.k_levels:
                d = w1p_norm(truncate_field(sol.field, k) - truncate_field(prev, k), p)
                distances[k].append(d)
        stages.append(Stage(eps, sol.field, sol, rspec))
        prev = sol.field
    converged = len(stages) > 1 and all(distances[k][-1] <= schedule.stop_tol for k in schedule.k_levels)
    return RenormSolution(stages, stages[-1].field, distances, converged, schedule.stop_tol)


# --------------------------------------------------------------------------
# Measured estimates
# --------------------------------------------------------------------------


def _quad_data(u: DiscreteField, order: int = 4):
    mesh = u.mesh
    rule = get_quadrature(mesh.dimension, order)
    X = mesh.quadrature_points(rule)
    ne, nq, d = X.shape
    Uq = u.at_quadrature(rule)
    G = np.repeat(u.gradients(), nq, axis=0)
    W = mesh.element_measures[:, None] * rule.weights[None, :]
    return rule, X.reshape(-1, d), Uq.reshape(-1), G, W.reshape(-1)


def _check_levels(levels, name: str) -> tuple:
    if levels is None or len(levels) == 0:
        raise InvalidParameterError(f"{name} must be nonempty")
    return _strictly_increasing(levels, name)


def _restricted_curve(u, integrand, n_levels, name, tags) -> Curve:
    """n -> (1/n) * integral of integrand over {|u| < n}, indicator tested at quadrature points."""
    rule, X, Uq, G, W = _quad_data(u)
    vals = integrand(X, Uq, G)
    absu = np.abs(Uq)
    out = [float(np.sum(W * vals * (absu < n)) / n) for n in n_levels]
    return Curve(name, "n", list(n_levels), out, tags)


def _tags(u: DiscreteField, rspec: RegularizedSpec) -> dict:
    return {"epsilon": rspec.epsilon, "mesh": u.mesh.label}


def energy_decay_profile(u: DiscreteField, rspec: RegularizedSpec, n_levels: Sequence[float]) -> Curve:
    """n -> (1/n) * integral over {|u| < n} of a_eps(x, u, grad u) . grad u."""
    levels = _check_levels(n_levels, "n_levels")

    def integrand(X, Uq, G):
        return np.sum(rspec.a_eps(X, Uq, G) * G, axis=1)

    return _restricted_curve(u, integrand, levels, "energy_decay", _tags(u, rspec))


def phi_flux_profile(u: DiscreteField, rspec: RegularizedSpec, n_levels: Sequence[float]) -> Curve:
    """n -> (1/n) * integral over {|u| < n} of |Phi_eps(x, u)| |grad u|."""
    levels = _check_levels(n_levels, "n_levels")
    c = rspec.base.c_field

    def integrand(X, Uq, G):
        rule = get_quadrature(u.mesh.dimension, 4)
        Cq = c.at_quadrature(rule).reshape(-1)
        phi = rspec.phi_eps(X, Uq, Cq)
        return np.linalg.norm(phi, axis=1) * np.linalg.norm(G, axis=1)

    return _restricted_curve(u, integrand, levels, "phi_flux_decay", _tags(u, rspec))


def truncation_energy(u: DiscreteField, k: float, p: float) -> float:
    """integral of |grad T_k(u)|^p, with T_k applied nodewise."""
    return w1p_seminorm(truncate_field(u, k), p) ** p


def young_constant(p: float) -> float:
    """Smallest C with 1 + r^(p-1) <= C (1 + r)^(p-1) for all r >= 0."""
    return max(1.0, 2.0 ** (2.0 - p))


def log_estimate_bound(rspec: RegularizedSpec) -> dict:
    """Right side of the log-gradient bound and the constants entering it.

    From a.xi >= alpha|xi|^p - slack, |Phi| <= c(1+|s|^(p-1)) and Young's inequality:
        int |grad u|^p/(1+|u|)^p <= C1^p' alpha^-p' ||c||_p'^p'
                                    + p'/(alpha(p-1)) ||f||_1 + p' slack |Omega| / alpha
    """
    p = rspec.p
    pc = p / (p - 1.0)
    alpha = rspec.alpha
    c1 = young_constant(p)
    c_norm = lp_norm(rspec.base.c_field, pc)
    f_norm = lp_norm(rspec.f, 1.0)
    slack = rspec.coercivity_slack
    measure = rspec.mesh.total_measure
    bound = c1**pc * alpha ** (-pc) * c_norm**pc + pc / (alpha * (p - 1.0)) * f_norm + pc * slack * measure / alpha
    return {
        "bound": float(bound),
        "alpha": alpha,
        "young_constant": c1,
        "c_norm": c_norm,
        "f_l1": f_norm,
        "slack": slack,
    }


def log_gradient_energy(u: DiscreteField, p: float) -> float:
    rule, X, Uq, G, W = _quad_data(u)
    g = np.linalg.norm(G, axis=1)
    return float(np.sum(W * g**p / (1.0 + np.abs(Uq)) ** p))


@dataclass
class EstimateReport:
    epsilon: float
    mesh: str
    p: float
    truncation_energy: Curve
    truncation_ratio: Curve
    M_hat: float
    log_estimate: dict
    measure_decay: Curve
    measure_decay_sup: float
    poincare_ratio: Curve
    energy_decay: Curve
    phi_flux_decay: Curve

    def curves(self) -> dict:
        return {
            c.name: c
            for c in (
                self.truncation_energy,
                self.truncation_ratio,
                self.measure_decay,
                self.poincare_ratio,
                self.energy_decay,
                self.phi_flux_decay,
            )
        }

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "mesh": self.mesh,
            "p": self.p,
            "M_hat": self.M_hat,
            "log_estimate": dict(self.log_estimate),
            "measure_decay_sup": self.measure_decay_sup,
            "curves": {name: c.to_dict() for name, c in self.curves().items()},
        }


def apriori_report(u: DiscreteField, rspec: RegularizedSpec, schedule: ContinuationSchedule | None = None) -> EstimateReport:
    """Measure the quantities bounded by the a priori estimates on one stage field."""
    schedule = schedule or ContinuationSchedule()
    p = rspec.p
    tags = _tags(u, rspec)
    ks = list(schedule.k_levels)

    energies = [truncation_energy(u, k, p) for k in ks]
    ratios = [e / (k + k**p) for e, k in zip(energies, ks)]

    log_bound = log_estimate_bound(rspec)
    log_bound["measured"] = log_gradient_energy(u, p)

    levels = list(schedule.levels)
    decay = [distribution_measure(u, A) * math.log1p(A) for A in levels]

    poincare = []
    for k in ks:
        t = truncate_field(u, k)
        t = t - median(t)
        semi = w1p_seminorm(t, p)
        poincare.append(lp_norm(t, p) / semi if semi > 0 else 0.0)

    return EstimateReport(
        epsilon=rspec.epsilon,
        mesh=u.mesh.label,
        p=p,
        truncation_energy=Curve("truncation_energy", "k", ks, energies, tags),
        truncation_ratio=Curve("truncation_ratio", "k", ks, ratios, tags),
        M_hat=max(ratios),
        log_estimate=log_bound,
        measure_decay=Curve("measure_decay", "A", levels, decay, tags),
        measure_decay_sup=max(decay),
        poincare_ratio=Curve("poincare_ratio", "k", ks, poincare, tags),
        energy_decay=energy_decay_profile(u, rspec, schedule.n_levels),
        phi_flux_decay=phi_flux_profile(u, rspec, schedule.n_levels),
    )


# --------------------------------------------------------------------------
# Stability and weak upgrade
# --------------------------------------------------------------------------


@dataclass
class StabilityMember:
    label: str
    truncate_distances: dict
    lp_distance: float
    solution: RenormSolution

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "truncate_distances": {repr(k): v for k, v in self.truncate_distances.items()},
            "lp_distance": self.lp_distance,
            "converged": self.solution.converged,
        }


@dataclass
class StabilityTable:
    epsilon: float
    k_levels: tuple
    members: list
    reference: RenormSolution

    def distances(self, k: float) -> list:
        return [m.truncate_distances[k] for m in self.members]

    def curves(self) -> dict:
        idx = list(range(1, len(self.members) + 1))
        tags = {"epsilon": self.epsilon, "mesh": self.reference.final_field.mesh.label}
        out = {f"stability_k{k:g}": Curve(f"stability_k{k:g}", "member", idx, self.distances(k), tags) for k in self.k_levels}
        out["stability_lp"] = Curve("stability_lp", "member", idx, [m.lp_distance for m in self.members], tags)
        return out

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "k_levels": list(self.k_levels),
            "members": [m.to_dict() for m in self.members],
        }


def _member_spec(spec: OperatorSpec, phi: Optional[Callable]) -> OperatorSpec:
    return spec if phi is None else replace(spec, phi=phi, phi_is_zero=False)


def stability_experiment(
    mesh: Mesh,
    spec: OperatorSpec,
    data_sequence: Sequence[tuple],
    reference: tuple | None = None,
    schedule: ContinuationSchedule | None = None,
    options: SolveOptions | None = None,
    labels: Sequence[str] | None = None,
) -> StabilityTable:
    """Solve a sequence of perturbed problems and measure their distance to the reference.

    Each member is ``(f_j, phi_j)``; ``phi_j = None`` keeps the reference flux.
    ``f_j`` may be a callable or a field.  Each member runs through the full
    schedule so that the final-epsilon fields are comparable.
    """
    schedule = schedule or ContinuationSchedule()
    if len(data_sequence) == 0:
        raise InvalidParameterError("data_sequence must be nonempty")
    ref_f, ref_phi = reference if reference is not None else (spec.f, None)
    labels = list(labels) if labels is not None else [str(j) for j in range(1, len(data_sequence) + 1)]
    if len(labels) != len(data_sequence):
        raise InvalidParameterError("labels and data_sequence differ in length")

    for label, (_, phi_j) in zip(labels, data_sequence):
        if phi_j is None:
            continue
        check = validate_assumptions(_member_spec(spec, phi_j))["phi_growth"]
        if not check.passed:
            raise ValidationError(f"member {label}: Phi violates the growth bound at {check.witness}")

    ref = epsilon_continuation(mesh, _member_spec(spec, ref_phi), schedule, options, f_raw=ref_f)
    p = spec.p
    members = []
    for label, (f_j, phi_j) in zip(labels, data_sequence):
        try:
            sol = epsilon_continuation(mesh, _member_spec(spec, phi_j), schedule, options, f_raw=f_j)
        except RenormError as err:
            raise err.in_context(f"stability member {label}") from err
        dists = {k: w1p_norm(truncate_field(sol.final_field, k) - truncate_field(ref.final_field, k), p) for k in schedule.k_levels}
        members.append(StabilityMember(label, dists, lp_norm(sol.final_field - ref.final_field, p), sol))
    return StabilityTable(schedule.epsilons[-1], schedule.k_levels, members, ref)


@dataclass
class UpgradeCheck:
    saturated: bool
    energies: Curve
    ratio_minus_one: float

    def to_dict(self) -> dict:
        return {"saturated": self.saturated, "ratio_minus_one": self.ratio_minus_one, "energies": self.energies.to_dict()}


def weak_upgrade_check(sol, rspec: RegularizedSpec, k_list: Sequence[float]) -> UpgradeCheck:
    """Whether the truncation energies E(k) have stopped growing at the top level.

    ``sol`` is a RenormSolution or a DiscreteField.
    """
    if len(k_list) < 2:
        raise InvalidParameterError("k_list needs at least two levels")
    ks = _strictly_increasing(k_list, "k_list")
    u = sol.final_field if isinstance(sol, RenormSolution) else sol
    p = rspec.p
    energies = [truncation_energy(u, k, p) for k in ks]
    top = energies[-1]
    half = truncation_energy(u, ks[-1] / 2.0, p)
    if half == 0.0:
        excess = 0.0 if top == 0.0 else math.inf
    else:
        excess = top / half - 1.0
    curve = Curve("upgrade_energy", "k", list(ks), energies, _tags(u, rspec))
    return UpgradeCheck(excess <= SATURATION_TOL, curve, excess)
