"""P1 Galerkin assembly and the discrete weak solves.

The frozen problem: given v, find u with

    int a_eps(x, v, grad u) . grad phi_i + int Phi_eps(x, v) . grad phi_i = int f phi_i

for every P1 basis function.  Constants lie in the kernel, so Newton steps are
gauge-fixed, and the converged iterate is shifted to have median zero.  The
outer map v -> u is iterated by relaxed Picard.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .discretization import (
    DEFAULT_ORDER,
    DiscreteField,
    Mesh,
    check_finite,
    get_quadrature,
    lp_norm,
    median,
)
from .errors import (
    CompatibilityError,
    InvalidParameterError,
    NonConvergenceError,
    NumericError,
    ValidationError,
)
from .model import RegularizedSpec, SampleGrid, smoothed_kernel, validate_assumptions

log = logging.getLogger(__name__)

GAUGES = ("zero_mean_multiplier", "pin_node")
COMPAT_RTOL = 1e-10
MIN_RELAXATION = 2.0**-6


@dataclass(frozen=True)
class SolveOptions:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    damping: float = 0.5
    min_step: float = 2.0**-20
    picard_tol: float = 1e-8
    picard_max_iter: int = 200
    relaxation: float = 1.0
    gauge: str = "zero_mean_multiplier"
    quadrature_order: int = DEFAULT_ORDER
    armijo: float = 1e-4

    def __post_init__(self):
        for name in ("newton_tol", "picard_tol", "min_step"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")
        if not 0 < self.damping < 1:
            raise InvalidParameterError("damping must lie in (0, 1)")
        if not 0 < self.relaxation <= 1:
            raise InvalidParameterError("relaxation must lie in (0, 1]")
        if self.newton_max_iter < 1 or self.picard_max_iter < 1:
            raise InvalidParameterError("iteration limits must be >= 1")
        if self.gauge not in GAUGES:
            raise InvalidParameterError(f"gauge must be one of {GAUGES}, got {self.gauge!r}")


@dataclass
class WeakSolution:
    field: DiscreteField
    iterations: int
    inner_newton_counts: list
    final_residual: float
    gauge_shift: float
    distances: list = field(default_factory=list)
    relaxation: float = 1.0
    compatibility_residual: float = 0.0
    epsilon: float = 0.0

    @property
    def median(self) -> float:
        return median(self.field)

    def summary(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "newton_iterations": list(self.inner_newton_counts),
            "final_residual": self.final_residual,
            "gauge_shift": self.gauge_shift,
            "median": self.median,
            "compatibility_residual": self.compatibility_residual,
            "picard_distances": list(self.distances),
            "relaxation": self.relaxation,
        }


# --------------------------------------------------------------------------
# Assembly
# --------------------------------------------------------------------------


class _Context:
    """Geometry and quadrature data reused across assemblies on one mesh."""

    def __init__(self, mesh: Mesh, order: int):
        self.mesh = mesh
        self.rule = get_quadrature(mesh.dimension, order)
        self.B = self.rule.points  # (nq, k) basis values
        self.W = self.rule.weights
        self.G = mesh.basis_gradients  # (E, k, d)
        self.meas = mesh.element_measures
        self.X = mesh.quadrature_points(self.rule)
        ne, nq, d = self.X.shape
        self.shape = (ne, nq, d)
        self.Xflat = self.X.reshape(-1, d)
        self.QW = self.meas[:, None] * self.W[None, :]  # (E, nq)
        k = d + 1
        self.rows = np.repeat(mesh.elements, k, axis=1).ravel()
        self.cols = np.tile(mesh.elements, (1, k)).ravel()
        self.mass_vector = mesh.lumped_measures
        Kloc = self.meas[:, None, None] * np.einsum("eid,ejd->eij", self.G, self.G)
        self.stiffness = self._matrix(Kloc)
        Mloc = np.einsum("eq,qi,qj->eij", self.QW, self.B, self.B)
        self.mass = self._matrix(Mloc)

    @classmethod
    def get(cls, mesh: Mesh, order: int) -> "_Context":
        key = ("asm", order)
        if key not in mesh._cache:
            mesh._cache[key] = cls(mesh, order)
        return mesh._cache[key]

    def _matrix(self, local: np.ndarray) -> sp.csr_matrix:
        n = self.mesh.n_nodes
        return sp.coo_matrix((local.ravel(), (self.rows, self.cols)), shape=(n, n)).tocsr()

    def scatter(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.mesh.elements.ravel(), weights=local.ravel(), minlength=self.mesh.n_nodes)

    def at_q(self, values: np.ndarray) -> np.ndarray:
        return values[self.mesh.elements] @ self.B.T


@dataclass
class _Assembly:
    residual: np.ndarray
    jacobian: sp.csr_matrix | None
    rhs: np.ndarray


def _assemble(ctx: _Context, rspec: RegularizedSpec, v: np.ndarray, u: np.ndarray, zero_order: bool = False, jacobian: bool = True) -> _Assembly:
    ne, nq, d = ctx.shape
    base = rspec.base
    Vq = ctx.at_q(v).reshape(-1)
    Cq = ctx.at_q(base.c_field.nodal_values).reshape(-1)
    Fvals = base.f.nodal_values
    if zero_order:
        Fvals = rspec.truncate_state(Fvals)
    Fq = ctx.at_q(Fvals)
    grad_u = np.einsum("ej,ejd->ed", u[ctx.mesh.elements], ctx.G)
    XI = np.repeat(grad_u, nq, axis=0)

    if zero_order:
        s = rspec.truncate_state(Vq)
        A = base.a(ctx.Xflat, s, XI)
        PHI = base.phi(ctx.Xflat, s, Cq)
    else:
        A = rspec.a_eps(ctx.Xflat, Vq, XI)
        PHI = rspec.phi_eps(ctx.Xflat, Vq, Cq)
    A = A.reshape(ne, nq, d)
    PHI = PHI.reshape(ne, nq, d)

    flux_a = np.einsum("eq,eqd->ed", ctx.QW, A)
    flux_phi = np.einsum("eq,eqd->ed", ctx.QW, PHI)
    load = np.einsum("eq,eq,qi->ei", ctx.QW, Fq, ctx.B)
    rhs_loc = load - np.einsum("ed,eid->ei", flux_phi, ctx.G)
    res_loc = np.einsum("ed,eid->ei", flux_a, ctx.G) - rhs_loc

    if zero_order:
        Uq = ctx.at_q(u)
        Z, dZ = _zero_order_terms(ctx, rspec, Uq)
        res_loc = res_loc + np.einsum("eq,eq,qi->ei", ctx.QW, Z, ctx.B)
    check_finite(res_loc, "residual entry")

    J = None
    if jacobian:
        if zero_order:
            D = base.a_jacobian(ctx.Xflat, rspec.truncate_state(Vq), XI)
        else:
            D = rspec.a_eps_dxi(ctx.Xflat, Vq, XI)
        Dbar = np.einsum("eq,eqij->eij", ctx.QW, D.reshape(ne, nq, d, d))
        Kloc = np.einsum("eid,edk,ejk->eij", ctx.G, Dbar, ctx.G)
        if zero_order:
            Kloc = Kloc + np.einsum("eq,eq,qi,qj->eij", ctx.QW, dZ, ctx.B, ctx.B)
        check_finite(Kloc, "jacobian entry")
        J = ctx._matrix(Kloc)
    return _Assembly(ctx.scatter(res_loc), J, ctx.scatter(rhs_loc))


def _zero_order_terms(ctx: _Context, rspec: RegularizedSpec, Uq: np.ndarray):
    """eps |u|^{p-2} u + lambda(x, T(u)) and its derivative at quadrature points."""
    base = rspec.base
    shape = Uq.shape
    u = Uq.reshape(-1)
    t = rspec.truncate_state(u)
    lam = np.asarray(base.lambda_term(ctx.Xflat, t), dtype=float)
    if np.any(lam * t < -1e-12 * np.maximum(1.0, np.abs(lam * t))):
        i = int(np.argmin(lam * t))
        raise ValidationError(f"sign condition lambda(x,s)s >= 0 violated at s={t[i]:.6g} (element {i // shape[1]})")
    dlam = np.asarray(base.lambda_derivative(ctx.Xflat, t), dtype=float) * (np.abs(u) < rspec.cap)
    Z, dZ = lam, dlam
    if rspec.epsilon:
        p, delta = rspec.p, rspec.delta
        k = smoothed_kernel(u * u, delta, p)
        base2 = delta * delta + u * u
        with np.errstate(divide="ignore", invalid="ignore"):
            w = (p - 2.0) * np.power(base2, 0.5 * (p - 4.0))
        w = np.where(base2 == 0, 0.0, w)
        Z = Z + rspec.epsilon * k * u
        dZ = dZ + rspec.epsilon * (k + w * u * u)
    return Z.reshape(shape), dZ.reshape(shape)


def assemble(mesh: Mesh, rspec: RegularizedSpec, v: DiscreteField, u: DiscreteField, order: int = DEFAULT_ORDER, zero_order: bool = False):
    """Residual vector and Jacobian (derivative in u, with v frozen)."""
    for fld in (v, u, rspec.f, rspec.base.c_field):
        if fld.mesh is not mesh:
            raise InvalidParameterError("all fields must live on the given mesh")
    ctx = _Context.get(mesh, order)
    asm = _assemble(ctx, rspec, v.nodal_values, u.nodal_values, zero_order=zero_order)
    return asm.residual, asm.jacobian


# --------------------------------------------------------------------------
# Newton
# --------------------------------------------------------------------------


@dataclass
class NewtonResult:
    u: np.ndarray
    iterations: int
    residual_norm: float
    merit_history: list


def _gauge_solve(ctx: _Context, J, R: np.ndarray, u: np.ndarray, gauge: str | None) -> np.ndarray:
    n = len(R)
    if gauge is None:
        du = spsolve(J.tocsc(), -R)
    elif gauge == "zero_mean_multiplier":
        m = ctx.mass_vector
        A = sp.bmat([[J, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]], format="csc")
        rhs = np.concatenate([-R, [-(m @ u)]])
        du = spsolve(A, rhs)[:n]
    else:
        du = np.empty(n)
        du[0] = -u[0]
        Jc = J.tocsc()
        rhs = -R[1:] - Jc[1:, 0].toarray().ravel() * du[0]
        du[1:] = spsolve(Jc[1:, 1:], rhs)
    if not np.all(np.isfinite(du)):
        raise NumericError("non-finite Newton update (singular Jacobian?)")
    return du


def _initial_guess(ctx: _Context, rspec: RegularizedSpec, rhs: np.ndarray, gauge: str | None, zero_order: bool) -> np.ndarray:
    """Scaled solution of the linear problem: the best multiple of w for the p-energy."""
    n = len(rhs)
    p = rspec.p
    # for p = 2 Newton from zero already finishes in one step
    if p == 2 or not np.any(rhs):
        return np.zeros(n)
    K = ctx.stiffness + ctx.mass if zero_order else ctx.stiffness
    w = _gauge_solve(ctx, K, -rhs, np.zeros(n), gauge)
    work = rhs @ w
    g = np.linalg.norm(np.einsum("ej,ejd->ed", w[ctx.mesh.elements], ctx.G), axis=1)
    energy = np.sum(ctx.meas * g**p)
    if not (work > 0 and energy > 0):
        return np.zeros(n)
    return w * (work / energy) ** (1.0 / (p - 1.0))


def _newton(ctx, rspec, v, u0, options: SolveOptions, gauge: str | None, zero_order: bool = False) -> NewtonResult:
    asm = _assemble(ctx, rspec, v, u0 if u0 is not None else np.zeros(ctx.mesh.n_nodes), zero_order)
    if u0 is None:
        u = _initial_guess(ctx, rspec, asm.rhs, gauge, zero_order)
        if np.any(u):
            trial = _assemble(ctx, rspec, v, u, zero_order)
            if np.linalg.norm(trial.residual) < np.linalg.norm(asm.residual):
                asm = trial
            else:
                u = np.zeros_like(u)
    else:
        u = np.array(u0, dtype=float)
    scale = max(np.linalg.norm(asm.rhs), np.finfo(float).tiny)
    tol = options.newton_tol * scale
    merit = 0.5 * float(asm.residual @ asm.residual)
    history = [merit]
    for it in range(options.newton_max_iter + 1):
        rnorm = math.sqrt(2.0 * merit)
        if rnorm <= tol:
            return NewtonResult(u, it, rnorm, history)
        if it == options.newton_max_iter:
            break
        du = _gauge_solve(ctx, asm.jacobian, asm.residual, u, gauge)
        t = 1.0
        while True:
            trial_u = u + t * du
            try:
                trial = _assemble(ctx, rspec, v, trial_u, zero_order)
                trial_merit = 0.5 * float(trial.residual @ trial.residual)
            except NumericError:
                trial_merit = math.inf
            if trial_merit <= (1.0 - 2.0 * options.armijo * t) * merit:
                break
            t *= options.damping
            if t < options.min_step:
                raise NonConvergenceError(
                    f"Newton line search stagnated at |R|={rnorm:.3e} (tolerance {tol:.3e})",
                    history=[math.sqrt(2 * m) for m in history],
                )
        u, asm, merit = trial_u, trial, trial_merit
        history.append(merit)
    raise NonConvergenceError(
        f"Newton did not converge in {options.newton_max_iter} iterations (|R|={math.sqrt(2 * merit):.3e}, tolerance {tol:.3e})",
        history=[math.sqrt(2 * m) for m in history],
    )


# --------------------------------------------------------------------------
# Solves
# --------------------------------------------------------------------------


def _check_compatibility(rspec: RegularizedSpec) -> None:
    defect, l1 = rspec.base.compatibility_defect()
    if defect > COMPAT_RTOL * max(l1, np.finfo(float).tiny):
        raise CompatibilityError(f"datum violates the compatibility condition: |int f| = {defect:.3e}, ||f||_1 = {l1:.3e}")


def _frozen_solve(ctx, rspec, v, u0, options):
    res = _newton(ctx, rspec, v, u0, options, options.gauge)
    shift = median(DiscreteField(ctx.mesh, res.u))
    return res.u - shift, res, shift


def newton_solve(mesh: Mesh, rspec: RegularizedSpec, v: DiscreteField, options: SolveOptions | None = None, u0: DiscreteField | None = None, zero_order: bool = False) -> NewtonResult:
    """Damped Newton for the frozen problem, without the median shift; exposes the merit history."""
    options = options or SolveOptions()
    ctx = _Context.get(mesh, options.quadrature_order)
    gauge = None if zero_order else options.gauge
    return _newton(ctx, rspec, v.nodal_values, None if u0 is None else u0.nodal_values, options, gauge, zero_order)


def inner_solve(mesh: Mesh, rspec: RegularizedSpec, v: DiscreteField, options: SolveOptions | None = None, u0: DiscreteField | None = None) -> DiscreteField:
    """Solve the frozen problem for the given v; the result has median zero."""
    options = options or SolveOptions()
    _check_compatibility(rspec)
    ctx = _Context.get(mesh, options.quadrature_order)
    u, _, _ = _frozen_solve(ctx, rspec, v.nodal_values, None if u0 is None else u0.nodal_values, options)
    return DiscreteField(mesh, u)


def _picard(mesh, rspec, options, v0, zero_order: bool) -> WeakSolution:
    ctx = _Context.get(mesh, options.quadrature_order)
    p = rspec.p
    v = np.zeros(mesh.n_nodes) if v0 is None else np.array(v0.nodal_values, dtype=float)
    theta = options.relaxation
    distances, newton_counts = [], []
    u_prev = None if v0 is None else v.copy()
    gauge = None if zero_order else options.gauge

    def gamma(v, start):
        res = _newton(ctx, rspec, v, start, options, gauge, zero_order)
        newton_counts.append(res.iterations)
        if zero_order:
            return res.u, 0.0
        shift = median(DiscreteField(mesh, res.u))
        return res.u - shift, shift

    if rspec.base.v_independent:
        u, shift = gamma(v, u_prev)
        return _finish(ctx, rspec, u, 1, newton_counts, shift, [], theta, zero_order)

    rising = 0
    for j in range(1, options.picard_max_iter + 1):
        u, shift = gamma(v, u_prev)
        u_prev = u
        step = theta * (u - v)
        dist = lp_norm(DiscreteField(mesh, step), p)
        distances.append(dist)
        if dist <= options.picard_tol * max(1.0, lp_norm(DiscreteField(mesh, v), p)):
            return _finish(ctx, rspec, u, j, newton_counts, shift, distances, theta, zero_order)
        rising = rising + 1 if len(distances) > 1 and dist >= distances[-2] else 0
        if rising >= 2 and theta > MIN_RELAXATION:
            theta *= 0.5
            rising = 0
            log.info("Picard cycling detected; relaxation halved to %g", theta)
        v = v + step
    raise NonConvergenceError(
        f"fixed-point iteration did not converge in {options.picard_max_iter} iterations (last distance {distances[-1]:.3e})",
        history=distances,
    )


def _finish(ctx, rspec, u, iterations, newton_counts, shift, distances, theta, zero_order) -> WeakSolution:
    coupled = _assemble(ctx, rspec, u, u, zero_order, jacobian=False)
    return WeakSolution(
        field=DiscreteField(ctx.mesh, u),
        iterations=iterations,
        inner_newton_counts=newton_counts,
        final_residual=float(np.linalg.norm(coupled.residual)),
        gauge_shift=float(shift),
        distances=distances,
        relaxation=theta,
        compatibility_residual=float(abs(coupled.residual.sum())),
        epsilon=rspec.epsilon,
    )


def fixed_point_solve(mesh: Mesh, rspec: RegularizedSpec, options: SolveOptions | None = None, v0: DiscreteField | None = None) -> WeakSolution:
    """Relaxed Picard iteration of the frozen-coefficient map, started from v0 (default 0)."""
    options = options or SolveOptions()
    _check_compatibility(rspec)
    return _picard(mesh, rspec, options, v0, zero_order=False)


def zero_order_solve(mesh: Mesh, rspec: RegularizedSpec, options: SolveOptions | None = None, v0: DiscreteField | None = None, grid: SampleGrid | None = None) -> WeakSolution:
    """Solve eps|u|^{p-2}u + lambda(x,T(u)) - div(a(x,T(u),grad u) + Phi(x,T(u))) = T(f).

    No gauge, no compatibility requirement and no median shift.
    """
    options = options or SolveOptions()
    if rspec.base.lambda_term is None:
        raise InvalidParameterError("zero-order solve needs a lambda term")
    report = validate_assumptions(rspec.base, grid)
    if not report["lambda_sign"].passed:
        w = report["lambda_sign"].witness
        raise ValidationError(f"sign condition lambda(x,s)s >= 0 violated at s={w.get('s')}")
    return _picard(mesh, rspec, options, v0, zero_order=True)
