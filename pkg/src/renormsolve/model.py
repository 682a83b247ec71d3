"""Operator specifications, structural-assumption checks and regularization.

Operator callables are vectorised over sample points:

* ``a(x, s, xi)`` with ``x`` of shape ``(M, d)``, ``s`` of shape ``(M,)`` and
  ``xi`` of shape ``(M, d)`` returns ``(M, d)``;
* ``a_dxi(x, s, xi)`` (optional) returns the Jacobian in ``xi``, ``(M, d, d)``;
* ``phi(x, s, c)`` returns ``(M, d)``; ``c`` holds the coefficient field
  c(x) evaluated at the same points;
* ``lambda_term(x, s)`` returns ``(M,)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .discretization import (
    DiscreteField,
    Mesh,
    integrate,
    lp_norm,
    truncate,
)
from .errors import InvalidParameterError, ValidationError

log = logging.getLogger(__name__)

FD_STEP = 1e-6


def smoothed_kernel(r2, delta: float, p: float):
    """(delta^2 + r2)^((p-2)/2), with the limits at r2 = delta = 0 made explicit."""
    base = delta * delta + np.asarray(r2, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.power(base, 0.5 * (p - 2.0))
    if p != 2:
        # for p < 2 the kernel blows up at 0 but k*xi -> 0; keep products finite
        k = np.where(base == 0, 0.0, k)
    else:
        k = np.ones_like(base)
    return k


def _smoothed_power_jacobian(xi: np.ndarray, delta: float, p: float) -> np.ndarray:
    """d/dxi of (delta^2+|xi|^2)^((p-2)/2) xi, shape (M, d, d)."""
    r2 = np.sum(xi * xi, axis=-1)
    k = smoothed_kernel(r2, delta, p)
    base = delta * delta + r2
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (p - 2.0) * np.power(base, 0.5 * (p - 4.0))
    w = np.where(base == 0, 0.0, w)
    d = xi.shape[-1]
    return k[:, None, None] * np.eye(d)[None] + w[:, None, None] * xi[:, :, None] * xi[:, None, :]


def fd_jacobian_xi(a: Callable, x, s, xi) -> np.ndarray:
    """Central-difference Jacobian of a(x, s, .) for callables without an analytic one."""
    M, d = xi.shape
    out = np.empty((M, d, d))
    for j in range(d):
        h = FD_STEP * np.maximum(1.0, np.abs(xi[:, j]))
        e = np.zeros_like(xi)
        e[:, j] = h
        out[:, :, j] = (a(x, s, xi + e) - a(x, s, xi - e)) / (2.0 * h)[:, None]
    return out


def fd_derivative_s(lam: Callable, x, s) -> np.ndarray:
    h = FD_STEP * np.maximum(1.0, np.abs(s))
    return (lam(x, s + h) - lam(x, s - h)) / (2.0 * h)


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """The data (a, Phi, lambda, c, f) of one Neumann problem."""

    p: float
    alpha: float
    a: Callable
    phi: Callable
    c_field: DiscreteField
    f: DiscreteField
    a_dxi: Optional[Callable] = None
    q_exponent: Optional[float] = None
    lambda_term: Optional[Callable] = None
    lambda_ds: Optional[Callable] = None
    lambda_profile: Optional[Callable] = None
    delta: float = 0.0
    coercivity_slack: float = 0.0
    growth_a0: float = 1.0
    growth_a1: float = 0.0
    a_depends_on_s: bool = True
    phi_is_zero: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidParameterError(f"exponent p must be > 1, got {self.p}")
        if not self.alpha > 0:
            raise InvalidParameterError(f"coercivity constant alpha must be > 0, got {self.alpha}")
        if self.c_field.mesh is not self.f.mesh:
            raise InvalidParameterError("c and f must live on the same mesh")
        if np.any(self.c_field.nodal_values < 0):
            raise InvalidParameterError("coefficient c must be nonnegative")
        if self.q_exponent is None:
            object.__setattr__(self, "q_exponent", default_q_exponent(self.p, self.mesh.dimension))
        if self.p > self.mesh.dimension:
            log.info("p=%g exceeds the space dimension %d; the q-class of c is metadata only", self.p, self.mesh.dimension)

    @property
    def mesh(self) -> Mesh:
        return self.f.mesh

    @property
    def dimension(self) -> int:
        return self.mesh.dimension

    @property
    def conjugate(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def v_independent(self) -> bool:
        """True when the frozen problem does not depend on the frozen state at all."""
        return not self.a_depends_on_s and self.phi_is_zero

    def a_jacobian(self, x, s, xi) -> np.ndarray:
        if self.a_dxi is not None:
            return self.a_dxi(x, s, xi)
        return fd_jacobian_xi(self.a, x, s, xi)

    def lambda_derivative(self, x, s) -> np.ndarray:
        if self.lambda_ds is not None:
            return self.lambda_ds(x, s)
        return fd_derivative_s(self.lambda_term, x, s)

    def compatibility_defect(self) -> tuple[float, float]:
        """(|integral of f|, ||f||_1)."""
        return abs(self.f.integral()), lp_norm(self.f, 1.0)

    def with_datum(self, f: DiscreteField) -> "OperatorSpec":
        return replace(self, f=f)


def default_q_exponent(p: float, dimension: int) -> float:
    if p < dimension:
        return dimension / (p - 1.0)
    # any q > N/(N-1) is admissible; N = 1 has no finite bound
    return 2.0 * dimension / (dimension - 1.0) if dimension > 1 else math.inf


def _unit_direction(direction, dimension: int) -> np.ndarray:
    if direction is None:
        b = np.zeros(dimension)
        b[0] = 1.0
        return b
    b = np.asarray(direction, dtype=float).reshape(-1)
    if b.size != dimension or not np.linalg.norm(b) > 0:
        raise InvalidParameterError(f"direction must be a nonzero {dimension}-vector")
    return b / np.linalg.norm(b)


def make_prototype(p: float, c_field: DiscreteField, f: DiscreteField, delta: float = 0.0, direction=None) -> OperatorSpec:
    """Smoothed p-Laplacian with convection c(x)|u|^{p-2}u along a fixed unit direction.

    a(x,s,xi) = (delta^2+|xi|^2)^{(p-2)/2} xi and
    Phi(x,s) = c(x) (delta^2+s^2)^{(p-2)/2} s b.  Coercivity holds with
    alpha = 1 and slack delta^p when p < 2 (no slack otherwise).
    """
    if not p > 1:
        raise InvalidParameterError(f"exponent p must be > 1, got {p}")
    if delta < 0:
        raise InvalidParameterError(f"delta must be >= 0, got {delta}")
    d = f.mesh.dimension
    b = _unit_direction(direction, d)

    def a(x, s, xi):
        return smoothed_kernel(np.sum(xi * xi, axis=-1), delta, p)[:, None] * xi

    def a_dxi(x, s, xi):
        return _smoothed_power_jacobian(xi, delta, p)

    def phi(x, s, c):
        return (c * smoothed_kernel(s * s, delta, p) * s)[:, None] * b[None, :]

    if p >= 2:
        a0 = max(1.0, 2.0 ** ((p - 3.0) / 2.0))
        a1 = a0 * delta ** (p - 1.0)
        slack = 0.0
    else:
        a0, a1 = 1.0, 0.0
        slack = delta**p
    return OperatorSpec(
        p=float(p),
        alpha=1.0,
        a=a,
        phi=phi,
        c_field=c_field,
        f=f,
        a_dxi=a_dxi,
        delta=float(delta),
        coercivity_slack=slack,
        growth_a0=a0,
        growth_a1=a1,
        a_depends_on_s=False,
        phi_is_zero=bool(np.all(c_field.nodal_values == 0)),
        name="prototype",
        params={"direction": b.tolist()},
    )


def make_linear_diffusion(c_field: DiscreteField, f: DiscreteField, kappa: float = 1.0, direction=None) -> OperatorSpec:
    """a = kappa xi and Phi = c(x) s b (p = 2)."""
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be > 0, got {kappa}")
    b = _unit_direction(direction, f.mesh.dimension)
    d = f.mesh.dimension

    def a(x, s, xi):
        return kappa * xi

    def a_dxi(x, s, xi):
        return np.broadcast_to(kappa * np.eye(d), (len(xi), d, d)).copy()

    def phi(x, s, c):
        return (c * s)[:, None] * b[None, :]

    return OperatorSpec(
        p=2.0,
        alpha=kappa,
        a=a,
        phi=phi,
        c_field=c_field,
        f=f,
        a_dxi=a_dxi,
        growth_a0=kappa,
        a_depends_on_s=False,
        phi_is_zero=bool(np.all(c_field.nodal_values == 0)),
        name="linear-diffusion",
        params={"kappa": float(kappa), "direction": b.tolist()},
    )


def make_power_lambda(r: float = 2.0):
    """lambda(x,s) = |s|^{r-2} s with profile g(s) = |s|^{r-1}; returns (lambda, derivative, g)."""
    if not r >= 2:
        raise InvalidParameterError(f"power-lambda needs r >= 2, got {r}")

    def lam(x, s):
        return np.abs(s) ** (r - 2.0) * s

    def lam_ds(x, s):
        return (r - 1.0) * np.abs(s) ** (r - 2.0)

    def g(s):
        return np.abs(s) ** (r - 1.0)

    return lam, lam_ds, g


def with_lambda(spec: OperatorSpec, lam: Callable, lam_ds: Callable | None = None, profile: Callable | None = None) -> OperatorSpec:
    return replace(spec, lambda_term=lam, lambda_ds=lam_ds, lambda_profile=profile)


OPERATORS = {"prototype": make_prototype, "linear-diffusion": make_linear_diffusion}
LAMBDAS = {"power-lambda": make_power_lambda}


# --------------------------------------------------------------------------
# Regularization
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegularizedSpec:
    """An operator spec with s truncated at 1/epsilon, Phi clipped at 1/epsilon and
    an added epsilon (delta^2+|xi|^2)^{(p-2)/2} xi.  ``epsilon == 0`` is the
    unregularized problem (see :func:`unregularized`)."""

    base: OperatorSpec
    epsilon: float
    delta: float

    @property
    def cap(self) -> float:
        return math.inf if self.epsilon == 0 else 1.0 / self.epsilon

    @property
    def p(self) -> float:
        return self.base.p

    @property
    def f(self) -> DiscreteField:
        return self.base.f

    @property
    def mesh(self) -> Mesh:
        return self.base.mesh

    @property
    def alpha(self) -> float:
        return self.base.alpha + self.epsilon

    @property
    def coercivity_slack(self) -> float:
        extra = self.epsilon * self.delta**self.p if self.p < 2 else 0.0
        return self.base.coercivity_slack + extra

    def truncate_state(self, s):
        return np.clip(s, -self.cap, self.cap)

    def a_eps(self, x, s, xi):
        out = self.base.a(x, self.truncate_state(s), xi)
        if self.epsilon:
            k = smoothed_kernel(np.sum(xi * xi, axis=-1), self.delta, self.p)
            out = out + self.epsilon * k[:, None] * xi
        return out

    def a_eps_dxi(self, x, s, xi):
        out = self.base.a_jacobian(x, self.truncate_state(s), xi)
        if self.epsilon:
            out = out + self.epsilon * _smoothed_power_jacobian(xi, self.delta, self.p)
        return out

    def phi_eps(self, x, s, c):
        return np.clip(self.base.phi(x, s, c), -self.cap, self.cap)


def regularize(spec: OperatorSpec, epsilon: float, delta: float | None = None) -> RegularizedSpec:
    if not epsilon > 0:
        raise InvalidParameterError(f"epsilon must be > 0, got {epsilon}")
    return RegularizedSpec(spec, float(epsilon), spec.delta if delta is None else float(delta))


def unregularized(spec: OperatorSpec) -> RegularizedSpec:
    """The epsilon = 0 limit: no truncation, no added diffusion."""
    return RegularizedSpec(spec, 0.0, spec.delta)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticDatum:
    """A vectorised pointwise function with an optional known L^1 norm."""

    func: Callable
    l1_norm: Optional[float] = None
    name: str = "analytic"

    def __call__(self, x):
        return self.func(x)


def _quartic_normalizer(width: float, dimension: int) -> float:
    # integral of (1 - r^2/w^2)^2 over the ball of radius w
    return 16.0 * width / 15.0 if dimension == 1 else math.pi * width**2 / 3.0


def bump(center, width: float, mass: float = 1.0) -> AnalyticDatum:
    """Quartic bump (1 - |x-x0|^2/w^2)^2 scaled to carry the given mass."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if not width > 0:
        raise InvalidParameterError(f"bump width must be > 0, got {width}")
    scale = mass / _quartic_normalizer(width, c.size)

    def f(x):
        r2 = np.sum((x - c[None, :]) ** 2, axis=1) / width**2
        return scale * np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)

    return AnalyticDatum(f, abs(mass), name=f"bump({c.tolist()},{width:g},{mass:g})")


def dipole(x0, x1, width: float, mass: float = 1.0) -> AnalyticDatum:
    """bump(x0) - bump(x1), both of the given mass; supports must not overlap."""
    b0, b1 = bump(x0, width, mass), bump(x1, width, mass)
    if np.linalg.norm(np.atleast_1d(x0) - np.atleast_1d(x1)) < 2 * width:
        raise InvalidParameterError("dipole bumps overlap")
    return AnalyticDatum(lambda x: b0(x) - b1(x), 2.0 * abs(mass), name=f"dipole({b0.name},{b1.name})")


def cosine_datum(dimension: int) -> AnalyticDatum:
    """-Laplacian of prod cos(pi x_i): N pi^2 prod cos(pi x_i)."""

    def f(x):
        return dimension * math.pi**2 * np.prod(np.cos(math.pi * x), axis=1)

    return AnalyticDatum(f, name="cosine")


def prepare_datum(f_raw, mesh: Mesh, epsilon: float, require_compat: bool = True, order: int = 6) -> DiscreteField:
    """Nodal projection, clamp at 1/epsilon, mean correction and L^1 rescale.

    The result integrates to zero (when ``require_compat``) and its L^1 norm
    never exceeds that of ``f_raw``.
    """
    if not epsilon > 0:
        raise InvalidParameterError(f"epsilon must be > 0, got {epsilon}")
    if isinstance(f_raw, DiscreteField):
        if f_raw.mesh is not mesh:
            raise InvalidParameterError("datum lives on a different mesh")
        vals = f_raw.nodal_values.copy()
        l1_ref = lp_norm(f_raw, 1.0)
    else:
        vals = np.asarray(f_raw(mesh.nodes), dtype=float).reshape(-1)
        l1_ref = getattr(f_raw, "l1_norm", None)
        if l1_ref is None:
            l1_ref = integrate(mesh, lambda x: np.abs(f_raw(x)), order=order)
    if l1_ref == 0 or not np.any(vals):
        return mesh.zeros()

    vals = truncate(vals, 1.0 / epsilon)
    weights = mesh.lumped_measures

    def _center(v):
        return v - (v @ weights) / mesh.total_measure if require_compat else v

    vals = _center(vals)
    l1 = lp_norm(DiscreteField(mesh, vals), 1.0)
    if l1 > l1_ref:
        vals = vals * (l1_ref / l1)
    return DiscreteField(mesh, _center(vals))


# --------------------------------------------------------------------------
# Assumption validation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleGrid:
    x_points: np.ndarray
    s_levels: np.ndarray
    xi_vectors: np.ndarray

    def __post_init__(self):
        if len(self.x_points) == 0 or len(self.s_levels) == 0 or len(self.xi_vectors) == 0:
            raise InvalidParameterError("sample grid must be nonempty")


DEFAULT_S_LEVELS = (-100.0, -10.0, -2.0, -1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0)
DEFAULT_XI_MAGNITUDES = (0.0, 0.01, 0.1, 1.0, 10.0)


def default_grid(mesh: Mesh, n_points: int = 5) -> SampleGrid:
    idx = np.unique(np.linspace(0, mesh.n_nodes - 1, n_points).round().astype(int))
    if mesh.dimension == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        ang = np.arange(8) * np.pi / 4
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    xi = np.concatenate([m * dirs for m in DEFAULT_XI_MAGNITUDES if m > 0] + [np.zeros((1, mesh.dimension))])
    return SampleGrid(mesh.nodes[idx].copy(), np.array(DEFAULT_S_LEVELS), xi)


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    margin: float
    witness: dict
    applicable: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "applicable": self.applicable,
            "margin": self.margin,
            "witness": self.witness,
            "details": self.details,
        }


@dataclass
class AssumptionReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, name: str) -> AssumptionCheck:
        return self.checks[name]

    def failures(self) -> list[str]:
        return [n for n, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": {n: c.to_dict() for n, c in self.checks.items()}}


def _worst(margins: np.ndarray, rhs_scale: np.ndarray, witness_of: Callable[[int], dict], name: str, rtol: float = 1e-12, strict: bool = False):
    flat = margins.reshape(-1)
    i = int(np.argmin(flat))
    tol = rtol * np.maximum(1.0, np.abs(rhs_scale.reshape(-1)))
    passed = bool(np.all(flat > 0)) if strict else bool(np.all(flat >= -tol))
    return AssumptionCheck(name, passed, float(flat[i]), witness_of(i))


def validate_assumptions(spec: OperatorSpec, grid: SampleGrid | None = None) -> AssumptionReport:
    """Check the structural inequalities at every grid tuple; failures become report entries."""
    grid = grid or default_grid(spec.mesh)
    X = np.asarray(grid.x_points, dtype=float).reshape(-1, spec.dimension)
    S = np.asarray(grid.s_levels, dtype=float)
    XI = np.asarray(grid.xi_vectors, dtype=float).reshape(-1, spec.dimension)
    C = spec.c_field.evaluate(X)
    nx, ns, nk = len(X), len(S), len(XI)
    p = spec.p

    # tuples (x, s, xi) flattened in that nesting order
    Xt = np.repeat(X, ns * nk, axis=0)
    St = np.tile(np.repeat(S, nk), nx)
    XIt = np.tile(XI, (nx * ns, 1))
    A = spec.a(Xt, St, XIt)

    def wit3(i):
        return {"x": Xt[i].tolist(), "s": float(St[i]), "xi": XIt[i].tolist()}

    checks = {}
    nrm_xi = np.linalg.norm(XIt, axis=1)
    rhs = spec.alpha * nrm_xi**p - spec.coercivity_slack
    lhs = np.sum(A * XIt, axis=1)
    chk = _worst(lhs - rhs, rhs, wit3, "coercivity")
    nz = nrm_xi > 0
    chk.details = {
        "alpha": spec.alpha,
        "slack": spec.coercivity_slack,
        "observed_alpha": float(np.min(lhs[nz] / nrm_xi[nz] ** p)) if np.any(nz) else None,
    }
    checks["coercivity"] = chk

    # monotonicity over all ordered pairs of distinct xi at each (x, s)
    A3 = A.reshape(nx * ns, nk, -1)
    dA = A3[:, :, None, :] - A3[:, None, :, :]
    dXI = XI[:, None, :] - XI[None, :, :]
    mon = np.einsum("gijd,ijd->gij", dA, dXI)
    off = ~np.eye(nk, dtype=bool)
    mon_off = mon[:, off]
    g, ij = np.unravel_index(int(np.argmin(mon_off)), mon_off.shape)
    pairs = np.argwhere(off)
    xg = X[g // ns]
    checks["monotonicity"] = AssumptionCheck(
        "monotonicity",
        bool(np.all(mon_off > 0)),
        float(mon_off[g, ij]),
        {"x": xg.tolist(), "s": float(S[g % ns]), "xi": XI[pairs[ij, 0]].tolist(), "eta": XI[pairs[ij, 1]].tolist()},
        details={"note": "strict inequality checked on sampled pairs only"},
    )

    growth_rhs = spec.growth_a0 * (nrm_xi ** (p - 1) + np.abs(St) ** (p - 1)) + spec.growth_a1
    chk = _worst(growth_rhs - np.linalg.norm(A, axis=1), growth_rhs, wit3, "growth")
    chk.details = {"a0": spec.growth_a0, "a1": spec.growth_a1}
    checks["growth"] = chk

    Xs = np.repeat(X, ns, axis=0)
    Ss = np.tile(S, nx)
    Cs = np.repeat(C, ns)
    PHI = spec.phi(Xs, Ss, Cs)
    phi_rhs = Cs * (1.0 + np.abs(Ss) ** (p - 1))

    def wit2(i):
        return {"x": Xs[i].tolist(), "s": float(Ss[i]), "c": float(Cs[i])}

    checks["phi_growth"] = _worst(phi_rhs - np.linalg.norm(PHI, axis=1), phi_rhs, wit2, "phi_growth")

    if spec.lambda_term is None:
        for name in ("lambda_sign", "lambda_bound", "lambda_coercivity"):
            checks[name] = AssumptionCheck(name, True, 0.0, {}, applicable=False)
    else:
        LAM = np.asarray(spec.lambda_term(Xs, Ss), dtype=float)
        checks["lambda_sign"] = _worst(LAM * Ss, np.zeros_like(Ss), wit2, "lambda_sign")
        bounds = {}
        for k in sorted(set(np.abs(S).tolist())):
            sel = np.abs(Ss) <= k
            bounds[repr(k)] = float(np.max(np.abs(LAM[sel])))
        finite = all(math.isfinite(v) for v in bounds.values())
        checks["lambda_bound"] = AssumptionCheck("lambda_bound", finite, 0.0 if finite else -math.inf, {}, details={"c_k": bounds})
        if spec.lambda_profile is None:
            checks["lambda_coercivity"] = AssumptionCheck(
                "lambda_coercivity", False, -math.inf, {}, details={"note": "no coercivity profile g supplied"}
            )
        else:
            G = np.asarray(spec.lambda_profile(Ss), dtype=float)
            chk = _worst(np.abs(LAM) - G, G, wit2, "lambda_coercivity")
            smax = float(np.max(np.abs(S)))
            gtest = np.asarray(spec.lambda_profile(np.array([-smax, -smax / 10, smax / 10, smax])), dtype=float)
            grows = bool(gtest[0] > gtest[1] and gtest[3] > gtest[2])
            chk.passed = chk.passed and grows
            chk.details = {"profile_grows_at_extremes": grows}
            checks["lambda_coercivity"] = chk
    return AssumptionReport(checks)


def require_valid(spec: OperatorSpec, grid: SampleGrid | None = None, names=None) -> AssumptionReport:
    """Validate and raise :class:`ValidationError` listing the failed checks."""
    report = validate_assumptions(spec, grid)
    failed = [n for n in report.failures() if names is None or n in names]
    if failed:
        raise ValidationError(f"operator assumptions violated: {', '.join(failed)}")
    return report
