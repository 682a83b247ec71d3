"""Simplicial meshes, continuous P1 fields, quadrature and scalar calculus.

Everything here is pure value semantics: meshes and fields are treated as
immutable once built (their arrays are flagged read-only), so they can be
shared freely between solves.

Callables passed to :func:`integrate` (and the operator callables in
:mod:`renormsolve.model`) are vectorised: they receive an ``(M, d)`` array of
points and must return an ``(M,)`` array.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InvalidDomainError, InvalidParameterError, NumericError

DEFAULT_ORDER = 4
# Relative tolerance used when deciding ties against meas(Omega)/2.
MEDIAN_TIE_RTOL = 1e-12


# --------------------------------------------------------------------------
# Domains and meshes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    a: float = 0.0
    b: float = 1.0

    @property
    def label(self) -> str:
        return f"interval({self.a:g},{self.b:g})"


@dataclass(frozen=True)
class UnitSquare:
    @property
    def label(self) -> str:
        return "unit_square"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class Mesh:
    """Conforming simplicial mesh of a connected domain (intervals or triangles).

    ``nodes`` has shape ``(n_nodes, dimension)`` and ``elements`` shape
    ``(n_elements, dimension + 1)``.  Triangles with negative orientation are
    flipped on construction so that every element measure is positive.
    """

    dimension: int
    nodes: np.ndarray
    elements: np.ndarray
    label: str = "mesh"
    element_measures: np.ndarray = field(init=False)
    total_measure: float = field(init=False)
    _cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise InvalidDomainError(f"dimension must be 1 or 2, got {self.dimension}")
        nodes = np.array(self.nodes, dtype=float).reshape(-1, self.dimension)
        elements = np.array(self.elements, dtype=np.int64).reshape(-1, self.dimension + 1)
        n = len(nodes)
        if len(elements) == 0:
            raise InvalidDomainError("mesh has no elements")
        if elements.min() < 0 or elements.max() >= n:
            raise InvalidDomainError("element node index out of range")
        srt = np.sort(elements, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise InvalidDomainError("element with repeated node index")
        if not np.all(np.isfinite(nodes)):
            raise InvalidDomainError("non-finite node coordinate")

        if self.dimension == 1:
            measures = nodes[elements[:, 1], 0] - nodes[elements[:, 0], 0]
            flip = measures < 0
            elements[flip] = elements[flip][:, ::-1]
            measures = np.abs(measures)
        else:
            e1 = nodes[elements[:, 1]] - nodes[elements[:, 0]]
            e2 = nodes[elements[:, 2]] - nodes[elements[:, 0]]
            signed = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
            flip = signed < 0
            elements[flip] = elements[flip][:, [0, 2, 1]]
            measures = np.abs(signed)
        bad = np.flatnonzero(~(measures > 0))
        if bad.size:
            raise InvalidDomainError(f"degenerate element {int(bad[0])}")

        k = self.dimension + 1
        rows = np.repeat(elements, k, axis=1).ravel()
        cols = np.tile(elements, (1, k)).ravel()
        adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise InvalidDomainError(f"mesh is not connected ({ncomp} components)")

        self.nodes = _readonly(nodes)
        self.elements = _readonly(elements)
        self.element_measures = _readonly(measures)
        self.total_measure = float(math.fsum(measures))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def diameter(self) -> float:
        span = self.nodes.max(axis=0) - self.nodes.min(axis=0)
        return float(np.linalg.norm(span))

    @property
    def h(self) -> float:
        """Largest element size (length, or longest triangle edge)."""
        if "h" not in self._cache:
            P = self.nodes[self.elements]
            k = self.dimension + 1
            lengths = [np.linalg.norm(P[:, i] - P[:, j], axis=1) for i in range(k) for j in range(i + 1, k)]
            self._cache["h"] = float(np.max(lengths))
        return self._cache["h"]

    @property
    def lumped_measures(self) -> np.ndarray:
        """Per-node share of meas(Omega): adjacent element measures / nodes per element."""
        if "lumped" not in self._cache:
            k = self.dimension + 1
            w = np.repeat(self.element_measures / k, k)
            self._cache["lumped"] = _readonly(np.bincount(self.elements.ravel(), weights=w, minlength=self.n_nodes))
        return self._cache["lumped"]

    @property
    def basis_gradients(self) -> np.ndarray:
        """Gradients of the P1 basis, shape ``(n_elements, dimension + 1, dimension)``."""
        if "grads" not in self._cache:
            P = self.nodes[self.elements]
            if self.dimension == 1:
                inv_h = 1.0 / (P[:, 1, 0] - P[:, 0, 0])
                g = np.stack([-inv_h, inv_h], axis=1)[:, :, None]
            else:
                E = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)  # columns are edges
                Einv = np.linalg.inv(E)  # rows are grad(lambda_1), grad(lambda_2)
                g = np.concatenate([-Einv.sum(axis=1, keepdims=True), Einv], axis=1)
            self._cache["grads"] = _readonly(g)
        return self._cache["grads"]

    def quadrature_points(self, rule: "QuadratureRule") -> np.ndarray:
        """Physical quadrature points, shape ``(n_elements, n_points, dimension)``."""
        return np.einsum("qj,ejd->eqd", rule.points, self.nodes[self.elements])

    def field(self, values) -> "DiscreteField":
        return DiscreteField(self, values)

    def interpolate(self, func: Callable[[np.ndarray], np.ndarray]) -> "DiscreteField":
        """Nodal interpolant of a vectorised callable."""
        vals = np.asarray(func(self.nodes), dtype=float).reshape(-1)
        return DiscreteField(self, vals)

    def constant(self, value: float) -> "DiscreteField":
        return DiscreteField(self, np.full(self.n_nodes, float(value)))

    def zeros(self) -> "DiscreteField":
        return self.constant(0.0)


def build_mesh(domain, resolution: int) -> Mesh:
    """Uniform mesh of an interval or of the unit square.

    ``domain`` is an :class:`Interval`, :class:`UnitSquare`, the string
    ``"unit_square"`` or a tuple ``("interval", a, b)``.  The unit square is
    split into ``2 * resolution**2`` triangles along the (i, j)-(i+1, j+1)
    diagonals.
    """
    if isinstance(domain, str):
        if domain == "unit_square":
            domain = UnitSquare()
        elif domain == "interval":
            domain = Interval()
        else:
            raise InvalidDomainError(f"unknown domain {domain!r}")
    elif isinstance(domain, tuple):
        if len(domain) != 3 or domain[0] != "interval":
            raise InvalidDomainError(f"unknown domain {domain!r}")
        domain = Interval(float(domain[1]), float(domain[2]))
    if int(resolution) != resolution or resolution < 1:
        raise InvalidDomainError(f"resolution must be a positive integer, got {resolution!r}")
    n = int(resolution)

    if isinstance(domain, Interval):
        if not domain.a < domain.b:
            raise InvalidDomainError(f"need a < b, got a={domain.a}, b={domain.b}")
        x = np.linspace(domain.a, domain.b, n + 1)
        elems = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        return Mesh(1, x[:, None], elems, label=f"{domain.label}/{n}")
    if isinstance(domain, UnitSquare):
        t = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(t, t, indexing="xy")
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[j, i] is node (x_i, y_j)
        p00 = idx[:-1, :-1].ravel()
        p10 = idx[:-1, 1:].ravel()
        p01 = idx[1:, :-1].ravel()
        p11 = idx[1:, 1:].ravel()
        lower = np.stack([p00, p10, p11], axis=1)
        upper = np.stack([p00, p11, p01], axis=1)
        elems = np.stack([lower, upper], axis=1).reshape(-1, 3)
        return Mesh(2, nodes, elems, label=f"{domain.label}/{n}")
    raise InvalidDomainError(f"unsupported domain {domain!r}")


# --------------------------------------------------------------------------
# Quadrature
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Rule on the reference simplex: barycentric points and weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray
    order: int


def _gauss_interval(order: int) -> QuadratureRule:
    n = max(1, math.ceil((order + 1) / 2))
    xi, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (xi + 1.0)
    return QuadratureRule(np.stack([1.0 - t, t], axis=1), 0.5 * w, 2 * n - 1)


def _sym3(entries) -> tuple[np.ndarray, np.ndarray]:
    pts, wts = [], []
    for a, w in entries:
        b = 1.0 - 2.0 * a
        for perm in ((a, a, b), (a, b, a), (b, a, a)):
            pts.append(perm)
            wts.append(w)
    return np.array(pts), np.array(wts)


def _triangle_rule(order: int) -> QuadratureRule:
    if order <= 1:
        return QuadratureRule(np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]), 1)
    if order == 2:
        pts, wts = _sym3([(1 / 6, 1 / 3)])
        return QuadratureRule(pts, wts, 2)
    if order <= 4:
        # Dunavant degree-4 six-point rule
        pts, wts = _sym3(
            [
                (0.44594849091596488632, 0.22338158967801146570),
                (0.091576213509770743460, 0.10995174365532186764),
            ]
        )
        return QuadratureRule(pts, wts, 4)
    if order == 5:
        r15 = math.sqrt(15.0)
        pts, wts = _sym3([((6 - r15) / 21, (155 - r15) / 1200), ((6 + r15) / 21, (155 + r15) / 1200)])
        pts = np.vstack([[1 / 3, 1 / 3, 1 / 3], pts])
        wts = np.concatenate([[9 / 40], wts])
        return QuadratureRule(pts, wts, 5)
    # collapsed (Duffy) tensor Gauss rule for anything higher
    n = math.ceil((order + 2) / 2)
    xi, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (xi + 1.0)
    w = 0.5 * w
    U, V = np.meshgrid(t, t, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    wts = 2.0 * (WU * WV * (1.0 - U)).ravel()
    return QuadratureRule(np.stack([1.0 - x - y, x, y], axis=1), wts, order)


def get_quadrature(dimension: int, order: int = DEFAULT_ORDER) -> QuadratureRule:
    if order < 1:
        raise InvalidParameterError(f"quadrature order must be >= 1, got {order}")
    if dimension == 1:
        return _gauss_interval(order)
    if dimension == 2:
        return _triangle_rule(order)
    raise InvalidParameterError(f"no quadrature for dimension {dimension}")


def _first_bad(values: np.ndarray) -> int | None:
    bad = ~np.isfinite(values)
    if values.ndim > 1:
        bad = bad.reshape(len(values), -1).any(axis=1)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None


def check_finite(values: np.ndarray, what: str) -> None:
    """Raise :class:`NumericError` naming the first element with a non-finite entry."""
    e = _first_bad(values)
    if e is not None:
        raise NumericError(f"non-finite {what}", element=e)


def integrate(mesh: Mesh, integrand: Callable[[np.ndarray], np.ndarray], order: int = DEFAULT_ORDER) -> float:
    """Integrate a vectorised pointwise callable over the mesh."""
    rule = get_quadrature(mesh.dimension, order)
    X = mesh.quadrature_points(rule)
    ne, nq, d = X.shape
    vals = np.asarray(integrand(X.reshape(-1, d)), dtype=float).reshape(ne, nq)
    check_finite(vals, "integrand value")
    return float(np.sum(mesh.element_measures * (vals @ rule.weights)))


# --------------------------------------------------------------------------
# Fields
# --------------------------------------------------------------------------


@dataclass(eq=False)
class DiscreteField:
    """Continuous piecewise-linear function given by its nodal values."""

    mesh: Mesh
    nodal_values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.nodal_values, dtype=float).reshape(-1)
        if vals.shape != (self.mesh.n_nodes,):
            raise InvalidParameterError(f"expected {self.mesh.n_nodes} nodal values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise NumericError("non-finite nodal value")
        self.nodal_values = _readonly(vals)

    @property
    def lumped_node_measures(self) -> np.ndarray:
        return self.mesh.lumped_measures

    @property
    def values(self) -> np.ndarray:
        return self.nodal_values

    def _other(self, other):
        if isinstance(other, DiscreteField):
            if other.mesh is not self.mesh:
                raise InvalidParameterError("fields live on different meshes")
            return other.nodal_values
        return float(other)

    def __add__(self, other):
        return DiscreteField(self.mesh, self.nodal_values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return DiscreteField(self.mesh, self.nodal_values - self._other(other))

    def __rsub__(self, other):
        return DiscreteField(self.mesh, self._other(other) - self.nodal_values)

    def __neg__(self):
        return DiscreteField(self.mesh, -self.nodal_values)

    def __mul__(self, scalar):
        return DiscreteField(self.mesh, self.nodal_values * float(scalar))

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.nodal_values)))

    def gradients(self) -> np.ndarray:
        """Element-wise constant gradient, shape ``(n_elements, dimension)``."""
        U = self.nodal_values[self.mesh.elements]
        return np.einsum("ej,ejd->ed", U, self.mesh.basis_gradients)

    def at_quadrature(self, rule: QuadratureRule) -> np.ndarray:
        """Values at the quadrature points, shape ``(n_elements, n_points)``."""
        return self.nodal_values[self.mesh.elements] @ rule.points.T

    def integral(self) -> float:
        return float(self.nodal_values @ self.mesh.lumped_measures)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Point values; points outside the mesh raise."""
        elem, bary = locate(self.mesh, points)
        return np.einsum("mj,mj->m", self.nodal_values[self.mesh.elements[elem]], bary)


def _barycentric(mesh: Mesh, pts: np.ndarray, elems: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of pts[m] in each candidate element elems[m, j]."""
    P0 = mesh.nodes[mesh.elements[elems, 0]]  # (M, J, d)
    rel = pts[:, None, :] - P0
    if mesh.dimension == 1:
        hi = mesh.nodes[mesh.elements[elems, 1], 0]
        t = rel[..., 0] / (hi - P0[..., 0])
        return np.stack([1.0 - t, t], axis=2)
    G = mesh.basis_gradients[elems]  # (M, J, 3, 2)
    l12 = np.einsum("mjkd,mjd->mjk", G[:, :, 1:, :], rel)
    return np.concatenate([1.0 - l12.sum(axis=2, keepdims=True), l12], axis=2)


def locate(mesh: Mesh, points: np.ndarray, tol: float = 1e-12, candidates: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Containing element and barycentric coordinates of each point.

    Candidates come from the nearest element centroids; points they miss fall
    back to a chunked scan of all elements.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, mesh.dimension)
    n_el = mesh.n_elements
    tree = mesh._cache.get("centroid_tree")
    if tree is None:
        tree = cKDTree(mesh.nodes[mesh.elements].mean(axis=1))
        mesh._cache["centroid_tree"] = tree
    kq = min(candidates, n_el)
    _, cand = tree.query(pts, k=kq)
    cand = np.asarray(cand).reshape(len(pts), kq)
    # ascending element index keeps the choice on shared edges deterministic
    cand = np.sort(cand, axis=1)
    bary_c = _barycentric(mesh, pts, cand)
    inside = np.all(bary_c >= -tol, axis=2)
    hit = inside.any(axis=1)
    pick = np.argmax(inside, axis=1)
    elem = cand[np.arange(len(pts)), pick]
    bary = bary_c[np.arange(len(pts)), pick]

    missed = np.flatnonzero(~hit)
    if len(missed):
        all_el = np.arange(n_el)
        step = max(1, 2_000_000 // n_el)
        for i in range(0, len(missed), step):
            idx = missed[i : i + step]
            b = _barycentric(mesh, pts[idx], np.broadcast_to(all_el, (len(idx), n_el)))
            ins = np.all(b >= -tol, axis=2)
            if not np.all(ins.any(axis=1)):
                bad = idx[int(np.flatnonzero(~ins.any(axis=1))[0])]
                raise InvalidParameterError(f"point {pts[bad].tolist()} lies outside the mesh")
            j = np.argmax(ins, axis=1)
            elem[idx] = j
            bary[idx] = b[np.arange(len(idx)), j]
    return elem, bary


# --------------------------------------------------------------------------
# Scalar calculus
# --------------------------------------------------------------------------


def truncate(s, k: float):
    """T_k(s) = min(k, max(s, -k)); works on scalars and arrays."""
    if k < 0:
        raise InvalidParameterError(f"truncation height must be >= 0, got {k}")
    out = np.clip(s, -k, k)
    return float(out) if np.ndim(out) == 0 else out


def truncate_field(u: DiscreteField, k: float) -> DiscreteField:
    # nodal clamping keeps the truncate in the P1 space
    return DiscreteField(u.mesh, truncate(u.nodal_values, k))


def cutoff_h(s, n: float):
    """Piecewise-linear cut-off: 1 on |s| <= n, (2n - |s|)/n on n < |s| <= 2n, 0 beyond."""
    if n <= 0:
        raise InvalidParameterError(f"cut-off level must be > 0, got {n}")
    a = np.abs(np.asarray(s, dtype=float))
    out = np.clip((2.0 * n - a) / n, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def psi_transform(r, p: float):
    """Integral of (1+|s|)^{-p} from 0 to r, in closed form."""
    if p < 1:
        raise InvalidParameterError(f"p must be >= 1, got {p}")
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    if p == 1:
        out = np.sign(r) * np.log1p(a)
    else:
        out = np.sign(r) * -np.expm1((1.0 - p) * np.log1p(a)) / (p - 1.0)
    return float(out) if out.ndim == 0 else out


def psi_field(u: DiscreteField, p: float) -> DiscreteField:
    return DiscreteField(u.mesh, psi_transform(u.nodal_values, p))


def weighted_median(values, weights, strict: bool = False) -> float:
    """sup{t : W(values > t) >= W/2} for nonnegative weights.

    With ``strict=True`` the condition is ``W(values > t) > W/2`` instead.  The
    supremum is always attained at one of the values.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if v.size == 0 or v.size != w.size:
        raise InvalidParameterError("values and weights must be nonempty and of equal length")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    uniq, start = np.unique(v, return_index=True)
    wsum = np.add.reduceat(w, start)
    total = float(wsum.sum())
    # above[j] = weight strictly above uniq[j], summed from the top for accuracy
    above = np.concatenate([np.cumsum(wsum[::-1])[::-1][1:], [0.0]])
    half = 0.5 * total
    tol = MEDIAN_TIE_RTOL * total
    if strict:
        ok = above <= half + tol
    else:
        ok = above < half - tol
    return float(uniq[np.argmax(ok)])


def median(u: DiscreteField, strict: bool = False) -> float:
    """Median of a field, weighting nodal values by lumped node measures."""
    return weighted_median(u.nodal_values, u.lumped_node_measures, strict=strict)


def nodal_gap(u: DiscreteField) -> float:
    """Largest gap between consecutive distinct nodal values (0 for constants)."""
    uniq = np.unique(u.nodal_values)
    return float(np.max(np.diff(uniq))) if uniq.size > 1 else 0.0


def _check_p(p: float) -> None:
    if not p >= 1:
        raise InvalidParameterError(f"p must be >= 1, got {p}")


def _quad_weights(mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    return mesh.element_measures[:, None] * rule.weights[None, :]


def lp_norm(u: DiscreteField, p: float, order: int = DEFAULT_ORDER) -> float:
    _check_p(p)
    rule = get_quadrature(u.mesh.dimension, order)
    vals = np.abs(u.at_quadrature(rule)) ** p
    return float(np.sum(_quad_weights(u.mesh, rule) * vals) ** (1.0 / p))


def w1p_seminorm(u: DiscreteField, p: float) -> float:
    _check_p(p)
    g = np.linalg.norm(u.gradients(), axis=1)
    return float(np.sum(u.mesh.element_measures * g**p) ** (1.0 / p))


def w1p_norm(u: DiscreteField, p: float, order: int = DEFAULT_ORDER) -> float:
    return (lp_norm(u, p, order) ** p + w1p_seminorm(u, p) ** p) ** (1.0 / p)


def lp_error(u: DiscreteField, exact: Callable, p: float, order: int = 6) -> float:
    """L^p distance between a field and a vectorised exact function."""
    _check_p(p)
    rule = get_quadrature(u.mesh.dimension, order)
    X = u.mesh.quadrature_points(rule)
    ne, nq, d = X.shape
    ex = np.asarray(exact(X.reshape(-1, d)), dtype=float).reshape(ne, nq)
    diff = np.abs(u.at_quadrature(rule) - ex) ** p
    return float(np.sum(_quad_weights(u.mesh, rule) * diff) ** (1.0 / p))


def w1p_error(u: DiscreteField, exact_grad: Callable, p: float, order: int = 6) -> float:
    """W^{1,p} seminorm distance; ``exact_grad`` maps ``(M, d)`` points to ``(M, d)``."""
    _check_p(p)
    rule = get_quadrature(u.mesh.dimension, order)
    X = u.mesh.quadrature_points(rule)
    ne, nq, d = X.shape
    ex = np.asarray(exact_grad(X.reshape(-1, d)), dtype=float).reshape(ne, nq, d)
    diff = np.linalg.norm(u.gradients()[:, None, :] - ex, axis=2) ** p
    return float(np.sum(_quad_weights(u.mesh, rule) * diff) ** (1.0 / p))


def _measure_above(values: np.ndarray, measures: np.ndarray, t: float) -> float:
    """meas{u > t} for P1 data given per-element nodal values (exact level-set slicing)."""
    if values.shape[1] == 2:
        lo, hi = values.min(axis=1), values.max(axis=1)
        span = hi - lo
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(span > 0, np.clip((hi - t) / span, 0.0, 1.0), (lo > t).astype(float))
        return float(np.sum(measures * frac))
    s = np.sort(values, axis=1)
    u0, u1, u2 = s[:, 0], s[:, 1], s[:, 2]
    frac = np.zeros_like(u0)
    frac[t < u0] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = (u1 <= t) & (t < u2)
        frac = np.where(upper, (u2 - t) ** 2 / ((u2 - u0) * (u2 - u1)), frac)
        lower = (u0 <= t) & (t < u1)
        frac = np.where(lower, 1.0 - (t - u0) ** 2 / ((u1 - u0) * (u2 - u0)), frac)
    return float(np.sum(measures * frac))


def distribution_measure(u: DiscreteField, t: float) -> float:
    """meas{|u| > t}, computed by exact slicing of the piecewise-linear field."""
    if t < 0:
        raise InvalidParameterError(f"level must be >= 0, got {t}")
    U = u.nodal_values[u.mesh.elements]
    m = u.mesh.element_measures
    return _measure_above(U, m, t) + _measure_above(-U, m, t)


# --------------------------------------------------------------------------
# Snapshot text format
# --------------------------------------------------------------------------

SNAPSHOT_MAGIC = "renormsolve-snapshot 1"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dumps_snapshot(mesh: Mesh, values: DiscreteField | np.ndarray | None = None) -> str:
    """Line-oriented text: header, node coordinates, element indices, nodal values."""
    vals = values.nodal_values if isinstance(values, DiscreteField) else values
    out = io.StringIO()
    out.write(f"{SNAPSHOT_MAGIC}\n")
    out.write(f"dimension {mesh.dimension}\n")
    out.write(f"label {mesh.label}\n")
    out.write(f"nodes {mesh.n_nodes}\n")
    out.write(f"elements {mesh.n_elements}\n")
    out.write(f"values {0 if vals is None else len(vals)}\n")
    for row in mesh.nodes:
        out.write(" ".join(_fmt(c) for c in row) + "\n")
    for row in mesh.elements:
        out.write(" ".join(str(int(i)) for i in row) + "\n")
    if vals is not None:
        for v in vals:
            out.write(_fmt(float(v)) + "\n")
    return out.getvalue()


def loads_snapshot(text: str) -> tuple[Mesh, DiscreteField | None]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SNAPSHOT_MAGIC:
        raise InvalidParameterError("not a snapshot file")
    header = {}
    for line in lines[1:6]:
        key, _, val = line.partition(" ")
        header[key] = val
    try:
        dim = int(header["dimension"])
        nn, ne, nv = int(header["nodes"]), int(header["elements"]), int(header["values"])
    except (KeyError, ValueError) as exc:
        raise InvalidParameterError(f"malformed snapshot header: {exc}") from None
    body = lines[6:]
    if len(body) != nn + ne + nv:
        raise InvalidParameterError("snapshot body length does not match header")
    nodes = np.array([[float(c) for c in ln.split()] for ln in body[:nn]])
    elems = np.array([[int(c) for c in ln.split()] for ln in body[nn : nn + ne]])
    mesh = Mesh(dim, nodes, elems, label=header.get("label", "mesh"))
    fld = None
    if nv:
        fld = DiscreteField(mesh, np.array([float(ln) for ln in body[nn + ne :]]))
    return mesh, fld


def write_snapshot(path, mesh: Mesh, values=None) -> None:
    Path(path).write_text(dumps_snapshot(mesh, values), encoding="utf-8")


def read_snapshot(path) -> tuple[Mesh, DiscreteField | None]:
    return loads_snapshot(Path(path).read_text(encoding="utf-8"))
