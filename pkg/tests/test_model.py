import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renormsolve.discretization import build_mesh, integrate, lp_norm
from renormsolve.errors import InvalidParameterError, ValidationError
from renormsolve.model import (
    LAMBDAS,
    OPERATORS,
    SampleGrid,
    bump,
    cosine_datum,
    default_grid,
    dipole,
    fd_jacobian_xi,
    make_linear_diffusion,
    make_power_lambda,
    make_prototype,
    prepare_datum,
    regularize,
    require_valid,
    unregularized,
    validate_assumptions,
    with_lambda,
)

X1 = np.zeros((1, 1))


@pytest.fixture
def mesh():
    return build_mesh("interval", 32)


def proto(mesh, p, c=0.0, delta=0.0):
    return make_prototype(p, mesh.constant(c), mesh.zeros(), delta=delta)


# ---- prototype and regularization --------------------------------------


def test_prototype_formulas(mesh):
    s2 = proto(mesh, 2.0)
    xi = np.array([[0.7], [-2.5]])
    assert np.allclose(s2.a(np.zeros((2, 1)), np.zeros(2), xi), xi)
    s3 = proto(mesh, 3.0, c=1.0)
    assert s3.a(X1, np.zeros(1), np.array([[2.0]]))[0, 0] == 4.0
    assert s3.phi(X1, np.array([-2.0]), np.ones(1))[0, 0] == -4.0


def test_prototype_rejects_bad_exponent(mesh):
    with pytest.raises(InvalidParameterError):
        proto(mesh, 1.0)
    with pytest.raises(InvalidParameterError):
        make_prototype(2.0, mesh.constant(-1.0), mesh.zeros())


def test_prototype_zero_gradient_is_finite(mesh):
    s = proto(mesh, 1.5, c=1.0)
    assert s.a(X1, np.zeros(1), np.zeros((1, 1)))[0, 0] == 0.0
    assert s.phi(X1, np.zeros(1), np.ones(1))[0, 0] == 0.0


def test_regularize_examples(mesh):
    r = regularize(proto(mesh, 2.0), 0.1)
    xi = np.array([[3.0]])
    assert r.a_eps(X1, np.array([20.0]), xi)[0, 0] == pytest.approx(1.1 * 3.0)

    def big(x, s, c):
        return np.full((len(s), 1), 50.0)

    r = regularize(replace(proto(mesh, 2.0), phi=big), 0.1)
    assert r.phi_eps(X1, np.zeros(1), np.ones(1))[0, 0] == pytest.approx(10.0)
    with pytest.raises(InvalidParameterError):
        regularize(proto(mesh, 2.0), 0.0)


# |xi|^2 must not underflow in double precision
gradients = st.floats(-5, 5).filter(lambda v: v == 0 or abs(v) > 1e-100)


@given(st.floats(1.2, 4.0), st.floats(1e-3, 0.5), gradients, st.floats(-20, 20))
def test_regularization_gap_is_eps_power(p, eps, xi, s):
    # for |s| <= 1/eps: |a_eps - a| = eps |xi|^(p-1)
    m = build_mesh("interval", 2)
    spec = make_prototype(p, m.zeros(), m.zeros())
    r = regularize(spec, eps, delta=0.0)
    s = float(np.clip(s, -1 / eps, 1 / eps))
    gap = r.a_eps(X1, np.array([s]), np.array([[xi]])) - spec.a(X1, np.array([s]), np.array([[xi]]))
    assert abs(gap[0, 0]) == pytest.approx(eps * abs(xi) ** (p - 1), rel=1e-10, abs=1e-300)


@settings(max_examples=50)
@given(st.floats(1.2, 4.0), st.floats(1e-3, 1.0), st.floats(-3, 3), st.floats(-3, 3))
def test_regularized_strict_monotonicity(p, eps, xi, eta):
    m = build_mesh("interval", 2)
    r = regularize(make_prototype(p, m.zeros(), m.zeros()), eps, delta=0.0)
    if abs(xi - eta) < 1e-6:
        return
    s = np.zeros(1)
    da = r.a_eps(X1, s, np.array([[xi]])) - r.a_eps(X1, s, np.array([[eta]]))
    lhs = da[0, 0] * (xi - eta)
    pw = lambda z: abs(z) ** (p - 2) * z if z else 0.0
    assert lhs >= eps * (pw(xi) - pw(eta)) * (xi - eta) * (1 - 1e-12) > 0


def test_regularized_coercivity_margin(mesh):
    for p, delta in ((1.6, 1e-3), (2.0, 0.0), (3.0, 1e-3)):
        r = regularize(proto(mesh, p, delta=delta), 0.05)
        xi = np.linspace(-4, 4, 81)[:, None]
        lhs = np.sum(r.a_eps(np.zeros((81, 1)), np.zeros(81), xi) * xi, axis=1)
        rhs = r.alpha * np.abs(xi[:, 0]) ** p - r.coercivity_slack
        assert np.all(lhs >= rhs - 1e-12)


def test_unregularized_is_identity(mesh):
    spec = proto(mesh, 3.0, c=1.0)
    r = unregularized(spec)
    xi = np.array([[1.3]])
    s = np.array([1e9])
    assert np.array_equal(r.a_eps(X1, s, xi), spec.a(X1, s, xi))
    assert np.array_equal(r.phi_eps(X1, s, np.ones(1)), spec.phi(X1, s, np.ones(1)))


@pytest.mark.parametrize("p", [1.6, 2.0, 3.0])
def test_analytic_jacobian_matches_fd(p):
    m = build_mesh("unit_square", 2)
    spec = make_prototype(p, m.zeros(), m.zeros(), delta=1e-3)
    rng = np.random.default_rng(3)
    xi = rng.normal(size=(10, 2))
    x = np.zeros((10, 2))
    s = np.zeros(10)
    assert np.allclose(spec.a_jacobian(x, s, xi), fd_jacobian_xi(spec.a, x, s, xi), rtol=1e-6, atol=1e-8)


def test_linear_diffusion_and_registry(mesh):
    spec = make_linear_diffusion(mesh.constant(0.2), mesh.zeros(), kappa=2.0)
    assert spec.p == 2.0 and spec.alpha == 2.0
    assert spec.a(X1, np.zeros(1), np.array([[1.5]]))[0, 0] == 3.0
    assert set(OPERATORS) == {"prototype", "linear-diffusion"}
    assert set(LAMBDAS) == {"power-lambda"}


# ---- data ---------------------------------------------------------------


@pytest.mark.parametrize("dim", [1, 2])
def test_bump_mass_by_quadrature(dim):
    m = build_mesh("interval", 400) if dim == 1 else build_mesh("unit_square", 80)
    center = (0.5,) * dim
    b = bump(center, 0.2, mass=2.0)
    assert integrate(m, b, order=6) == pytest.approx(2.0, rel=2e-3)


def test_dipole_overlap_rejected():
    with pytest.raises(InvalidParameterError):
        dipole((0.5,), (0.55,), 0.1)


def test_prepare_datum_noop_path(mesh):
    f = mesh.interpolate(lambda x: np.cos(np.pi * x[:, 0]))
    out = prepare_datum(f, mesh, 0.1)
    assert np.allclose(out.nodal_values, f.nodal_values, atol=1e-14)
    assert abs(out.integral()) <= 1e-12 * lp_norm(f, 1.0)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-4])
def test_prepare_datum_dipole_constraints(eps):
    m = build_mesh("unit_square", 16)
    d = dipole((0.3, 0.3), (0.7, 0.7), 0.1, mass=1.0)
    f = prepare_datum(d, m, eps)
    l1 = lp_norm(f, 1.0)
    assert abs(f.integral()) <= 1e-12 * max(1.0, l1)
    assert l1 <= 2.0 * (1 + 1e-12)
    assert f.max_abs() <= 1.0 / eps * (1 + 1e-12) + 1e-12


def test_prepare_datum_without_compat(mesh):
    f = prepare_datum(lambda x: np.ones(len(x)), mesh, 0.1, require_compat=False)
    assert f.integral() == pytest.approx(1.0)


def test_prepare_datum_zero(mesh):
    f = prepare_datum(lambda x: np.zeros(len(x)), mesh, 0.1)
    assert not np.any(f.nodal_values)


def test_cosine_datum_is_minus_laplacian():
    f = cosine_datum(2)
    x = np.array([[0.2, 0.7]])
    u = lambda y: np.cos(np.pi * y[:, 0]) * np.cos(np.pi * y[:, 1])
    assert f(x)[0] == pytest.approx(2 * np.pi**2 * u(x)[0])


# ---- validation ---------------------------------------------------------


def test_prototype_passes_all(mesh):
    rep = validate_assumptions(proto(mesh, 2.0, c=0.5))
    assert rep.passed
    assert rep["coercivity"].details["observed_alpha"] == pytest.approx(1.0)
    assert rep["coercivity"].witness
    assert not rep["lambda_sign"].applicable


@pytest.mark.parametrize("p,delta", [(1.6, 1e-6), (3.0, 1e-6), (3.0, 0.0)])
def test_smoothed_prototypes_pass(mesh, p, delta):
    assert validate_assumptions(proto(mesh, p, c=1.0, delta=delta)).passed


def test_negative_flux_fails_coercivity(mesh):
    spec = replace(proto(mesh, 2.0), a=lambda x, s, xi: -xi)
    rep = validate_assumptions(spec)
    assert not rep["coercivity"].passed
    assert np.linalg.norm(rep["coercivity"].witness["xi"]) > 0
    with pytest.raises(ValidationError, match="coercivity"):
        require_valid(spec)


def test_phi_growth_equality_passes_with_zero_margin(mesh):
    p = 2.5

    def phi(x, s, c):
        return (c * (1 + np.abs(s) ** (p - 1)))[:, None]

    rep = validate_assumptions(replace(proto(mesh, p, c=0.7), phi=phi))
    assert rep["phi_growth"].passed
    assert rep["phi_growth"].margin == pytest.approx(0.0, abs=1e-12)


def test_lambda_checks(mesh):
    lam, lam_ds, g = make_power_lambda(2.0)
    spec = with_lambda(proto(mesh, 2.0), lam, lam_ds, g)
    rep = validate_assumptions(spec)
    assert rep["lambda_sign"].passed and rep["lambda_bound"].passed and rep["lambda_coercivity"].passed
    bad = with_lambda(proto(mesh, 2.0), lambda x, s: -s, None, g)
    rep = validate_assumptions(bad)
    assert not rep["lambda_sign"].passed
    assert rep["lambda_sign"].witness["s"] != 0


def test_custom_grid_and_report_dict(mesh):
    grid = SampleGrid(np.array([[0.25]]), np.array([-1.0, 1.0]), np.array([[0.5], [2.0]]))
    d = validate_assumptions(proto(mesh, 2.0), grid).to_dict()
    assert d["passed"] and set(d["checks"]) >= {"coercivity", "monotonicity", "growth", "phi_growth"}


def test_default_grid_nonempty(mesh):
    g = default_grid(mesh)
    assert len(g.x_points) and len(g.s_levels) and len(g.xi_vectors)


def test_compatibility_defect(mesh):
    f = mesh.interpolate(lambda x: np.cos(np.pi * x[:, 0]))
    spec = make_prototype(2.0, mesh.zeros(), f)
    defect, l1 = spec.compatibility_defect()
    assert defect <= 1e-12 * l1
    assert l1 == pytest.approx(2 / math.pi, rel=1e-2)
