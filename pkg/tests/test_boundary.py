import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magray import fields as F
from magray.boundary import (
    action,
    action_batch,
    action_boundary_derivative,
    action_minimization_oracle,
    boundary_limit_check,
    gauge_transform,
    interior_action,
    linearization_check,
    linearization_formula,
    requadrature_action,
    reversibility_residual,
    scatter_fan,
    scattering,
    simplicity_report,
    wrap,
)
from magray.geometry import ConformalMetric, Disk, EuclideanMetric, InvalidDiffeoError, MagneticSystem, constant_field_system
from magray.transform import random_bump_pair

from _oracles import arc_exit


def _angle(v):
    return np.arctan2(v[..., 1], v[..., 0])


def test_scattering_straight_line(euclid):
    rec = scattering(euclid, np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    assert np.allclose(rec.y, [1.0, 0.0], atol=1e-10)
    assert np.allclose(rec.eta, [1.0, 0.0], atol=1e-10)
    assert rec.ell == pytest.approx(2.0, abs=1e-10)
    assert not rec.grazing


@given(phi=st.floats(0, 2 * np.pi), th=st.floats(-1.4, 1.4))
@settings(max_examples=15)
def test_scattering_constant_field_closed_form(phi, th):
    s = constant_field_system(0.5)
    x, xi = s.boundary_state(phi, th)
    rec = scattering(s, x, xi)
    y, eta, t = arc_exit(x, xi, 0.5)
    assert np.allclose(rec.y, y, atol=1e-7)
    assert np.allclose(rec.eta, eta, atol=1e-7)
    assert rec.ell == pytest.approx(t, abs=1e-7)
    assert rec.eta @ s.inward_normal(rec.y) <= 1e-12


def test_scattering_reversed_system_returns_entry(field03):
    phi, th = np.linspace(0, 6, 10), np.linspace(-1.2, 1.2, 10)
    rec = scatter_fan(field03, phi, th)
    back = scatter_fan(field03.reversed(), field03.domain.param(rec.y), field03.boundary_angle(rec.y, -rec.eta))
    assert np.max(np.abs(back.y - rec.x)) < 1e-6
    assert np.max(np.abs(back.eta + rec.xi)) < 1e-6


def test_euclidean_action_is_chord_length(euclid, rng):
    px = rng.uniform(0, 2 * np.pi, 30)
    py = px + rng.uniform(0.1, 2 * np.pi - 0.1, 30)
    A, _, _, _ = action_batch(euclid, px, py)
    chord = np.linalg.norm(euclid.domain.point(px) - euclid.domain.point(py), axis=1)
    assert np.max(np.abs(A - chord)) < 1e-7


def test_action_rejects_coincident_points(field03):
    with pytest.raises(ValueError):
        action_batch(field03, 1.0, 1.0)


def test_action_matches_direct_minimization(field03):
    x, y = np.array([-1.0, 0.0]), np.array([1.0, 0.0])
    A = action(field03, x, y).A
    assert A == pytest.approx(action_minimization_oracle(field03, x, y), abs=1e-3)


def test_action_reversal_symmetry(field03):
    x, y = field03.domain.point(0.3), field03.domain.point(0.3 + np.pi)
    assert action(field03, x, y).A == pytest.approx(action(field03.reversed(), y, x).A, abs=1e-7)


def test_action_equals_requadrature(field03):
    av = action(field03, field03.domain.point(0.2), field03.domain.point(2.5))
    assert av.residual < 1e-9
    assert av.A == pytest.approx(requadrature_action(field03, av.geodesic), abs=1e-9)
    assert av.A == pytest.approx(av.T - av.alpha_integral, abs=1e-14)


def test_action_converges_in_integrator_tolerance(field03):
    px, py = np.array([0.4, 1.0]), np.array([3.0, 5.0])
    A1, _, _, _ = action_batch(field03, px, py, rtol=1e-10, atol=1e-10)
    A2, _, _, _ = action_batch(field03, px, py, rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(A1 - A2)) < 1e-8


def test_boundary_derivative_euclidean_closed_form(euclid):
    x, y = euclid.domain.point(0.4), euclid.domain.point(2.9)
    tau = euclid.unit_tangent(x)
    out = action_boundary_derivative(euclid, x, y, tau)
    expected = -np.dot((y - x) / np.linalg.norm(y - x), tau)
    assert out["formula"] == pytest.approx(expected, abs=1e-6)
    assert out["fd"] == pytest.approx(expected, abs=1e-6)


def test_boundary_derivative_zero_direction(field03):
    out = action_boundary_derivative(field03, field03.domain.point(0.4), field03.domain.point(2.0), np.zeros(2))
    assert out["formula"] == 0 and out["fd"] == 0


def test_boundary_derivative_constant_field(field03):
    x, y = field03.domain.point(1.0), field03.domain.point(4.0)
    out = action_boundary_derivative(field03, x, y, field03.unit_tangent(x))
    assert out["gap"] < 1e-5


def test_shooting_direction_from_action_derivative(field03):
    # <gamma_dot(0), tau> = alpha(tau) - dA(tau) recovers sin(theta*) of the shooting angle
    for px, py in ((0.5, 2.0), (1.0, 4.5), (2.0, 5.5)):
        x, y = field03.domain.point(px), field03.domain.point(py)
        tau = field03.unit_tangent(x)
        fd = action_boundary_derivative(field03, x, y, tau)["fd"]
        _, th, _, _ = action_batch(field03, px, py)
        recon = float(np.dot(field03.alpha.value(x), tau)) - fd
        assert recon == pytest.approx(np.sin(th[0]), abs=1e-5)


@pytest.mark.parametrize("direction", [1.0, -1.0])
def test_boundary_action_limit(field03, direction):
    out = boundary_limit_check(field03, 0.8, direction)
    assert out["gap"] < 1e-4


def test_gauge_identity_is_trivial(field03, rng):
    other = gauge_transform(field03, F.IdentityDiffeo(), None)
    X = 0.9 * rng.uniform(-0.7, 0.7, (20, 2))
    assert np.max(np.abs(other.g(X) - field03.g(X))) < 1e-12
    assert np.max(np.abs(other.alpha.value(X) - field03.alpha.value(X))) < 1e-12
    assert np.max(np.abs(other.omega(X) - field03.omega(X))) < 1e-12


def test_gauge_invariance_of_boundary_action(field03, rng):
    other = gauge_transform(field03, F.RadialDiffeo(0.2), F.radial_quadratic(0.1))
    px = rng.uniform(0, 2 * np.pi, 10)
    py = px + rng.uniform(0.5, 2 * np.pi - 0.5, 10)
    a0 = action_batch(field03, px, py)[0]
    a1 = action_batch(other, px, py)[0]
    assert np.max(np.abs(a0 - a1)) < 1e-5


def test_gauge_invariance_of_scattering(field03):
    other = gauge_transform(field03, F.RadialDiffeo(0.2), F.radial_quadratic(0.1))
    phi = np.repeat(np.linspace(0, 2 * np.pi, 8, endpoint=False), 8)
    th = np.tile(np.linspace(-1.2, 1.2, 8), 8)
    r0, r1 = scatter_fan(field03, phi, th), scatter_fan(other, phi, th)
    assert np.max(np.abs(r0.y - r1.y)) < 1e-5
    assert np.max(np.abs(r0.eta - r1.eta)) < 1e-5


def test_gauge_changes_interior_action(field03):
    other = gauge_transform(field03, F.RadialDiffeo(0.2), F.gaussian_bump((0.2, -0.1), 0.3, 0.5))
    x, y = np.array([0.2, -0.1]), np.array([-0.4, 0.3])
    assert abs(interior_action(field03, x, y) - interior_action(other, x, y)) > 1e-3


def test_gauge_rejects_bad_inputs(field03):
    with pytest.raises(InvalidDiffeoError):
        gauge_transform(field03, F.RadialDiffeo(-2.0))
    with pytest.raises(ValueError):
        gauge_transform(field03, F.IdentityDiffeo(), F.ConstantScalar(1.0))


def test_interior_action_euclidean_is_distance(euclid):
    x, y = np.array([0.1, 0.2]), np.array([-0.3, -0.4])
    assert interior_action(euclid, x, y) == pytest.approx(np.linalg.norm(x - y), abs=1e-9)


def test_reversibility_euclidean(euclid):
    phi, th = np.linspace(0, 6, 16), np.linspace(-1.3, 1.3, 16)
    assert reversibility_residual(euclid, phi, th) <= 1e-6


def test_reversibility_exact_alpha():
    s = MagneticSystem(EuclideanMetric(), F.ExactForm(F.radial_quadratic(0.1)), Disk())
    phi, th = np.linspace(0, 6, 16), np.linspace(-1.3, 1.3, 16)
    assert reversibility_residual(s, phi, th) <= 1e-6


def test_reversibility_constant_field_closed_form(field03):
    phi, th = np.linspace(0, 6, 12), np.linspace(-1.2, 1.2, 12)
    gaps = reversibility_residual(field03, phi, th, per_ray=True)
    x, xi = field03.boundary_state(phi, th)
    expected = []
    for xx, vv in zip(x, xi):
        y, eta, _ = arc_exit(xx, vv, 0.3)
        z, zeta, _ = arc_exit(y, -eta, 0.3)
        arc = abs(wrap(_angle(z) - _angle(xx)))
        expected.append(arc + abs(wrap(_angle(zeta) - _angle(-vv))))
    assert np.allclose(gaps, expected, atol=1e-6)
    assert gaps.max() >= 0.05


def test_linearization_zero_perturbation(field03):
    out = linearization_formula(field03, F.ZeroTensor(), F.ZeroForm(), np.array([0.3]), np.array([2.5]))
    assert np.all(out == 0)


def test_linearization_euclidean_bump_one_form(euclid):
    beta = F.ScalarTimesForm(F.gaussian_bump((0.1, 0.0), 0.3, 1.0, 2), F.ConstantForm((0.3, 1.0)))
    px, py = np.array([np.pi + 0.2]), np.array([0.1])
    out = linearization_check(euclid, F.ZeroTensor(), beta, px, py)
    # along the straight chord the first variation is -int beta
    x, y = euclid.domain.point(px[0]), euclid.domain.point(py[0])
    t = np.linspace(0, 1, 4001)
    pts = x + np.outer(t, y - x)
    L = np.linalg.norm(y - x)
    vals = beta.value(pts) @ ((y - x) / L)
    direct = -np.trapezoid(vals, t) * L
    assert out["formula"][0] == pytest.approx(direct, abs=1e-6)
    assert out["gap"][0] < 1e-5


def test_linearization_random_pair(field03, rng):
    # small amplitude keeps g + c h positive definite over the whole scale sweep
    f = random_bump_pair(rng, reach=0.4) * 0.1
    out = linearization_check(field03, f.h, f.beta, np.array([0.3, 2.0]), np.array([3.6, 4.8]))
    assert out["gap"].max() < 1e-4
    assert out["remainder_slope"] > 1.7


def test_simplicity_reports(field03):
    assert simplicity_report(field03).simple
    strong = simplicity_report(constant_field_system(1.5))
    assert not strong.convex and not strong.simple
    assert strong.min_margin == pytest.approx(-0.5, abs=1e-12)


def test_simplicity_detects_conjugate_points():
    s = MagneticSystem(ConformalMetric(F.GaussianScalar(1.0, (0.0, 0.0), 0.3)), F.ZeroForm(), Disk())
    rep = simplicity_report(s, n_stations=4, n_angles=5)
    assert rep.convex and not rep.conjugate_free
