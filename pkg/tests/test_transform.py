import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magray import fields as F
from magray.geometry import ConformalMetric, Disk, MagneticSystem
from magray.transform import (
    BoundaryData,
    Fan,
    SphereBundleGrid,
    TensorPair,
    adjoint,
    area_quadrature,
    disk_quadrature,
    exit_lengths,
    kinetic_at,
    kinetic_solution,
    l2_bound_check,
    normal_op,
    pair_l2,
    pair_pairing,
    potential_pair,
    random_bump_pair,
    random_bump_potential,
    ray_transform,
    ray_transform_fn,
    santalo_check,
    volume_from_boundary,
)

from _oracles import arc_exit, chord_length, conformal_area, unit_disk_santalo_constant

one = lambda x, v: np.ones(x.shape[:-1])


@pytest.fixture(scope="module")
def fan03(field03):
    return Fan.build(field03, 48, 32)


@pytest.mark.parametrize("lam", [0.0, 0.3])
def test_santalo_constant_function(lam):
    from magray.geometry import constant_field_system

    s = constant_field_system(lam)
    lhs, rhs = santalo_check(s, one, Fan.build(s, 64, 48))
    assert lhs == pytest.approx(unit_disk_santalo_constant(), rel=1e-12)
    assert abs(lhs - rhs) / lhs < 1e-3


def test_santalo_first_moment_vanishes(field03, fan03):
    # int_SM <alpha, xi> dSigma = 0 since the fiber average of xi vanishes
    phi = lambda x, v: np.einsum("...i,...i->...", field03.alpha.value(x) + np.array([0.3, -0.2]), v)
    lhs, rhs = santalo_check(field03, phi, fan03)
    assert abs(lhs) < 1e-12
    assert abs(rhs) < 1e-3


def test_santalo_quadratic_in_position(field03, fan03):
    phi = lambda x, v: np.sum(x**2, -1)
    lhs, rhs = santalo_check(field03, phi, fan03)
    # int_D r^2 dA times 2 pi
    assert lhs == pytest.approx(np.pi**2, rel=1e-10)
    assert rhs == pytest.approx(lhs, rel=1e-3)


@pytest.mark.parametrize("lam", [0.0, 0.3])
def test_volume_from_boundary_unit_disk(lam):
    from magray.geometry import constant_field_system

    s = constant_field_system(lam)
    assert volume_from_boundary(s, Fan.build(s, 64, 48)) == pytest.approx(np.pi, rel=1e-3)


def test_volume_from_boundary_conformal_metric():
    u = F.radial_quadratic(0.1)
    s = MagneticSystem(ConformalMetric(u), F.SymmetricGauge(0.2), Disk())
    area = conformal_area(0.1)
    assert area_quadrature(s) == pytest.approx(area, rel=1e-10)
    assert volume_from_boundary(s, Fan.build(s, 64, 48)) == pytest.approx(area, rel=1e-3)


def test_exit_lengths_euclidean_chords(euclid):
    fan = Fan.build(euclid, 8, 12)
    assert np.allclose(exit_lengths(euclid, fan), chord_length(fan.theta), atol=1e-9)


def test_exit_lengths_constant_field(field03):
    fan = Fan.build(field03, 6, 8)
    expected = [arc_exit(x, v, 0.3)[2] for x, v in zip(fan.x, fan.xi)]
    assert np.allclose(exit_lengths(field03, fan), expected, atol=1e-8)


def test_ray_transform_of_metric_is_length(field03):
    # h = g, beta = 0 integrates |xi|^2 = 1
    fan = Fan.build(field03, 8, 10)
    f = TensorPair(F.ScalarTimesTensor(F.ConstantScalar(1.0)), F.ZeroForm())
    assert np.allclose(ray_transform(field03, f, fan).values, exit_lengths(field03, fan), atol=1e-10)


def test_ray_transform_of_one_is_length(field03):
    fan = Fan.build(field03, 8, 10)
    assert np.allclose(ray_transform_fn(field03, one, fan).values, exit_lengths(field03, fan), atol=1e-10)


def test_ray_transform_euclidean_constant_form(euclid):
    # beta = c: integral is <c, y - x>
    fan = Fan.build(euclid, 8, 10)
    c = np.array([0.4, -1.1])
    f = TensorPair(F.ZeroTensor(), F.ConstantForm(tuple(c)))
    ell = chord_length(fan.theta)
    y = fan.x + ell[:, None] * fan.xi
    assert np.allclose(ray_transform(euclid, f, fan).values, (y - fan.x) @ c, atol=1e-10)


def test_ray_transform_is_linear(field03, rng):
    fan = Fan.build(field03, 8, 10)
    f, g = random_bump_pair(rng), random_bump_pair(rng)
    lhs = ray_transform(field03, f + 2.0 * g, fan).values
    rhs = ray_transform(field03, f, fan).values + 2 * ray_transform(field03, g, fan).values
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_potential_pairs_in_kernel(field03, rng):
    fan = Fan.build(field03, 24, 16)
    for _ in range(3):
        v, phi = random_bump_potential(rng)
        dw = potential_pair(field03, v, phi)
        vals = ray_transform(field03, dw, fan).values
        scale = np.sqrt(pair_l2(field03, dw, dw))
        assert np.max(np.abs(vals)) <= 1e-6 * scale


def test_kernel_on_curved_metric(rng):
    u = F.GaussianScalar(0.2, (0.1, 0.0), 0.5)
    s = MagneticSystem(ConformalMetric(u), F.SymmetricGauge(0.25), Disk())
    fan = Fan.build(s, 16, 12)
    v, phi = random_bump_potential(rng)
    dw = potential_pair(s, v, phi)
    vals = ray_transform(s, dw, fan).values
    assert np.max(np.abs(vals)) <= 1e-6 * np.sqrt(pair_l2(s, dw, dw))


def test_pure_gradient_in_kernel(field03):
    # [0, d phi] with phi vanishing on the boundary
    phi = F.ProductScalar(F.GaussianScalar(1.0, (0.2, 0.1), 0.4), F.radial_quadratic(1.0))
    f = TensorPair(F.ZeroTensor(), F.ExactForm(phi))
    fan = Fan.build(field03, 16, 12)
    assert np.max(np.abs(ray_transform(field03, f, fan).values)) < 1e-8


def test_adjoint_duality(field03, rng):
    fan = Fan.build(field03, 96, 64)
    quad = disk_quadrature(field03, 24, 48)
    psi = lambda ph, th: np.cos(ph) * np.cos(th) ** 3 + 0.5 * np.sin(2 * ph) * np.sin(th)
    adj = adjoint(field03, psi, quad.points, n_fiber=128)
    for _ in range(3):
        f = random_bump_pair(rng)
        lhs = BoundaryData(fan, psi(fan.phi, fan.theta)).inner(ray_transform(field03, f, fan))
        rhs = pair_pairing(field03, f, adj, quad)
        assert abs(lhs - rhs) <= 1e-3 * abs(lhs)


def test_adjoint_of_interpolated_data_matches_callable(field03):
    fan = Fan.build(field03, 64, 48)
    psi = lambda ph, th: np.cos(ph) * np.cos(th) ** 3
    X = np.array([[0.1, 0.2], [-0.3, 0.4], [0.5, -0.5]])
    a = adjoint(field03, psi, X)
    b = adjoint(field03, BoundaryData(fan, psi(fan.phi, fan.theta)), X)
    assert np.max(np.abs(a.H - b.H)) < 1e-3
    assert np.max(np.abs(a.B - b.B)) < 1e-3
    assert not a.flagged.any()


def test_adjoint_outputs_symmetric_tensor(field03):
    X = np.array([[0.1, 0.2], [-0.3, 0.4]])
    a = adjoint(field03, lambda ph, th: np.sin(ph) + th**2, X, n_fiber=64)
    assert np.allclose(a.H, a.H.swapaxes(-1, -2), atol=1e-14)


def test_normal_operator_matches_norm_of_transform(field03, rng):
    # <N f, f> = ||I f||^2
    f = random_bump_pair(rng)
    quad = disk_quadrature(field03, 20, 40)
    Nf = normal_op(field03, f, quad.points, n_fiber=96, n_gl=32)
    If = ray_transform(field03, f, Fan.build(field03, 96, 64))
    lhs = pair_pairing(field03, f, Nf, quad)
    assert lhs == pytest.approx(If.inner(If), rel=2e-3)


def test_normal_operator_symmetric(field03, rng):
    f, g = random_bump_pair(rng), random_bump_pair(rng)
    quad = disk_quadrature(field03, 20, 40)
    a = pair_pairing(field03, g, normal_op(field03, f, quad.points, n_fiber=96), quad)
    b = pair_pairing(field03, f, normal_op(field03, g, quad.points, n_fiber=96), quad)
    assert abs(a - b) <= 1e-3 * max(abs(a), abs(b))


def test_normal_operator_annihilates_potentials(field03, rng):
    v, phi = random_bump_potential(rng)
    dw = potential_pair(field03, v, phi)
    X = np.array([[0.1, 0.0], [-0.2, 0.3], [0.4, -0.1]])
    Nf = normal_op(field03, dw, X, n_fiber=64, n_gl=32)
    scale = np.sqrt(pair_l2(field03, dw, dw))
    assert np.max(np.abs(Nf.H)) <= 1e-4 * scale
    assert np.max(np.abs(Nf.B)) <= 1e-4 * scale


def test_zero_data_has_zero_adjoint(field03):
    a = adjoint(field03, lambda ph, th: np.zeros_like(ph), np.array([[0.2, 0.1]]))
    assert np.all(a.H == 0) and np.all(a.B == 0)


def test_l2_bound(field03, rng):
    fan = Fan.build(field03, 48, 32)
    for _ in range(2):
        assert l2_bound_check(field03, random_bump_pair(rng), fan) <= 1.0


def test_kinetic_solution_vanishes_on_outflow_boundary(field03):
    x = field03.domain.point(np.linspace(0, 6, 8))
    v = -field03.inward_normal(x)
    assert np.allclose(kinetic_at(field03, one, x, v), 0.0, atol=1e-12)


def test_kinetic_solution_of_one_is_minus_exit_time(field03):
    grid = SphereBundleGrid(np.array([[0.0, 0.0], [0.3, -0.2]]), 8)
    u = kinetic_solution(field03, one, grid).values
    from magray.flow import flow_batch

    XX = np.repeat(grid.points, 8, axis=0)
    V = field03.unit_vector(XX, np.tile(grid.theta, 2))
    assert np.allclose(u.ravel(), -flow_batch(field03, XX, V).t, atol=1e-9)


def test_kinetic_solution_solves_transport(field03):
    # d/dt u(psi_t) = phi along the flow
    phi = lambda x, v: np.exp(-np.sum(x**2, -1)) * (1 + v[..., 0])
    from magray.flow import states_at

    x0, v0 = np.array([[0.1, 0.2]]), np.array([[0.6, 0.8]])
    dt = 1e-4
    S = states_at(field03, x0, v0, np.array([[0.0, dt, 2 * dt]]))[0]
    u = kinetic_at(field03, phi, S[:, :2], S[:, 2:])
    assert (u[2] - u[0]) / (2 * dt) == pytest.approx(phi(S[1, :2], S[1, 2:]), abs=1e-6)


def test_kinetic_solution_of_exact_one_form(field03):
    # phi = <grad w, xi> with w(x) = |x|^2 gives u = w(x) - w(exit)
    phi = lambda x, v: 2 * np.einsum("...i,...i->...", x, v)
    x = np.array([[0.2, -0.1], [0.0, 0.5]])
    v = field03.unit_vector(x, np.array([0.3, 2.0]))
    from magray.flow import flow_batch

    y = flow_batch(field03, x, v).y[:, :2]
    assert np.allclose(kinetic_at(field03, phi, x, v), np.sum(x**2, -1) - np.sum(y**2, -1), atol=1e-9)


def test_sphere_bundle_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        SphereBundleGrid(np.zeros((1, 2)), 12)


def test_boundary_data_csv_roundtrip(field03, tmp_path):
    fan = Fan.build(field03, 8, 6)
    data = ray_transform_fn(field03, one, fan)
    path = tmp_path / "d.csv"
    data.to_csv(path)
    back = BoundaryData.from_csv(path, field03)
    assert np.allclose(back.values, data.values, atol=1e-13)
    assert np.allclose(back.fan.weights, fan.weights, atol=1e-13)


def test_fan_weights_integrate_cosine_measure(field03):
    # int over the inward bundle of <xi, nu> dtheta dsigma = 2 * 2 pi
    fan = Fan.build(field03, 16, 8)
    assert fan.weights.sum() == pytest.approx(4 * np.pi, rel=1e-12)


@given(c=st.floats(-2, 2), k=st.integers(0, 3))
@settings(max_examples=10)
def test_pair_l2_scales_quadratically(c, k):
    rng = np.random.default_rng(k)
    s = MagneticSystem(ConformalMetric(F.radial_quadratic(0.1)), F.ZeroForm(), Disk())
    f = random_bump_pair(rng)
    quad = disk_quadrature(s, 12, 24)
    assert pair_l2(s, f * c, f * c, quad) == pytest.approx(c * c * pair_l2(s, f, f, quad), rel=1e-12, abs=1e-14)
