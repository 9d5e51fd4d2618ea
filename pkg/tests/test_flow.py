import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magray import fields as F
from magray.flow import (
    ESCAPED,
    EXITED,
    EscapeError,
    PhasePoint,
    conjugate_point_scan,
    exit_time,
    exit_times,
    flow_batch,
    gauss_curvature,
    integrate,
    jacobi,
    magnetic_exp,
    states_at,
)
from magray.geometry import ConformalMetric, Disk, MagneticSystem, constant_field_system

from _oracles import arc_state, chord_length, constant_field_conjugate_det, jacobi_constant_field


def _bump_metric_system(c=1.0, s=0.3):
    """Positively curved bump: convex boundary but conjugate points inside."""
    return MagneticSystem(ConformalMetric(F.GaussianScalar(c, (0.0, 0.0), s)), F.ZeroForm(), Disk())


def test_straight_chord_through_center(euclid):
    sol = integrate(euclid, PhasePoint([-1.0, 0.0], [1.0, 0.0]))
    assert sol.t_plus == pytest.approx(2.0, abs=1e-10)
    assert np.allclose(sol.exit_state[:2], [1.0, 0.0], atol=1e-10)


@given(th=st.floats(-1.5, 1.5), phi=st.floats(0, 2 * np.pi))
def test_euclidean_chord_length(th, phi):
    s = constant_field_system(0.0)
    x, xi = s.boundary_state(phi, th)
    ell = exit_time(s, PhasePoint(x, xi))
    assert ell.value == pytest.approx(chord_length(th), abs=1e-8)
    assert not ell.grazing


def test_exit_from_outgoing_start_is_zero(field03):
    x, xi = field03.boundary_state(0.4, 0.3)
    ell = exit_time(field03, PhasePoint(x, -xi))
    assert ell.value == pytest.approx(0.0, abs=1e-12)


def test_grazing_start_is_flagged(field03):
    x, xi = field03.boundary_state(0.4, np.pi / 2 - 1e-6)
    assert exit_time(field03, PhasePoint(x, xi)).grazing


def test_backward_exit_time_nonpositive(field03):
    ell = exit_time(field03, PhasePoint([0.2, 0.1], [0.6, 0.8]), direction="backward")
    assert ell.value < 0


def test_constant_field_arc_matches_closed_form():
    lam = 0.5
    s = constant_field_system(lam)
    x0, v0 = np.array([-1.0, 0.0]), np.array([1.0, 0.0])
    sol = integrate(s, PhasePoint(x0, v0))
    t = np.linspace(0, sol.t_plus, 41)
    Y = sol(t)
    x_ex, v_ex = np.array([arc_state(x0, v0, lam, tt)[0] for tt in t]), np.array([arc_state(x0, v0, lam, tt)[1] for tt in t])
    assert np.max(np.abs(Y[:, :2] - x_ex)) < 1e-7
    assert np.max(np.abs(Y[:, 2:] - v_ex)) < 1e-7
    # orbit is a circle of radius 1 / lam = 2
    c = x0 + np.array([0.0, 1.0]) / lam
    assert np.allclose(np.linalg.norm(Y[:, :2] - c, axis=1), 2.0, atol=1e-7)


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.5])
def test_speed_is_conserved(lam):
    s = constant_field_system(lam)
    x, xi = s.boundary_state(np.linspace(0, 6, 12), np.linspace(-1.2, 1.2, 12))
    res = flow_batch(s, x, xi)
    assert np.all(res.status == EXITED)
    assert np.max(np.abs(np.linalg.norm(res.y[:, 2:], axis=1) - 1)) < 1e-8


def test_speed_conserved_on_curved_system():
    s = MagneticSystem(ConformalMetric(F.GaussianScalar(0.3, (0.1, 0.0), 0.4)), F.SymmetricGauge(0.3), Disk())
    x, xi = s.boundary_state(1.0, 0.4)
    sol = integrate(s, PhasePoint(x, xi))
    assert sol.stats["max_speed_drift"] < 1e-8
    assert abs(s.domain.rho(sol.exit_state[:2])) < 1e-9


def test_time_reversal_with_flipped_field(field03):
    x, xi = field03.boundary_state(0.3, 0.5)
    sol = integrate(field03, PhasePoint(x, xi))
    T = sol.t_plus
    end = sol.exit_state
    back = integrate(field03.reversed(), PhasePoint(end[:2], -end[2:]))
    assert back.t_plus == pytest.approx(T, abs=1e-8)
    ts = np.linspace(0, T, 9)
    assert np.max(np.abs(back.position(ts) - sol.position(T - ts))) < 1e-7


def test_exit_time_monotone_under_shrinkage(field03):
    x, xi = np.array([[0.1, 0.2]]), np.array([[0.8, -0.6]])
    t_full, _, _, _ = exit_times(field03, x, xi)
    t_small, _, _, _ = exit_times(field03, x, xi, domain=Disk(0.9))
    assert t_small[0] <= t_full[0]


def test_chord_ratio_bounded_toward_tangency(field03):
    th = np.concatenate([np.linspace(-1.0, 1.0, 11), np.pi / 2 - np.logspace(-1, -3.5, 8), -np.pi / 2 + np.logspace(-1, -3.5, 8)])
    x, xi = field03.boundary_state(np.full(th.size, 0.7), th)
    ell, _, _, _ = exit_times(field03, x, xi)
    ratio = ell / np.cos(th)
    assert ratio.max() <= 10 * np.median(ratio[:11])


def test_magnetic_exp_zero_time_and_euclidean(euclid):
    x = np.array([0.1, -0.2])
    v = np.array([0.6, 0.8])
    assert np.array_equal(magnetic_exp(euclid, x, 0.0, v), x)
    assert np.allclose(magnetic_exp(euclid, x, 0.7, v), x + 0.7 * v, atol=1e-10)


def test_magnetic_exp_constant_field_arc():
    s = constant_field_system(0.5)
    x, v = np.array([0.1, -0.2]), np.array([0.0, 1.0])
    for t in (0.3, 1.1):
        assert np.allclose(magnetic_exp(s, x, t, v), arc_state(x, v, 0.5, t)[0], atol=1e-7)


def test_escape_raises_for_horizon_beyond_region():
    s = constant_field_system(0.0)
    with pytest.raises(EscapeError):
        integrate(s, PhasePoint([0.0, 0.0], [1.0, 0.0]), horizon=10.0)


def test_escape_status_reported():
    s = constant_field_system(0.0)
    res = flow_batch(s, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), until_exit=False, t_max=10.0)
    assert res.status[0] == ESCAPED


def test_geodesic_csv_export(tmp_path, field03):
    sol = integrate(field03, PhasePoint([-1.0, 0.0], [1.0, 0.0]))
    path = tmp_path / "traj.csv"
    sol.to_csv(path, n=11)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (11, 5)
    assert open(path).readline().strip() == "t,x,y,xi1,xi2"


def test_states_at_matches_arc(field03):
    x, v = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
    out = states_at(field03, x, v, np.array([[0.2, 0.5, 0.8]]))
    for k, t in enumerate((0.2, 0.5, 0.8)):
        assert np.allclose(out[0, k, :2], arc_state(x[0], v[0], 0.3, t)[0], atol=1e-9)


def test_jacobi_euclidean_is_linear(euclid):
    host = integrate(euclid, PhasePoint([-1.0, 0.0], [1.0, 0.0]))
    J0, DJ0 = np.array([0.0, 0.3]), np.array([0.1, -0.2])
    sol = jacobi(euclid, host, J0, DJ0, n=41)
    assert np.allclose(sol.J, J0 + sol.t[:, None] * DJ0, atol=1e-10)


def test_jacobi_constant_field_closed_form():
    lam = 0.5
    s = constant_field_system(lam)
    host = integrate(s, PhasePoint([-1.0, 0.0], [1.0, 0.0]))
    a = np.array([0.3, 0.4])
    sol = jacobi(s, host, np.zeros(2), a, n=41)
    ref = jacobi_constant_field(lam, a, sol.t)
    assert np.max(np.abs(np.linalg.norm(sol.J, axis=1) - np.linalg.norm(ref, axis=1))) < 1e-6
    assert np.max(np.abs(sol.J - ref)) < 1e-6


@pytest.mark.parametrize("system", [constant_field_system(0.3), MagneticSystem(ConformalMetric(F.GaussianScalar(0.3, (0.1, 0.0), 0.4)), F.SymmetricGauge(0.3), Disk())])
def test_jacobi_resubstitution_residual(system):
    x, xi = system.boundary_state(0.5, 0.3)
    host = integrate(system, PhasePoint(x, xi))
    sol = jacobi(system, host, np.array([0.0, 0.0]), system.perp(x, xi), n=801)
    assert sol.residual(system) < 1e-5


def test_jacobi_matches_flow_variation():
    # a Jacobi field is the derivative of a family of geodesics
    s = MagneticSystem(ConformalMetric(F.GaussianScalar(0.3, (0.1, 0.0), 0.4)), F.SymmetricGauge(0.4), Disk())
    x0, v0 = np.array([-0.5, 0.1]), s.unit_vector(np.array([-0.5, 0.1]), 0.2)
    host = integrate(s, PhasePoint(x0, v0))
    sol = jacobi(s, host, np.zeros(2), s.perp(x0, v0), n=21)
    eps = 1e-5
    vp = s.unit_vector(x0, 0.2 + eps)
    vm = s.unit_vector(x0, 0.2 - eps)
    t = sol.t[1:-1][None]
    Xp = states_at(s, x0[None], vp[None], t)[0, :, :2]
    Xm = states_at(s, x0[None], vm[None], t)[0, :, :2]
    assert np.max(np.abs((Xp - Xm) / (2 * eps) - sol.J[1:-1])) < 1e-5


def test_constant_field_conjugate_determinant():
    # in the plane the first conjugate time is pi / lam; inside the disk there is none
    lam = 0.3
    s = constant_field_system(lam)
    x, xi = s.boundary_state(np.zeros(5), np.linspace(-1, 1, 5))
    rep = conjugate_point_scan(s, x, xi)
    assert not rep.any_conjugate
    assert np.all(rep.chord_time < np.pi / lam)


def test_euclidean_disk_has_no_conjugate_points(euclid):
    x, xi = euclid.boundary_state(np.linspace(0, 6, 8), np.linspace(-1.3, 1.3, 8))
    assert not conjugate_point_scan(euclid, x, xi).any_conjugate


def test_jacobi_determinant_oracle():
    lam = 0.5
    s = constant_field_system(lam, radius=8.0)
    x0, v0 = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    host = integrate(s, PhasePoint(x0, v0), horizon=5.0)
    sol = jacobi(s, host, np.zeros(2), s.perp(x0, v0), n=51)
    det = sol.v[:, 0] * sol.J[:, 1] - sol.v[:, 1] * sol.J[:, 0]
    assert np.max(np.abs(det - constant_field_conjugate_det(lam, sol.t))) < 1e-7


def test_curved_bump_has_conjugate_points_at_two_resolutions():
    s = _bump_metric_system()
    x, xi = s.boundary_state(np.zeros(3), np.array([-0.2, 0.0, 0.2]))
    coarse = conjugate_point_scan(s, x, xi, n_t=300)
    fine = conjugate_point_scan(s, x, xi, n_t=600)
    assert coarse.any_conjugate and fine.any_conjugate
    assert np.all(coarse.first_time < coarse.chord_time)
    assert np.allclose(coarse.first_time, fine.first_time, atol=1e-4)


def test_gauss_curvature_constant_model():
    s = MagneticSystem(ConformalMetric(F.ConstantCurvatureFactor(-1.0)), F.ZeroForm(), Disk())
    X = np.array([[0.1, 0.2], [-0.5, 0.3], [0.0, -0.7]])
    assert np.allclose(gauss_curvature(s, X), -1.0, atol=1e-6)


@settings(max_examples=10)
@given(th=st.floats(-1.4, 1.4), lam=st.floats(-0.8, 0.8))
def test_exit_point_lies_on_boundary(th, lam):
    s = constant_field_system(lam)
    x, xi = s.boundary_state(1.0, th)
    res = flow_batch(s, x[None], xi[None])
    assert abs(s.domain.rho(res.y[0, :2])) < 1e-9
