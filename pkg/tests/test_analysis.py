import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magray import fields as F
from magray.analysis import (
    OscillatoryScalar,
    ResolutionError,
    dirichlet_energy_fd,
    host_nodes,
    index_form,
    index_positivity_trial,
    k_bound,
    k_mu,
    k_mu_parts,
    symbol_sweep,
)
from magray.flow import PhasePoint, integrate
from magray.geometry import constant_field_system, system_from_config
from magray.transform import Fan

from _oracles import arc_exit, constant_field_k_mu, rotation_quadratic_index


@given(lam=st.floats(-1.0, 1.0), r=st.floats(0, 0.9), a=st.floats(0, 6.3), th=st.floats(0, 6.3))
@settings(max_examples=30)
def test_k_mu_constant_field_closed_form(lam, r, a, th):
    s = constant_field_system(lam)
    x = np.array([r * np.cos(a), r * np.sin(a)])
    xi = s.unit_vector(x, th)
    assert k_mu(s, x, xi) == pytest.approx(constant_field_k_mu(lam), abs=1e-6)


def test_k_mu_both_normals_agree_for_constant_field():
    s = constant_field_system(0.4)
    x = np.array([[0.1, 0.2]])
    parts = k_mu_parts(s, x, s.unit_vector(x, np.array([0.7])))
    assert np.allclose(parts[..., 0], parts[..., 1], atol=1e-12)


def test_k_mu_constant_curvature_no_field():
    s = system_from_config({"metric": {"family": "conformal", "u": {"type": "constant_curvature", "K": 1.0}}})
    x = np.array([[0.2, 0.1], [-0.3, -0.2]])
    assert np.allclose(k_mu(s, x, s.unit_vector(x, np.array([0.3, 2.0]))), 2.0, atol=1e-5)


def test_k_bound_euclidean_is_zero(euclid):
    rep = k_bound(euclid, Fan.build(euclid, 16, 8))
    assert rep.k == 0 and rep.passed


def test_k_bound_constant_field_matches_arc_lengths(field03):
    fan = Fan.build(field03, 8, 8)
    rep = k_bound(field03, fan)
    ell = np.array([arc_exit(x, v, 0.3)[2] for x, v in zip(fan.x, fan.xi)])
    assert np.allclose(rep.products, constant_field_k_mu(0.3) * ell**2, rtol=1e-6)
    assert rep.passed
    d = rep.to_dict()
    assert d["verdict"] == "pass" and d["fan"] == [8, 8]


def test_k_bound_fails_for_strong_field():
    s = constant_field_system(0.9)
    assert not k_bound(s, Fan.build(s, 8, 8)).passed


def _straight_host(euclid):
    return integrate(euclid, PhasePoint(np.array([-1.0, 0.0]), np.array([1.0, 0.0])))


def test_index_form_euclidean_closed_form(euclid):
    host = _straight_host(euclid)
    T = host.t_plus - host.t_minus
    Z = lambda t: np.stack([np.zeros_like(t), np.sin(np.pi * (t - host.t_minus) / T)], -1)
    assert index_form(euclid, host, Z) == pytest.approx(np.pi**2 / (2 * T), rel=1e-10)


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_index_form_constant_field_matches_quadrature(field03, mode):
    x0, v0 = field03.boundary_state(np.array(0.4), np.array(0.5))
    host = integrate(field03, PhasePoint(x0, v0))
    T = host.t_plus - host.t_minus
    z = lambda t: np.sin(mode * np.pi * t / T) * (1 + 0.3 * t)
    zdot = lambda t: mode * np.pi / T * np.cos(mode * np.pi * t / T) * (1 + 0.3 * t) + 0.3 * np.sin(mode * np.pi * t / T)

    def Z(t):
        Y = host(t)
        nu = np.stack([-Y[:, 3], Y[:, 2]], -1)
        return z(t - host.t_minus)[:, None] * nu

    expected = rotation_quadratic_index(0.3, T, z, zdot)
    assert index_form(field03, host, Z) == pytest.approx(expected, rel=1e-8)


def test_dirichlet_energy_agrees_with_index_form_in_flat_case(euclid):
    host = _straight_host(euclid)
    T = host.t_plus - host.t_minus
    Z = lambda t: np.stack([np.zeros_like(t), np.sin(np.pi * (t - host.t_minus) / T) ** 2], -1)
    assert dirichlet_energy_fd(euclid, host, Z) == pytest.approx(index_form(euclid, host, Z), rel=1e-5)


def test_index_form_requires_vanishing_ends(field03):
    x0, v0 = field03.boundary_state(np.array(0.4), np.array(0.2))
    nodes = host_nodes(field03, (x0, v0), 32)
    with pytest.raises(ValueError):
        index_form(field03, nodes, np.tile([0.0, 1.0], (32, 1)) * field03.perp(nodes.x, nodes.v))


def test_index_form_ignores_tangential_component(field03):
    x0, v0 = field03.boundary_state(np.array(1.0), np.array(-0.3))
    nodes = host_nodes(field03, (x0, v0), 48)
    tau = (nodes.t - nodes.t0) / (nodes.t1 - nodes.t0)
    a = np.sin(np.pi * tau)[:, None]
    Zn = a * field03.perp(nodes.x, nodes.v)
    Zt = Zn + (tau * (1 - tau))[:, None] * nodes.v
    assert index_form(field03, nodes, Zt) == pytest.approx(index_form(field03, nodes, Zn), rel=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.3])
def test_index_positivity_small_trial(lam):
    tr = index_positivity_trial(constant_field_system(lam), n_trials=25, seed=7)
    assert tr.failures == 0 and tr.min_value > 0


def test_oscillatory_scalar_derivatives():
    s = OscillatoryScalar(F.gaussian_bump((0.1, 0.0), 0.5, p=2), 6.0, (0.6, 0.8), 0.3)
    x = np.array([[0.2, -0.1], [0.0, 0.4]])
    h = 1e-5
    fd = np.stack([(s.value(x + h * e) - s.value(x - h * e)) / (2 * h) for e in np.eye(2)], -1)
    assert np.allclose(s.grad(x), fd, atol=1e-7)
    fdh = np.stack([(s.grad(x + h * e) - s.grad(x - h * e)) / (2 * h) for e in np.eye(2)], -1)
    assert np.allclose(s.hess(x), fdh, atol=1e-6)


def test_symbol_sweep_rejects_coarse_resolution(field03):
    with pytest.raises(ResolutionError):
        symbol_sweep(field03, frequencies=(8, 16, 32), n_fiber=128, n_gl=64)


def test_euclidean_off_diagonal_blocks_vanish(euclid):
    sw = symbol_sweep(euclid, frequencies=(2, 4), n_fiber=64, n_gl=16)
    assert sw.identically_zero["N12"] and sw.identically_zero["N21"]
    assert sw.slopes["N12"] == -np.inf
