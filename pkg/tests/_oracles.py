"""Closed-form and brute-force reference values used by the tests. Nothing here imports
the package, so each oracle is independent of the code under test."""

import numpy as np
from scipy.integrate import quad


def rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def perp(v):
    """Counter-clockwise quarter turn."""
    v = np.asarray(v, float)
    return np.stack([-v[..., 1], v[..., 0]], -1)


def arc_state(x0, v0, lam, t):
    """Solution of x'' = lam (x')_perp in the plane with unit initial speed."""
    x0, v0 = np.asarray(x0, float), np.asarray(v0, float)
    if lam == 0:
        return x0 + t * v0, v0.copy()
    s, c = np.sin(lam * t), np.cos(lam * t)
    x = x0 + (s * v0 + (1 - c) * perp(v0)) / lam
    v = c * v0 + s * perp(v0)
    return x, v


def arc_exit(x0, v0, lam, radius=1.0):
    """Exit point, exit velocity and chord time of the constant-field orbit started at a
    boundary point of the disk, from the intersection of the orbit circle with the disk."""
    x0, v0 = np.asarray(x0, float), np.asarray(v0, float)
    if lam == 0:
        t = -2 * np.dot(x0, v0)
        return x0 + t * v0, v0.copy(), t
    r = 1 / abs(lam)
    c = x0 + perp(v0) / lam
    d = np.linalg.norm(c)
    a = (radius**2 + d * d - r * r) / (2 * d)
    h = np.sqrt(max(radius**2 - a * a, 0.0))
    u = c / d
    cands = [a * u + h * perp(u), a * u - h * perp(u)]
    p = max(cands, key=lambda q: np.linalg.norm(q - x0))
    # position relative to the centre turns at angular rate lam
    a0 = np.arctan2(*(x0 - c)[::-1])
    a1 = np.arctan2(*(p - c)[::-1])
    t = np.mod((a1 - a0) * np.sign(lam), 2 * np.pi) / abs(lam)
    return arc_state(x0, v0, lam, t)[0], arc_state(x0, v0, lam, t)[1], t


def chord_length(theta):
    """Unit-disk chord length for a straight line entering at angle theta from the normal."""
    return 2 * np.cos(theta)


def unit_disk_santalo_constant():
    """int over the unit sphere bundle of the unit disk of 1, for dVol x dtheta."""
    return 2 * np.pi**2


def conformal_area(c):
    """Area of the unit disk for the metric exp(2 c (1 - r^2)) delta."""
    return np.pi * np.expm1(2 * c) / (2 * c)


def pv_cot_hilbert(u, theta):
    """(1 / 2 pi) p.v. integral of cot((phi - theta) / 2) u(phi) over one period, via the
    Cauchy-weight quadrature of QUADPACK."""

    def g(phi):
        d = phi - theta
        k = 2.0 if abs(d) < 1e-12 else d / np.tan(d / 2)
        return k * u(phi)

    val, _ = quad(g, theta - np.pi, theta + np.pi, weight="cauchy", wvar=theta, limit=400)
    return val / (2 * np.pi)


def constant_field_k_mu(lam):
    return 6 * lam**2


def constant_field_conjugate_det(lam, t):
    """det[gamma_dot, J] for J(0) = 0, J'(0) = gamma_dot_perp."""
    return np.sin(lam * t) / lam if lam else t


def jacobi_constant_field(lam, a, t):
    """J with J(0) = 0, J'(0) = a for J'' = lam J'_perp."""
    a = np.asarray(a, float)
    s, c = np.sin(lam * t), np.cos(lam * t)
    return (np.multiply.outer(s, a) + np.multiply.outer(1 - c, perp(a))) / lam


def rotation_quadratic_index(lam, T, z, zdot):
    """int_0^T zdot^2 - lam^2 z^2 by adaptive quadrature for scalar callables."""
    val, _ = quad(lambda t: zdot(t) ** 2 - lam**2 * z(t) ** 2, 0, T, limit=200)
    return val
