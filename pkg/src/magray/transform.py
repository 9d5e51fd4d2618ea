"""Magnetic ray transform of tensor pairs and of functions on the unit sphere bundle,
its adjoint and normal operator, Santalo quadrature, volume from boundary action and
the kinetic solution of the transport equation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import fields as F
from .flow import EXITED, RTOL, ATOL, flow_batch, states_at
from .geometry import N_DIM, Disk, MagneticSystem

PAIR_WEIGHT = (N_DIM - 1) / 2  # weight of the 1-form part in the pair inner product
N_GL = 48


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class TensorPair:
    """[h, beta]: symmetric 2-tensor and 1-form, both covariant."""

    h: F.SymTensor = field(default_factory=F.ZeroTensor)
    beta: F.OneForm = field(default_factory=F.ZeroForm)

    def integrand(self, x, v):
        H = self.h.value(x)
        b = self.beta.value(x)
        return np.einsum("...ij,...i,...j->...", H, v, v) + np.einsum("...i,...i->...", b, v)

    def values(self, x):
        return self.h.value(x), self.beta.value(x)

    def __add__(self, other):
        return TensorPair(F.SumTensor((self.h, other.h)), F.SumForm((self.beta, other.beta)))

    def __mul__(self, c):
        return TensorPair(F.ScaledTensor(self.h, float(c)), F.ScaledForm(self.beta, float(c)))

    __rmul__ = __mul__


def lower_lorentz_covector(system: MagneticSystem, x, v):
    """Y acting on a covector v: the covector Omega(v^sharp, .)."""
    vs = np.einsum("...ij,...j->...i", system.ginv(x), v)
    return np.einsum("...a,...ab->...b", vs, system.omega(x))


@dataclass(frozen=True)
class SymmetricDerivative(F.SymTensor):
    """Symmetrized covariant derivative of a 1-form v: (d_i v_j + d_j v_i)/2 - Gamma^k_ij v_k."""

    system: MagneticSystem
    v: F.OneForm

    def value(self, x):
        J = self.v.jac(x)
        G = self.system.christoffel(x)
        return 0.5 * (J + J.swapaxes(-1, -2)) - np.einsum("...kij,...k->...ij", G, self.v.value(x))

    def jac(self, x, step=1e-5):
        x = np.asarray(x, float)
        out = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            out.append((self.value(x + e) - self.value(x - e)) / (2 * step))
        return np.stack(out, axis=-3)


@dataclass(frozen=True)
class PotentialBeta(F.OneForm):
    """d phi - Y(v)"""

    system: MagneticSystem
    v: F.OneForm
    phi: F.Scalar

    def value(self, x):
        return self.phi.grad(x) - lower_lorentz_covector(self.system, x, self.v.value(x))

    def jac(self, x, step=1e-5):
        x = np.asarray(x, float)
        out = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            out.append((self.value(x + e) - self.value(x - e)) / (2 * step))
        return np.stack(out, axis=-2)


def potential_pair(system: MagneticSystem, v: F.OneForm, phi: F.Scalar) -> TensorPair:
    """d[v, phi] for analytic v and phi."""
    return TensorPair(SymmetricDerivative(system, v), PotentialBeta(system, v, phi))


def random_bump_pair(rng, *, p=2, reach=0.5, width=(0.25, 0.4), n_terms=2) -> TensorPair:
    """Smooth pair supported well inside the unit disk (up to Gaussian tails times a
    boundary factor)."""
    s = [F.random_gaussian_scalar(rng, p=p, reach=reach, width=width, n_terms=n_terms) for _ in range(5)]
    h = F.SumTensor(
        (
            F.ScalarTimesTensor(s[0], ((1.0, 0.0), (0.0, 0.0))),
            F.ScalarTimesTensor(s[1], ((0.0, 1.0), (1.0, 0.0))),
            F.ScalarTimesTensor(s[2], ((0.0, 0.0), (0.0, 1.0))),
        )
    )
    beta = F.SumForm((F.ScalarTimesForm(s[3], F.ConstantForm((1.0, 0.0))), F.ScalarTimesForm(s[4], F.ConstantForm((0.0, 1.0)))))
    return TensorPair(h, beta)


def random_bump_potential(rng, *, p=2, reach=0.5, width=(0.25, 0.4)):
    """Random [v, phi] vanishing to order p on the unit circle."""
    s = [F.random_gaussian_scalar(rng, p=p, reach=reach, width=width) for _ in range(3)]
    v = F.SumForm((F.ScalarTimesForm(s[0], F.ConstantForm((1.0, 0.0))), F.ScalarTimesForm(s[1], F.ConstantForm((0.0, 1.0)))))
    return v, s[2]


# --------------------------------------------------------------------------
# quadratures


@dataclass(frozen=True)
class DiskQuadrature:
    points: np.ndarray
    weights: np.ndarray  # include the Riemannian volume density


def disk_quadrature(system: MagneticSystem, n_r=32, n_phi=64, radius=None) -> DiskQuadrature:
    """Gauss-Legendre in r times trapezoid in the polar angle, weighted by dVol_g."""
    R = system.domain.radius if radius is None else radius
    z, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * R * (z + 1)
    wr = 0.5 * R * w * r
    ph = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    Rg, Pg = np.meshgrid(r, ph, indexing="ij")
    X = np.stack([Rg * np.cos(Pg), Rg * np.sin(Pg)], -1).reshape(-1, 2)
    W = (wr[:, None] * np.full(n_phi, 2 * np.pi / n_phi)[None]).ravel()
    return DiskQuadrature(X, W * system.sqrt_det(X))


def pair_inner(system: MagneticSystem, H1, b1, H2, b2, x=None):
    """Pointwise pair inner product <h1, h2>_g + ((n-1)/2) <b1, b2>_g at points x."""
    gi = system.ginv(x)
    hh = np.einsum("...ia,...jb,...ij,...ab->...", gi, gi, H1, H2)
    bb = np.einsum("...ij,...i,...j->...", gi, b1, b2)
    return hh + PAIR_WEIGHT * bb


def pair_l2(system: MagneticSystem, f: TensorPair, g_: TensorPair, quad: DiskQuadrature | None = None):
    quad = quad or disk_quadrature(system)
    X = quad.points
    H1, b1 = f.values(X)
    H2, b2 = g_.values(X)
    return float(np.dot(quad.weights, pair_inner(system, H1, b1, H2, b2, X)))


# --------------------------------------------------------------------------
# fans and boundary data


@dataclass
class Fan:
    """Quadrature over the inward boundary bundle for the measure <xi, nu> dSigma.

    Stations are uniform in the boundary parameter; angles theta from the inward normal
    are Gauss-Legendre nodes in sin(theta), so the weight carries no cosine factor.
    """

    n_stations: int
    n_angles: int
    phi: np.ndarray  # (B,)
    theta: np.ndarray  # (B,)
    weights: np.ndarray  # (B,)
    arclength: np.ndarray  # (B,) station arc-length (Euclidean)
    x: np.ndarray
    xi: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, system: MagneticSystem, n_stations=96, n_angles=64):
        ph = np.linspace(0, 2 * np.pi, n_stations, endpoint=False)
        u, wu = np.polynomial.legendre.leggauss(n_angles)
        th = np.arcsin(u)
        P, T = np.meshgrid(ph, th, indexing="ij")
        W = (2 * np.pi / n_stations) * system.boundary_speed(ph)[:, None] * wu[None, :]
        x, xi = system.boundary_state(P.ravel(), T.ravel())
        return cls(n_stations, n_angles, P.ravel(), T.ravel(), W.ravel(), system.domain.radius * P.ravel(), x, xi)

    @property
    def size(self):
        return self.phi.size

    def grid(self, values):
        return np.asarray(values).reshape(self.n_stations, self.n_angles)


@dataclass
class BoundaryData:
    fan: Fan
    values: np.ndarray

    def inner(self, other: "BoundaryData"):
        return float(np.sum(self.fan.weights * self.values * other.values))

    def norm(self):
        return np.sqrt(self.inner(self))

    def to_csv(self, path):
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arclength", "theta", "weight", "value"])
            for row in zip(self.fan.arclength, self.fan.theta, self.fan.weights, self.values):
                w.writerow([f"{c:.15g}" for c in row])

    @classmethod
    def from_csv(cls, path, system: MagneticSystem):
        rows = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        s, th, _, val = rows.T
        n_st = np.unique(np.round(s, 12)).size
        n_an = rows.shape[0] // n_st
        fan = Fan.build(system, n_st, n_an)
        if not np.allclose(fan.theta, th, atol=1e-9) or not np.allclose(fan.arclength, s, atol=1e-9):
            raise ValueError("CSV rows do not match a standard fan layout")
        return cls(fan, val)

    def interpolator(self):
        """Cubic interpolation in (boundary parameter, sin theta), periodic in the parameter."""
        fan = self.fan
        key = ("interp", id(self.values))
        ph = fan.grid(fan.phi)[:, 0]
        u = np.sin(fan.grid(fan.theta)[0])
        V = fan.grid(self.values)
        pad = 3
        php = np.concatenate([ph[-pad:] - 2 * np.pi, ph, ph[:pad] + 2 * np.pi])
        Vp = np.concatenate([V[-pad:], V, V[:pad]], axis=0)
        rgi = RegularGridInterpolator((php, u), Vp, method="cubic", bounds_error=False, fill_value=None)

        def ev(phi, theta):
            pts = np.stack([np.mod(phi, 2 * np.pi), np.sin(theta)], -1)
            return rgi(pts)

        return ev


# --------------------------------------------------------------------------
# rays


@dataclass
class RayBundle:
    """Gauss-Legendre nodes along each fan geodesic: positions, velocities, weights."""

    ell: np.ndarray
    X: np.ndarray  # (B, n, 2)
    V: np.ndarray  # (B, n, 2)
    W: np.ndarray  # (B, n) includes ell / 2
    exit_x: np.ndarray
    exit_v: np.ndarray
    status: np.ndarray


def ray_bundle(system: MagneticSystem, fan: Fan, n_gl=N_GL, rtol=RTOL, atol=ATOL) -> RayBundle:
    key = ("bundle", id(system), n_gl, rtol, atol)
    if key in fan._cache:
        return fan._cache[key][1]
    res = flow_batch(system, fan.x, fan.xi, rtol=rtol, atol=atol)
    ell = res.t
    z, w = np.polynomial.legendre.leggauss(n_gl)
    times = 0.5 * ell[:, None] * (z[None] + 1)
    S = states_at(system, fan.x, fan.xi, times, rtol=rtol, atol=atol)
    b = RayBundle(ell, S[..., :2], S[..., 2:], 0.5 * ell[:, None] * w[None], res.y[:, :2], res.y[:, 2:], res.status)
    fan._cache[key] = (system, b)  # keep the system alive so the id stays unique
    return b


def ray_transform_fn(system: MagneticSystem, phi, fan: Fan, n_gl=N_GL) -> BoundaryData:
    """Integral of phi(x, v) along each fan geodesic."""
    b = ray_bundle(system, fan, n_gl)
    vals = np.sum(b.W * phi(b.X, b.V), axis=1)
    return BoundaryData(fan, vals)


def ray_transform(system: MagneticSystem, f: TensorPair, fan: Fan, n_gl=N_GL) -> BoundaryData:
    """Magnetic ray transform of the pair [h, beta]."""
    return ray_transform_fn(system, f.integrand, fan, n_gl)


def exit_lengths(system: MagneticSystem, fan: Fan):
    return ray_bundle(system, fan).ell


# --------------------------------------------------------------------------
# adjoint and normal operator


def fiber_angles(n_fiber):
    return 2 * np.pi * np.arange(n_fiber) / n_fiber


_MEMO: dict = {}
_MEMO_SIZE = 16


def _memo(key, system, fn):
    """Write-once memo keyed by the system identity and a content key; the system object is
    kept alive with the entry so its id cannot be reused."""
    k = (id(system),) + key
    hit = _MEMO.get(k)
    if hit is not None and hit[0] is system:
        return hit[1]
    val = fn()
    if len(_MEMO) >= _MEMO_SIZE:
        _MEMO.pop(next(iter(_MEMO)))
    _MEMO[k] = (system, val)
    return val


def _points_key(X):
    X = np.ascontiguousarray(X, dtype=float)
    return (X.shape, hash(X.tobytes()))


def backward_entry(system: MagneticSystem, X, n_fiber=128, rtol=RTOL, atol=ATOL):
    """Entry states (boundary parameter, angle from inward normal) of the geodesics through
    each x with unit direction at each fiber angle (memoized)."""
    X = np.atleast_2d(np.asarray(X, float))

    def run():
        th = fiber_angles(n_fiber)
        P = X.shape[0]
        XX = np.repeat(X, n_fiber, axis=0)
        V = system.unit_vector(XX, np.tile(th, P))
        res = flow_batch(system, XX, V, backward=True, rtol=rtol, atol=atol)
        xe, ve = res.y[:, :2], res.y[:, 2:]
        return system.domain.param(xe), system.boundary_angle(xe, ve), V.reshape(P, n_fiber, 2), res.t.reshape(P, n_fiber)

    return _memo(("entry", _points_key(X), n_fiber, rtol, atol), system, run)


@dataclass
class AdjointResult:
    H: np.ndarray  # (P, 2, 2) covariant
    B: np.ndarray  # (P, 2) covariant
    flagged: np.ndarray  # evaluation points in the grazing-shadow collar


def _lower_fiber_moments(system, X, V, vals, n_fiber):
    """g-lowered fiber moments [int xi xi psi, (2/(n-1)) int xi psi] with the uniform
    fiber quadrature."""
    dth = 2 * np.pi / n_fiber
    g = system.g(X)
    Vl = np.einsum("...ij,...fj->...fi", g, V)
    H = dth * np.einsum("pfi,pfj,pf->pij", Vl, Vl, vals)
    B = (dth / PAIR_WEIGHT) * np.einsum("pfi,pf->pi", Vl, vals)
    return H, B


def adjoint(system: MagneticSystem, psi, X, n_fiber=128, collar=1e-3) -> AdjointResult:
    """I* psi at points X. psi is BoundaryData (interpolated) or a callable psi(phi, theta)
    on the inward boundary bundle."""
    X = np.atleast_2d(X)
    ev = psi.interpolator() if isinstance(psi, BoundaryData) else psi
    phe, the, V, _ = backward_entry(system, X, n_fiber)
    vals = ev(phe, the).reshape(X.shape[0], n_fiber)
    H, B = _lower_fiber_moments(system, X, V, vals, n_fiber)
    return AdjointResult(H, B, system.domain.rho(X) < collar)


def flow_constant_extension(system: MagneticSystem, psi, X, n_fiber=128):
    """psi^sharp(x, xi) on the grid X x fiber angles."""
    ev = psi.interpolator() if isinstance(psi, BoundaryData) else psi
    phe, the, _, _ = backward_entry(system, X, n_fiber)
    return ev(phe, the).reshape(np.atleast_2d(X).shape[0], n_fiber)


@dataclass
class LineBundle:
    """Gauss-Legendre nodes on both halves of the full geodesic through each (x, theta)."""

    V0: np.ndarray  # (P, F, 2) unit directions at x
    X: np.ndarray  # (P, F, 2n, 2)
    V: np.ndarray
    W: np.ndarray  # (P, F, 2n)
    ell_plus: np.ndarray
    ell_minus: np.ndarray


def line_bundle(system: MagneticSystem, X, n_fiber=128, n_gl=32, domain: Disk | None = None, rtol=RTOL, atol=ATOL) -> LineBundle:
    X = np.atleast_2d(np.asarray(X, float))
    domain = domain or system.domain

    def run():
        P = X.shape[0]
        XX = np.repeat(X, n_fiber, axis=0)
        V = system.unit_vector(XX, np.tile(fiber_angles(n_fiber), P))
        z, w = np.polynomial.legendre.leggauss(n_gl)
        halves = []
        for back in (False, True):
            res = flow_batch(system, XX, V, backward=back, domain=domain, rtol=rtol, atol=atol)
            ell = res.t
            times = 0.5 * ell[:, None] * (z[None] + 1)
            S = states_at(system, XX, V, times, backward=back, rtol=rtol, atol=atol)
            halves.append((ell, S, 0.5 * ell[:, None] * w[None]))
        (lp, Sp, Wp), (lm, Sm, Wm) = halves
        S = np.concatenate([Sp, Sm], axis=1)
        Wt = np.concatenate([Wp, Wm], axis=1)
        sh = (P, n_fiber, 2 * n_gl)
        return LineBundle(
            V.reshape(P, n_fiber, 2), S[..., :2].reshape(sh + (2,)), S[..., 2:].reshape(sh + (2,)), Wt.reshape(sh),
            lp.reshape(P, n_fiber), lm.reshape(P, n_fiber),
        )

    return _memo(("lines", _points_key(X), n_fiber, n_gl, domain.radius, rtol, atol), system, run)


def full_line_integrals(system: MagneticSystem, integrand, X, n_fiber=128, n_gl=32, domain: Disk | None = None):
    """Integral of integrand(x, v) over the whole geodesic through each x in each fiber
    direction; returns (P, F) values and the directions."""
    lb = line_bundle(system, X, n_fiber, n_gl, domain)
    return np.sum(lb.W * integrand(lb.X, lb.V), axis=-1), lb.V0


def normal_op(system: MagneticSystem, f: TensorPair, X, n_fiber=128, n_gl=32, domain: Disk | None = None) -> AdjointResult:
    """N f at points X by the direct formula: fiber quadrature of the moments of the full
    line integrals of f through each point. Points outside the domain use the enlarged
    disk of radius 1.1 R with the analytic extension of the system; f is taken as zero
    outside the domain."""
    X = np.atleast_2d(X)
    R = system.domain.radius
    if domain is None:
        domain = Disk(1.1 * R) if np.any(np.linalg.norm(X, axis=1) > R) else system.domain

    def integrand(x, v):
        return np.where(np.linalg.norm(x, axis=-1) <= R, f.integrand(x, v), 0.0)

    vals, V = full_line_integrals(system, integrand, X, n_fiber, n_gl, domain)
    H, B = _lower_fiber_moments(system, X, V, vals, n_fiber)
    return AdjointResult(H, B, system.domain.rho(X) < 0)


def pair_pairing(system: MagneticSystem, f: TensorPair, res: AdjointResult, quad: DiskQuadrature):
    """<f, G> in the pair inner product for G given at the quadrature points."""
    H, b = f.values(quad.points)
    return float(np.dot(quad.weights, pair_inner(system, H, b, res.H, res.B, quad.points)))


# --------------------------------------------------------------------------
# Santalo, volume, kinetic solution


def santalo_lhs(system: MagneticSystem, phi, n_r=48, n_phi=96, n_fiber=64):
    """int_SM phi dSigma with dSigma = dVol_g dtheta."""
    q = disk_quadrature(system, n_r, n_phi)
    th = fiber_angles(n_fiber)
    XX = np.repeat(q.points, n_fiber, axis=0)
    V = system.unit_vector(XX, np.tile(th, q.points.shape[0]))
    vals = np.asarray(phi(XX, V), float).reshape(-1, n_fiber)
    return float(np.dot(q.weights, vals.sum(axis=1)) * 2 * np.pi / n_fiber)


def santalo_check(system: MagneticSystem, phi, fan: Fan | None = None, **lhs_kw):
    fan = fan or Fan.build(system)
    lhs = santalo_lhs(system, phi, **lhs_kw)
    rhs = float(np.dot(fan.weights, ray_transform_fn(system, phi, fan).values))
    return lhs, rhs


def volume_from_boundary(system: MagneticSystem, fan: Fan | None = None, rtol=RTOL, atol=ATOL):
    """(1 / 2 pi) times the dmu-integral of the action T - int alpha of the fan geodesics."""
    fan = fan or Fan.build(system)
    alpha_int = lambda x, v: np.einsum("...i,...i->...", system.alpha.value(x), v)
    res = flow_batch(system, fan.x, fan.xi, rtol=rtol, atol=atol, integrands=(alpha_int,))
    A = res.t - res.y[:, 4]
    return float(np.dot(fan.weights, A) / (2 * np.pi))


def area_quadrature(system: MagneticSystem, n_r=64, n_phi=128):
    return float(disk_quadrature(system, n_r, n_phi).weights.sum())


@dataclass
class SphereBundleGrid:
    """Spatial nodes times uniform fiber angles (measured from the frame vector e1)."""

    points: np.ndarray  # (P, 2)
    n_fiber: int
    values: np.ndarray | None = None  # (P, n_fiber)

    def __post_init__(self):
        if self.n_fiber & (self.n_fiber - 1):
            raise ValueError("fiber resolution must be a power of two")

    @property
    def theta(self):
        return fiber_angles(self.n_fiber)

    def with_values(self, values):
        return SphereBundleGrid(self.points, self.n_fiber, np.asarray(values))


def kinetic_solution(system: MagneticSystem, phi, grid: SphereBundleGrid, rtol=RTOL, atol=ATOL) -> SphereBundleGrid:
    """u(x, xi) = - int_0^l phi(psi^t(x, xi)) dt on each grid node."""
    P = grid.points.shape[0]
    XX = np.repeat(grid.points, grid.n_fiber, axis=0)
    V = system.unit_vector(XX, np.tile(grid.theta, P))
    res = flow_batch(system, XX, V, rtol=rtol, atol=atol, integrands=(phi,))
    return grid.with_values(-res.y[:, 4].reshape(P, grid.n_fiber))


def kinetic_at(system: MagneticSystem, phi, X, V, rtol=RTOL, atol=ATOL):
    """u at arbitrary phase points."""
    res = flow_batch(system, np.atleast_2d(X), np.atleast_2d(V), rtol=rtol, atol=atol, integrands=(phi,))
    return -res.y[:, 4]


def l2_bound_check(system: MagneticSystem, f: TensorPair, fan: Fan):
    """Ratio ||I f||^2_mu / (l_max * int_SM |f(x, xi)|^2 dSigma), bounded by one."""
    If = ray_transform(system, f, fan)
    lhs = If.inner(If)
    l_max = float(exit_lengths(system, fan).max())
    rhs = l_max * santalo_lhs(system, lambda x, v: f.integrand(x, v) ** 2)
    return lhs / rhs
