"""Curvature-type quantities along magnetic geodesics, the index form and numerical
checks of the symbol orders of the normal operator blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from . import fields as F
from .flow import GeodesicSolution, exit_times, gauss_curvature, nabla_lorentz, states_at
from .geometry import N_DIM, MagneticSystem
from .transform import Fan, TensorPair, normal_op, ray_bundle

K_THRESHOLD = 4.0


class ResolutionError(ValueError):
    pass


# --------------------------------------------------------------------------
# k_mu and the k-bound


def k_mu_parts(system: MagneticSystem, x, xi):
    """Terms of k_mu for each of the two unit normals eta = +-xi_perp: returns an array
    (..., 2) of 2K + <Y eta, xi>^2 + (n+3)|Y eta|^2 - 2 <(nabla_eta Y) xi, eta>."""
    x = np.asarray(x, float)
    xi = system.normalize(x, np.asarray(xi, float))
    K = gauss_curvature(system, x)
    dY = nabla_lorentz(system, x)  # [..., k, i, j]
    out = []
    for sgn in (1.0, -1.0):
        eta = sgn * system.perp(x, xi)
        Ye = system.lorentz(x, eta)
        a = system.inner(x, Ye, xi)
        b = system.inner(x, Ye, Ye)
        dYe = np.einsum("...k,...kij,...j->...i", eta, dY, xi)
        c = system.inner(x, dYe, eta)
        out.append(2 * K + a**2 + (N_DIM + 3) * b - 2 * c)
    return np.stack(out, -1)


def k_mu(system: MagneticSystem, x, xi):
    """k_mu(x, xi): maximum over the unit vectors orthogonal to xi."""
    return np.max(k_mu_parts(system, x, xi), axis=-1)


@dataclass
class CurvatureReport:
    integrals: np.ndarray  # per geodesic int k_mu^+ dt
    lengths: np.ndarray  # per geodesic travel time T
    products: np.ndarray  # T * int k_mu^+
    k: float  # supremum estimate over the sampled geodesics
    resolution: tuple
    threshold: float = K_THRESHOLD

    @property
    def passed(self):
        return bool(self.k <= self.threshold)

    def to_dict(self):
        return {
            "k_estimate": self.k,
            "threshold": self.threshold,
            "verdict": "pass" if self.passed else "fail",
            "fan": list(self.resolution),
            "max_length": float(self.lengths.max()),
            "max_integral": float(self.integrals.max()),
        }

    def rows(self):
        return np.stack([self.lengths, self.integrals, self.products], -1)


def k_bound(system: MagneticSystem, fan: Fan | None = None, n_gl=48) -> CurvatureReport:
    """Estimate k(M, g, alpha) = sup T_gamma int k_mu^+ over the fan geodesics."""
    fan = fan or Fan.build(system, 64, 32)
    b = ray_bundle(system, fan, n_gl)
    km = k_mu(system, b.X, b.V)
    integ = np.sum(b.W * np.maximum(km, 0.0), axis=1)
    prod = b.ell * integ
    return CurvatureReport(integ, b.ell, prod, float(prod.max()), (fan.n_stations, fan.n_angles))


# --------------------------------------------------------------------------
# index form


@dataclass
class HostNodes:
    """Chebyshev-Lobatto nodes along a boundary-to-boundary host geodesic."""

    t: np.ndarray  # (n,) increasing, from t0 to t1
    x: np.ndarray  # (n, 2)
    v: np.ndarray  # (n, 2)
    t0: float
    t1: float

    @property
    def s(self):
        """Nodes mapped to [-1, 1]."""
        return 2 * (self.t - self.t0) / (self.t1 - self.t0) - 1

    def normal(self, system: MagneticSystem):
        return system.perp(self.x, self.v)


def chebyshev_lobatto(n):
    return -np.cos(np.pi * np.arange(n) / (n - 1))


def host_nodes(system: MagneticSystem, host, n=64) -> HostNodes:
    """Sample a host geodesic at n Chebyshev-Lobatto nodes. ``host`` is a GeodesicSolution
    or an inward boundary state (x, xi)."""
    s = chebyshev_lobatto(n)
    if isinstance(host, GeodesicSolution):
        t0, t1 = host.t_minus, host.t_plus
        t = t0 + 0.5 * (s + 1) * (t1 - t0)
        Y = host(t)
        return HostNodes(t, Y[:, :2], Y[:, 2:], t0, t1)
    x0, v0 = (np.asarray(a, float) for a in host)
    v0 = system.normalize(x0, v0)
    ell = float(exit_times(system, x0[None], v0[None])[0][0])
    t = 0.5 * (s + 1) * ell
    S = states_at(system, x0[None], v0[None], t[None])[0]
    return HostNodes(t, S[:, :2], S[:, 2:], 0.0, ell)


def _cheb_derivative(values, s, scale):
    n = s.size
    c = C.chebfit(s, values, n - 1)
    return C.chebval(s, C.chebder(c)).T * scale


def _cheb_integral(values, s, half_length):
    n = s.size
    c = C.chebfit(s, values, n - 1)
    ci = C.chebint(c)
    return (C.chebval(1.0, ci) - C.chebval(-1.0, ci)) * half_length


def covariant_derivative(system: MagneticSystem, nodes: HostNodes, Z):
    """D_t Z along the host: spectral derivative plus the Christoffel correction."""
    dZ = _cheb_derivative(Z, nodes.s, 2.0 / (nodes.t1 - nodes.t0))
    G = system.christoffel(nodes.x)
    return dZ + np.einsum("nijk,nj,nk->ni", G, nodes.v, Z)


def project_normal(system: MagneticSystem, nodes: HostNodes, Z):
    """Remove the component of Z along the (unit) velocity."""
    c = system.inner(nodes.x, Z, nodes.v) / system.inner(nodes.x, nodes.v, nodes.v)
    return Z - c[:, None] * nodes.v


def index_integrand(system: MagneticSystem, nodes: HostNodes, Z):
    """|D_t Z|^2 - <R(Z, v) v, Z> + <Y(D_t Z), Z> + <(nabla_Z Y) v, Z> - <Y v, Z>^2."""
    x, v = nodes.x, nodes.v
    DZ = covariant_derivative(system, nodes, Z)
    K = gauss_curvature(system, x)
    vv = system.inner(x, v, v)
    zv = system.inner(x, Z, v)
    zz = system.inner(x, Z, Z)
    curv = K * (vv * zz - zv**2)
    dY = nabla_lorentz(system, x)
    nabZ = np.einsum("nk,nkij,nj->ni", Z, dY, v)
    return (
        system.inner(x, DZ, DZ)
        - curv
        + system.inner(x, system.lorentz(x, DZ), Z)
        + system.inner(x, nabZ, Z)
        - system.inner(x, system.lorentz(x, v), Z) ** 2
    )


def index_form(system: MagneticSystem, host, Z, n=64, project=True) -> float:
    """Ind(Z, Z) along the host geodesic.

    Z is a callable of time returning (..., 2) vectors, or an (n, 2) array of values at the
    host's Chebyshev-Lobatto nodes. Z is projected orthogonally to the velocity and must
    vanish at both ends.
    """
    nodes = host if isinstance(host, HostNodes) else host_nodes(system, host, n)
    Zv = np.asarray(Z(nodes.t) if callable(Z) else Z, float)
    if project:
        Zv = project_normal(system, nodes, Zv)
    scale = max(1.0, float(np.max(np.abs(Zv))))
    if np.max(np.abs(Zv[[0, -1]])) > 1e-8 * scale:
        raise ValueError("Z must vanish at both ends of the host geodesic")
    return float(_cheb_integral(index_integrand(system, nodes, Zv), nodes.s, 0.5 * (nodes.t1 - nodes.t0)))


def dirichlet_energy_fd(system: MagneticSystem, host: GeodesicSolution, Z, n=2001):
    """Independent check: trapezoid quadrature of |D_t Z|^2 with centered differences on a
    uniform grid (Z callable in time)."""
    t = np.linspace(host.t_minus, host.t_plus, n)
    Y = host(t)
    x, v = Y[:, :2], Y[:, 2:]
    Zt = Z(t)
    dZ = np.gradient(Zt, t, axis=0, edge_order=2)
    DZ = dZ + np.einsum("nijk,nj,nk->ni", system.christoffel(x), v, Zt)
    return float(np.trapezoid(system.inner(x, DZ, DZ), t))


def random_normal_field(system: MagneticSystem, nodes: HostNodes, rng, n_modes=5):
    """Smooth admissible field a(t) nu(t) with a a random sine series vanishing at the
    ends plus a random Gaussian bump times t (T - t)."""
    T = nodes.t1 - nodes.t0
    tau = (nodes.t - nodes.t0) / T
    k = np.arange(1, n_modes + 1)
    c = rng.normal(size=n_modes) / k
    a = np.sin(np.pi * np.outer(tau, k)) @ c
    c0, w = rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.3)
    a = a + rng.normal() * 4 * tau * (1 - tau) * np.exp(-(((tau - c0) / w) ** 2))
    return a[:, None] * nodes.normal(system)


@dataclass
class IndexTrial:
    values: np.ndarray
    failures: int
    lengths: np.ndarray

    @property
    def min_value(self):
        return float(self.values.min())


def index_positivity_trial(system: MagneticSystem, n_trials=200, seed=0, n=64, margin=0.1) -> IndexTrial:
    """Ind(Z, Z) for random admissible Z on random boundary-to-boundary host geodesics."""
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0, 2 * np.pi, n_trials)
    th = rng.uniform(-np.pi / 2 + margin, np.pi / 2 - margin, n_trials)
    x0, v0 = system.boundary_state(phi, th)
    ell = exit_times(system, x0, v0)[0]
    s = chebyshev_lobatto(n)
    times = 0.5 * (s[None] + 1) * ell[:, None]
    S = states_at(system, x0, v0, times)
    vals = np.empty(n_trials)
    for i in range(n_trials):
        nodes = HostNodes(times[i], S[i, :, :2], S[i, :, 2:], 0.0, float(ell[i]))
        Z = random_normal_field(system, nodes, rng)
        vals[i] = index_form(system, nodes, Z)
    return IndexTrial(vals, int(np.sum(vals <= 0)), ell)


# --------------------------------------------------------------------------
# symbol orders of the normal operator blocks


@dataclass(frozen=True)
class OscillatoryScalar(F.Scalar):
    """profile(x) * cos(k <d, x> - shift)."""

    profile: F.Scalar
    k: float
    d: tuple
    shift: float = 0.0

    def _phase(self, x):
        x = F._asx(x)
        return self.k * (x @ np.asarray(self.d, float)) - self.shift

    def value(self, x):
        return self.profile.value(x) * np.cos(self._phase(x))

    def grad(self, x):
        p = self._phase(x)
        d = np.asarray(self.d, float)
        return self.profile.grad(x) * np.cos(p)[..., None] - (self.k * self.profile.value(x) * np.sin(p))[..., None] * d

    def hess(self, x):
        p = self._phase(x)
        d = np.asarray(self.d, float)
        a, g, H = self.profile.value(x), self.profile.grad(x), self.profile.hess(x)
        dd = np.outer(d, d)
        gd = g[..., :, None] * d + d[:, None] * g[..., None, :]
        return (
            H * np.cos(p)[..., None, None]
            - self.k * np.sin(p)[..., None, None] * gd
            - (self.k**2 * a * np.cos(p))[..., None, None] * dd
        )


BLOCKS = ("N22", "N12", "N21", "N11")  # (output part, input part): hh, beta<-h, h<-beta, beta beta
DIAGONAL = ("N22", "N11")


@dataclass
class SymbolSweep:
    frequencies: np.ndarray
    magnitudes: dict  # block -> (n_freq,)
    slopes: dict  # block -> fitted log-log slope (-inf if identically zero)
    identically_zero: dict
    resolution: dict = field(default_factory=dict)

    def passed(self, diag=(-1.3, -0.7), off=-1.7):
        ok = all(diag[0] <= self.slopes[b] <= diag[1] for b in DIAGONAL)
        return ok and all(self.slopes[b] <= off for b in BLOCKS if b not in DIAGONAL)

    def rows(self):
        return [(b, float(self.slopes[b]), *map(float, self.magnitudes[b])) for b in BLOCKS]


def symbol_sweep(
    system: MagneticSystem,
    frequencies=(8, 16, 32),
    direction=(1.0, 0.0),
    x0=(0.05, -0.05),
    width=1.0,
    n_fiber=1024,
    n_gl=64,
    zero_tol=1e-10,
) -> SymbolSweep:
    """Apply N to e^{i k <x, d>} times a fixed bump (real and imaginary parts separately)
    and fit the decay of each block's output magnitude at x0 against k."""
    freqs = np.asarray(frequencies, float)
    R = system.domain.radius
    kmax = freqs.max()
    if n_fiber < 8 * kmax * R or n_gl < 1.5 * kmax * R:
        raise ResolutionError(f"n_fiber={n_fiber}, n_gl={n_gl} too coarse for frequency {kmax:g}")
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    dp = np.array([-d[1], d[0]])
    profile = F.gaussian_bump(tuple(x0), width, p=2)
    E = tuple(map(tuple, np.outer(dp, dp)))
    X = np.atleast_2d(np.asarray(x0, float))
    mags = {b: np.zeros(freqs.size) for b in BLOCKS}
    for i, k in enumerate(freqs):
        acc = {b: 0.0 for b in BLOCKS}
        for shift in (0.0, np.pi / 2):
            s = OscillatoryScalar(profile, float(k), tuple(d), shift)
            fh = TensorPair(h=F.ScalarTimesTensor(s, E))
            fb = TensorPair(beta=F.ScalarTimesForm(s, F.ConstantForm(tuple(dp))))
            Nh = normal_op(system, fh, X, n_fiber=n_fiber, n_gl=n_gl)
            Nb = normal_op(system, fb, X, n_fiber=n_fiber, n_gl=n_gl)
            acc["N22"] += np.sum(Nh.H[0] ** 2)
            acc["N12"] += np.sum(Nh.B[0] ** 2)
            acc["N21"] += np.sum(Nb.H[0] ** 2)
            acc["N11"] += np.sum(Nb.B[0] ** 2)
        for b in BLOCKS:
            mags[b][i] = np.sqrt(acc[b])
    ref = max(mags["N22"].max(), mags["N11"].max())
    slopes, zero = {}, {}
    for b in BLOCKS:
        zero[b] = bool(np.all(mags[b] <= zero_tol * ref))
        slopes[b] = -np.inf if zero[b] else float(np.polyfit(np.log(freqs), np.log(mags[b]), 1)[0])
    return SymbolSweep(freqs, mags, slopes, zero, {"n_fiber": n_fiber, "n_gl": n_gl, "x0": list(map(float, x0))})
