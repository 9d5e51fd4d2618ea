"""Two-dimensional operators on the unit sphere bundle: the fiberwise Hilbert transform,
horizontal derivatives, the scattering extension A, the jump operator B and numerical
checks of the identities relating them to the magnetic flow and the ray transform."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.polynomial import chebyshev as C

from .flow import exit_times, flow_batch, states_at
from .geometry import Disk, MagneticSystem
from .transform import Fan, fiber_angles, ray_bundle, ray_transform_fn

# H e^{ik theta} = i * HILBERT_SIGN * sgn(k) e^{ik theta} for the kernel
# (1/2pi) p.v. int cot((phi - theta)/2) u(phi) dphi with theta increasing counterclockwise.
# With a = phi - theta the kernel integral is (1/2pi) int cot(a/2) e^{ika} da = i sgn(k);
# the sign is confirmed against a principal-value quadrature in the tests.
HILBERT_SIGN = 1.0
FD_STEP = 1e-5


# --------------------------------------------------------------------------
# Hilbert transform on fibers


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


def hilbert_multiplier(n):
    k = np.fft.fftfreq(n, 1.0 / n)
    m = 1j * HILBERT_SIGN * np.sign(k)
    if n % 2 == 0:
        m[n // 2] = 0.0  # the Nyquist mode has no sign; drop it to keep real output
    return m


def hilbert_values(values, axis=-1):
    """Fiberwise Hilbert transform of samples on uniform fiber grids along ``axis``."""
    values = np.asarray(values, float)
    n = values.shape[axis]
    if not _is_pow2(n):
        raise ValueError(f"fiber resolution {n} is not a power of two")
    shape = [1] * values.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(np.fft.fft(values, axis=axis) * hilbert_multiplier(n).reshape(shape), axis=axis))


def fiber_derivative(values, axis=-1):
    """Spectral d/dtheta on uniform fiber grids."""
    n = values.shape[axis]
    k = np.fft.fftfreq(n, 1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(np.fft.fft(values, axis=axis) * (1j * k).reshape(shape), axis=axis))


def pv_hilbert_oracle(u, theta, n=4096):
    """(1/2pi) p.v. int cot((phi - theta)/2) u(phi) dphi by the offset trapezoid rule: the
    nodes are symmetric about the singularity so the cot sum vanishes and the rule is
    spectrally accurate for smooth u. ``u`` is a callable of the angle."""
    theta = np.atleast_1d(np.asarray(theta, float))
    a = 2 * np.pi * (np.arange(n) + 0.5) / n
    vals = u(theta[:, None] + a[None, :])
    return np.sum(vals / np.tan(a / 2), axis=1) / n


# --------------------------------------------------------------------------
# functions on a Cartesian sphere-bundle grid


@dataclass
class FiberGrid:
    """Cartesian base grid of spacing h on [-a, a]^2 times a uniform fiber of n_fiber angles
    (measured in the oriented orthonormal frame)."""

    h: float
    half_width: float
    n_fiber: int

    def __post_init__(self):
        if not _is_pow2(self.n_fiber):
            raise ValueError("fiber resolution must be a power of two")

    @cached_property
    def axis(self):
        n = int(round(self.half_width / self.h))
        return self.h * np.arange(-n, n + 1)

    @cached_property
    def points(self):
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([X, Y], -1)

    @property
    def theta(self):
        return fiber_angles(self.n_fiber)

    @cached_property
    def edge(self):
        """Nodes on the outer ring, where one-sided stencils are used."""
        m = np.zeros(self.points.shape[:2], bool)
        m[[0, -1], :] = True
        m[:, [0, -1]] = True
        return m


@dataclass
class FiberFunction:
    grid: FiberGrid
    values: np.ndarray  # (nx, ny, n_fiber)
    source: object = None  # callable u(x, theta) the samples came from, if any

    @cached_property
    def coefficients(self):
        return np.fft.fft(self.values, axis=-1) / self.grid.n_fiber

    def mean(self):
        """Fiber average u_0 broadcast back onto the fibers."""
        u0 = np.mean(self.values, axis=-1, keepdims=True)
        return FiberFunction(self.grid, np.broadcast_to(u0, self.values.shape).copy())

    def hilbert(self):
        return FiberFunction(self.grid, hilbert_values(self.values))

    def __sub__(self, other):
        return FiberFunction(self.grid, self.values - other.values)

    def __add__(self, other):
        return FiberFunction(self.grid, self.values + other.values)


def hilbert_fiber(u: FiberFunction) -> FiberFunction:
    return u.hilbert()


def sample_fiber_function(system: MagneticSystem, grid: FiberGrid, fn) -> FiberFunction:
    """fn(x, theta) evaluated on the grid (x broadcast against the fiber angles)."""
    X = np.broadcast_to(grid.points[:, :, None, :], grid.points.shape[:2] + (grid.n_fiber, 2))
    th = np.broadcast_to(grid.theta, X.shape[:-1])
    return FiberFunction(grid, np.asarray(fn(X, th), float), fn)


def connection_form(system: MagneticSystem, x, step=FD_STEP):
    """omega_k = <nabla_k e1, e2> for the oriented frame, so that the horizontal lift of d_k
    is d_k - omega_k d_theta."""
    x = np.asarray(x, float)
    E = system.frame(x)
    e1, e2 = E[..., :, 0], E[..., :, 1]
    G = system.christoffel(x)  # [i, k, j]
    out = []
    for k in range(2):
        d = np.zeros(2)
        d[k] = step
        de1 = (system.frame(x + d)[..., :, 0] - system.frame(x - d)[..., :, 0]) / (2 * step)
        cov = de1 + np.einsum("...ij,...j->...i", G[..., :, k, :], e1)
        out.append(system.inner(x, cov, e2))
    return np.stack(out, -1)


@dataclass
class Generators:
    G: np.ndarray
    V: np.ndarray
    G_perp: np.ndarray
    G_mu: np.ndarray
    flagged: np.ndarray  # base nodes computed with one-sided stencils


def generators(system: MagneticSystem, u: FiberFunction) -> Generators:
    """G u, V u, G_perp u and G_mu u = G u + lambda V u on the grid: centered spatial
    differences (one-sided on the outer ring) plus the frame connection correction."""
    grid = u.grid
    X = grid.points
    ux = np.gradient(u.values, grid.h, axis=0, edge_order=2)
    uy = np.gradient(u.values, grid.h, axis=1, edge_order=2)
    Vu = fiber_derivative(u.values)
    om = connection_form(system, X)  # (nx, ny, 2)
    hx = ux - om[..., 0, None] * Vu
    hy = uy - om[..., 1, None] * Vu
    XX = np.broadcast_to(X[:, :, None, :], X.shape[:2] + (grid.n_fiber, 2))
    xi = system.unit_vector(XX, np.broadcast_to(grid.theta, XX.shape[:-1]))
    xp = system.perp(XX, xi)
    G = xi[..., 0] * hx + xi[..., 1] * hy
    Gp = xp[..., 0] * hx + xp[..., 1] * hy
    lam = system.lam(X)[..., None]
    return Generators(G, Vu, Gp, G + lam * Vu, grid.edge)


def generators_at(system: MagneticSystem, u, x, theta, step=FD_STEP):
    """Pointwise G u, V u, G_perp u, G_mu u for a callable u(x, theta) by centered
    differences at arbitrary points."""
    x = np.asarray(x, float)
    theta = np.asarray(theta, float)
    Vu = (u(x, theta + step) - u(x, theta - step)) / (2 * step)
    om = connection_form(system, x)
    hor = []
    for k in range(2):
        d = np.zeros(2)
        d[k] = step
        hor.append((u(x + d, theta) - u(x - d, theta)) / (2 * step) - om[..., k] * Vu)
    hor = np.stack(hor, -1)
    xi = system.unit_vector(x, theta)
    xp = system.perp(x, xi)
    G = np.sum(xi * hor, -1)
    Gp = np.sum(xp * hor, -1)
    return Generators(G, Vu, Gp, G + system.lam(x) * Vu, np.zeros(x.shape[:-1], bool))


def flow_derivative(system: MagneticSystem, u, x, theta, s=1e-3):
    """(u(psi^s) - u(psi^-s)) / 2s: G_mu u by differencing along the flow."""
    x = np.atleast_2d(np.asarray(x, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    xi = system.unit_vector(x, theta)
    fw = states_at(system, x, xi, np.full((x.shape[0], 1), s))[:, 0]
    bw = states_at(system, x, xi, np.full((x.shape[0], 1), s), backward=True)[:, 0]
    uf = u(fw[:, :2], system.fiber_angle(fw[:, :2], fw[:, 2:]))
    ub = u(bw[:, :2], system.fiber_angle(bw[:, :2], bw[:, 2:]))
    return (uf - ub) / (2 * s)


def _interior_mask(grid: FiberGrid, radius):
    # drop the outer ring and its neighbours: differences of H u there are one-sided
    mask = ~grid.edge
    mask[[1, -2], :] = False
    mask[:, [1, -2]] = False
    if radius is not None:
        mask &= np.linalg.norm(grid.points, axis=-1) <= radius
    return mask


def commutation_sides(system: MagneticSystem, u: FiberFunction):
    """Grid left side [H, G_mu] u and the right side G_perp(u_0) + (G_perp u)_0.

    The right side is evaluated pointwise from ``u.source`` when available, so their gap
    measures the discretization error of the left side; otherwise both sides use the grid
    stencils, in which case they agree to roundoff (the identity is algebraic in the fiber
    variable once H and V act spectrally)."""
    Hu = u.hilbert()
    lhs = hilbert_values(generators(system, u).G_mu) - generators(system, Hu).G_mu
    if u.source is None:
        Gu = generators(system, u)
        rhs = generators(system, u.mean()).G_perp + np.mean(Gu.G_perp, axis=-1, keepdims=True)
        return lhs, rhs
    grid, fn = u.grid, u.source
    th = grid.theta
    X = np.broadcast_to(grid.points[:, :, None, :], grid.points.shape[:2] + (grid.n_fiber, 2))
    T = np.broadcast_to(th, X.shape[:-1])

    def u0(x, theta):
        xx = np.broadcast_to(x[..., None, :], x.shape[:-1] + (th.size, 2))
        return np.mean(fn(xx, np.broadcast_to(th, xx.shape[:-1])), axis=-1)

    first = generators_at(system, u0, X, T).G_perp
    second = np.mean(generators_at(system, fn, X, T).G_perp, axis=-1, keepdims=True)
    return lhs, first + second


def commutation_residual(system: MagneticSystem, u: FiberFunction, radius=None, per_node=False):
    """max over interior nodes of |[H, G_mu] u - G_perp(u_0) - (G_perp u)_0|."""
    lhs, rhs = commutation_sides(system, u)
    r = np.max(np.abs(lhs - rhs), axis=-1)
    return r if per_node else float(np.max(r[_interior_mask(u.grid, radius)]))


def discrete_commutation_residual(system: MagneticSystem, u: FiberFunction, radius=None):
    """The same residual with both sides from grid stencils (roundoff level)."""
    return commutation_residual(system, FiberFunction(u.grid, u.values), radius)


# --------------------------------------------------------------------------
# boundary fibers, extension A and jump operator B


@dataclass
class BoundaryFibers:
    """Values on full fibers over uniform boundary stations; fiber angles are frame angles
    offset by half a step (so that no sample is exactly tangent to the boundary)."""

    system: MagneticSystem
    phi: np.ndarray  # (S,)
    theta: np.ndarray  # (F,)
    values: np.ndarray  # (S, F)

    @classmethod
    def grid(cls, system, n_stations, n_fiber):
        if not _is_pow2(n_fiber):
            raise ValueError("fiber resolution must be a power of two")
        phi = 2 * np.pi * np.arange(n_stations) / n_stations
        theta = 2 * np.pi * (np.arange(n_fiber) + 0.5) / n_fiber
        return cls(system, phi, theta, np.zeros((n_stations, n_fiber)))

    def states(self):
        x = self.system.domain.point(self.phi)
        X = np.repeat(x[:, None], self.theta.size, axis=1)
        xi = self.system.unit_vector(X, np.broadcast_to(self.theta, X.shape[:-1]))
        return X, xi

    def inward(self):
        X, xi = self.states()
        return self.system.inner(X, xi, self.system.inward_normal(X)) > 0

    def hilbert(self):
        return BoundaryFibers(self.system, self.phi, self.theta, hilbert_values(self.values, axis=1))

    def evaluate(self, phi, theta):
        """Trigonometric interpolation at boundary parameters phi and frame angles theta."""
        S, Fn = self.values.shape
        c = np.fft.fft2(self.values) / (S * Fn)
        m = np.fft.fftfreq(S, 1.0 / S)
        n = np.fft.fftfreq(Fn, 1.0 / Fn)
        if S % 2 == 0:
            c[S // 2, :] = 0.0
        if Fn % 2 == 0:
            c[:, Fn // 2] = 0.0
        phi = np.asarray(phi, float).ravel()
        th = np.asarray(theta, float).ravel() - self.theta[0]
        Et = np.exp(1j * np.outer(th, n))  # (Q, F)
        Q = c @ Et.T  # (S, Q)
        Ep = np.exp(1j * np.outer(phi, m))  # (Q, S)
        return np.real(np.sum(Ep * Q.T, axis=1)).reshape(np.shape(theta))

    def state_values(self, x, xi):
        sysm = self.system
        return self.evaluate(sysm.domain.param(x), sysm.fiber_angle(x, xi))


def _evaluator(w):
    return w.interpolator() if hasattr(w, "interpolator") else w


def extension_A(system: MagneticSystem, w, n_stations=64, n_fiber=64) -> BoundaryFibers:
    """Aw on full boundary fibers: w on inward vectors, w composed with the inverse
    scattering relation (backward flow to the entry state) on outward vectors."""
    ev = _evaluator(w)
    bf = BoundaryFibers.grid(system, n_stations, n_fiber)
    X, xi = bf.states()
    inw = bf.inward()
    dom = system.domain
    vals = np.empty(X.shape[:2])
    xin, vin = X[inw], xi[inw]
    vals[inw] = ev(dom.param(xin), system.boundary_angle(xin, vin))
    xo, vo = X[~inw], xi[~inw]
    res = flow_batch(system, xo, vo, backward=True)
    ye, ve = res.y[:, :2], res.y[:, 2:]
    vals[~inw] = ev(dom.param(ye), system.boundary_angle(ye, ve))
    bf.values = vals
    return bf


def operator_B(system: MagneticSystem, u, fan: Fan):
    """Bu = u - u o S on the fan. ``u`` is a callable u(x, theta) on SM (frame angle) or
    BoundaryFibers; returns the values array (fan order)."""
    b = ray_bundle(system, fan)
    if isinstance(u, BoundaryFibers):
        return u.state_values(fan.x, fan.xi) - u.state_values(b.exit_x, b.exit_v)
    th_in = system.fiber_angle(fan.x, fan.xi)
    th_out = system.fiber_angle(b.exit_x, b.exit_v)
    return u(fan.x, th_in) - u(b.exit_x, th_out)


def fundamental_residual(system: MagneticSystem, u, fan: Fan, step=FD_STEP):
    """||I(G_mu u) + B u||_inf / ||B u||_inf with G_mu u by pointwise differences."""

    def gmu(x, v):
        return generators_at(system, u, x, system.fiber_angle(x, v), step).G_mu

    lhs = ray_transform_fn(system, gmu, fan).values
    Bu = operator_B(system, u, fan)
    scale = float(np.max(np.abs(Bu)))
    return float(np.max(np.abs(lhs + Bu))) / scale, scale


# --------------------------------------------------------------------------
# flow-constant test data


@dataclass
class FlowConstantData:
    """w^sharp(x, xi) = F(entry state of the geodesic into a larger disk) with F a smooth
    trigonometric polynomial in (boundary parameter, sin of the entry angle). The restriction
    to the inward boundary bundle of M lies in the class whose extension A w is smooth."""

    system: MagneticSystem
    coeffs: np.ndarray  # (n_a, n_b, 2) cos/sin weights
    outer_factor: float = 1.5

    @classmethod
    def random(cls, system, rng, n_a=3, n_b=3, outer_factor=1.5):
        a = np.arange(n_a)[:, None, None] + 1.0
        c = rng.normal(size=(n_a, n_b, 2)) / a
        return cls(system, c, outer_factor)

    @property
    def outer(self):
        return Disk(self.outer_factor * self.system.domain.radius)

    def F(self, phi, psi):
        phi = np.asarray(phi, float)
        s = np.sin(psi)
        out = np.zeros(np.broadcast_shapes(phi.shape, s.shape))
        n_a, n_b, _ = self.coeffs.shape
        for a in range(n_a):
            ca, sa = np.cos(a * phi), np.sin(a * phi)
            for b in range(n_b):
                out = out + (self.coeffs[a, b, 0] * ca + self.coeffs[a, b, 1] * sa) * s**b
        return out

    def sharp_states(self, x, xi):
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        shp = x.shape[:-1]
        x2, v2 = x.reshape(-1, 2), xi.reshape(-1, 2)
        res = flow_batch(self.system, x2, v2, backward=True, domain=self.outer)
        ye, ve = res.y[:, :2], res.y[:, 2:]
        # the normal of the distance-to-circle function is radial for any radius
        psi = self.system.boundary_angle(ye, ve)
        phi = np.arctan2(ye[:, 1], ye[:, 0])
        return self.F(phi, psi).reshape(shp)

    def sharp(self, x, theta):
        """w^sharp at (x, frame angle theta)."""
        x = np.asarray(x, float)
        theta = np.broadcast_to(np.asarray(theta, float), x.shape[:-1])
        return self.sharp_states(x, self.system.unit_vector(x, theta))

    def __call__(self, phi, theta):
        """w on the inward boundary bundle of M (theta from the inward normal)."""
        x, xi = self.system.boundary_state(phi, theta)
        return self.sharp_states(x, xi)


# --------------------------------------------------------------------------
# main identity


class _Cheb2:
    """Chebyshev tensor interpolant of values at Lobatto nodes of [-a, a]^2."""

    def __init__(self, a, values):
        self.a = a
        n = values.shape[0]
        s = -np.cos(np.pi * np.arange(n) / (n - 1))
        c = C.chebfit(s, values, n - 1)  # along axis 0
        self.c = C.chebfit(s, c.T, n - 1).T  # c[i, j] for T_i(x) T_j(y)

    def __call__(self, x, dx=0, dy=0):
        c = self.c
        if dx:
            c = C.chebder(c, dx, scl=1.0 / self.a, axis=0)
        if dy:
            c = C.chebder(c, dy, scl=1.0 / self.a, axis=1)
        return C.chebval2d(x[..., 0] / self.a, x[..., 1] / self.a, c)


def lobatto_grid(a, n):
    s = -a * np.cos(np.pi * np.arange(n) / (n - 1))
    X, Y = np.meshgrid(s, s, indexing="ij")
    return np.stack([X, Y], -1)


@dataclass
class IdentityReport:
    identity: str
    resolution: dict
    residual: float
    constant_fit: float = float("nan")
    shape_residual: float = float("nan")
    lhs_scale: float = float("nan")
    slope: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self, path=None):
        d = asdict(self)
        s = json.dumps(d, indent=2, default=float)
        if path is not None:
            Path(path).write_text(s)
        return s


MAIN_LEVELS = {
    0: dict(n_stations=48, n_fiber=32, cheb=16, n_fiber_interior=32, fan=(48, 24)),
    1: dict(n_stations=64, n_fiber=64, cheb=24, n_fiber_interior=64, fan=(64, 32)),
    2: dict(n_stations=96, n_fiber=128, cheb=32, n_fiber_interior=128, fan=(96, 48)),
}


def fiber_moments(system: MagneticSystem, sharp, X, n_fiber):
    """h = int w^sharp dtheta and the vector v = int xi w^sharp dtheta at points X."""
    th = fiber_angles(n_fiber)
    XX = np.broadcast_to(X[..., None, :], X.shape[:-1] + (n_fiber, 2))
    TT = np.broadcast_to(th, XX.shape[:-1])
    vals = sharp(XX, TT)
    xi = system.unit_vector(XX, TT)
    dth = 2 * np.pi / n_fiber
    return dth * vals.sum(-1), dth * np.einsum("...f,...fi->...i", vals, xi)


def main_identity_sides(system: MagneticSystem, w: FlowConstantData, level=1, **override):
    """Both sides of B H A w = -(1/2pi) I[nabla_perp I0* w, delta_perp I1* w] on a fan."""
    p = dict(MAIN_LEVELS[level])
    p.update(override)
    fan = Fan.build(system, *p["fan"])
    # left side
    Aw = extension_A(system, w, p["n_stations"], p["n_fiber"])
    lhs = operator_B(system, Aw.hilbert(), fan)
    # right side: fiber moments on a Chebyshev grid covering the disk
    a = system.domain.radius
    X = lobatto_grid(a, p["cheb"])
    h, v = fiber_moments(system, w.sharp, X, p["n_fiber_interior"])
    sq = system.sqrt_det(X)
    vp = system.perp(X, v)
    ch = _Cheb2(a, h)
    W1, W2 = _Cheb2(a, sq * vp[..., 0]), _Cheb2(a, sq * vp[..., 1])

    def integrand(x, xi):
        dh = np.stack([ch(x, dx=1), ch(x, dy=1)], -1)
        grad = np.einsum("...ij,...j->...i", system.ginv(x), dh)
        first = system.inner(x, xi, system.perp(x, grad))
        div = (W1(x, dx=1) + W2(x, dy=1)) / system.sqrt_det(x)
        return first - div  # <xi, nabla_perp h> + delta_perp v with delta_perp v = -div(v_perp)

    rhs = -ray_transform_fn(system, integrand, fan).values / (2 * np.pi)
    return lhs, rhs, fan, p


def main_identity_residual(system: MagneticSystem, w: FlowConstantData | None = None, level=1, seed=0, noise_floor=1e-10, **override):
    """Relative sup-norm gap between the two sides, with the best-fit constant between
    them and the residual after removing it (shape mismatch)."""
    w = w or FlowConstantData.random(system, np.random.default_rng(seed))
    lhs, rhs, fan, p = main_identity_sides(system, w, level, **override)
    scale = float(np.max(np.abs(lhs)))
    if scale < noise_floor and np.max(np.abs(rhs)) < noise_floor:
        return IdentityReport("main", p, 0.0, extra={"below_noise_floor": True})
    res = float(np.max(np.abs(lhs - rhs))) / scale
    c = float(np.dot(lhs, rhs) / np.dot(rhs, rhs))
    shape = float(np.max(np.abs(lhs - c * rhs))) / scale
    return IdentityReport("main", p, res, c, shape, scale)


def refinement_study(fn, levels):
    """Run fn(level) -> IdentityReport over levels and attach the log2 convergence slope."""
    reps = [fn(L) for L in levels]
    r = np.array([rep.residual for rep in reps])
    if r.size >= 2 and np.all(r > 0):
        slope = float(np.polyfit(np.arange(r.size), np.log2(r), 1)[0])
        for rep in reps:
            rep.slope = slope
    return reps
