"""Scattering relation, boundary action by shooting, a direct-minimization oracle for
the action, boundary derivative and linearization checks, gauge transformations and
reversibility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import fsolve, minimize

from . import fields as F
from .flow import (
    EXITED,
    RTOL,
    ATOL,
    GeodesicSolution,
    PhasePoint,
    conjugate_point_scan,
    flow_batch,
    integrate,
)
from .geometry import (
    InvalidDiffeoError,
    MagneticSystem,
    PerturbedMetric,
    PullbackMetric,
    convexity_report,
)

THETA_MARGIN = 0.02


class NoConvergenceError(RuntimeError):
    def __init__(self, msg, landscape=None):
        super().__init__(msg)
        self.landscape = landscape


def wrap(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, float), 2 * np.pi)


# --------------------------------------------------------------------------
# scattering


@dataclass
class ScatteringRecord:
    x: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    ell: np.ndarray
    grazing: np.ndarray


def scatter_batch(system: MagneticSystem, x, xi, *, rtol=RTOL, atol=ATOL, graze_tol=1e-4) -> ScatteringRecord:
    x = np.atleast_2d(x)
    xi = np.atleast_2d(xi)
    res = flow_batch(system, x, xi, rtol=rtol, atol=atol)
    cos_in = system.inner(x, xi, system.inward_normal(x))
    grazing = (np.abs(cos_in) < graze_tol) | (res.status != EXITED)
    return ScatteringRecord(x, xi, res.y[:, :2], res.y[:, 2:4], res.t, grazing)


def scattering(system: MagneticSystem, x, xi, **kw) -> ScatteringRecord:
    """Scattering relation for a single inward boundary state."""
    r = scatter_batch(system, np.asarray(x, float)[None], np.asarray(xi, float)[None], **kw)
    return ScatteringRecord(r.x[0], r.xi[0], r.y[0], r.eta[0], float(r.ell[0]), bool(r.grazing[0]))


def scatter_fan(system: MagneticSystem, phi, theta, **kw) -> ScatteringRecord:
    x, xi = system.boundary_state(np.asarray(phi, float), np.asarray(theta, float))
    return scatter_batch(system, x, xi, **kw)


# --------------------------------------------------------------------------
# action by shooting


@dataclass
class ActionValue:
    A: float
    T: float
    theta: float
    residual: float
    geodesic: GeodesicSolution | None = None
    alpha_integral: float = 0.0


def _shoot_eval(system, phi_x, theta, rtol, atol):
    x, xi = system.boundary_state(phi_x, theta)
    alpha_int = lambda xx, vv: np.einsum("...i,...i->...", system.alpha.value(xx), vv)
    res = flow_batch(system, x, xi, rtol=rtol, atol=atol, integrands=(alpha_int,))
    sigma = np.mod(system.domain.param(res.y[:, :2]) - phi_x, 2 * np.pi)
    return sigma, res


def shoot_batch(
    system: MagneticSystem,
    phi_x,
    phi_y,
    *,
    n_grid=25,
    tol=1e-12,
    rtol=RTOL,
    atol=ATOL,
    margin=THETA_MARGIN,
    maxit=80,
):
    """Vectorized shooting: angles theta (from the inward normal at x) whose geodesics exit
    at y. Returns theta, chord time T, integral of alpha and boundary arc-length residual."""
    phi_x = np.atleast_1d(np.asarray(phi_x, float))
    phi_y = np.atleast_1d(np.asarray(phi_y, float))
    P = phi_x.size
    target = np.mod(phi_y - phi_x, 2 * np.pi)
    if np.any((target < 1e-12) | (target > 2 * np.pi - 1e-12)):
        raise ValueError("shooting requires x != y")
    lim = np.pi / 2 - margin
    grid = np.linspace(-lim, lim, n_grid)
    TH = np.broadcast_to(grid, (P, n_grid))
    sig, _ = _shoot_eval(system, np.repeat(phi_x, n_grid), TH.ravel(), rtol, atol)
    G = sig.reshape(P, n_grid) - target[:, None]
    s = np.sign(G)
    change = s[:, :-1] * s[:, 1:] <= 0
    if not np.all(change.any(axis=1)):
        bad = np.nonzero(~change.any(axis=1))[0]
        raise NoConvergenceError(
            f"shooting could not bracket {bad.size} pair(s)", landscape={"theta": grid, "mismatch": G[bad]}
        )
    j = np.argmax(change, axis=1)
    r = np.arange(P)
    a, b = grid[j], grid[j + 1]
    fa, fb = G[r, j], G[r, j + 1]
    theta = np.where(np.abs(fa) < np.abs(fb), a, b)
    todo = np.ones(P, bool)
    for _ in range(maxit):
        idx = np.nonzero(todo)[0]
        if idx.size == 0:
            break
        den = fb[idx] - fa[idx]
        c = b[idx] - fb[idx] * (b[idx] - a[idx]) / np.where(den != 0, den, 1.0)
        lo, hi = np.minimum(a[idx], b[idx]), np.maximum(a[idx], b[idx])
        c = np.where((c > lo) & (c < hi), c, 0.5 * (lo + hi))
        sc, _ = _shoot_eval(system, phi_x[idx], c, rtol, atol)
        fc = sc - target[idx]
        theta[idx] = c
        same = np.sign(fc) == np.sign(fb[idx])
        a[idx] = np.where(same, a[idx], b[idx])
        fa[idx] = np.where(same, 0.5 * fa[idx], fb[idx])
        b[idx], fb[idx] = c, fc
        conv = (np.abs(fc) * system.domain.radius < tol) | (np.abs(hi - lo) < 1e-15)
        todo[idx[conv]] = False
    sig, res = _shoot_eval(system, phi_x, theta, rtol, atol)
    resid = system.domain.radius * np.abs(wrap(sig - target))
    return theta, res.t, res.y[:, 4], resid


def action_batch(system: MagneticSystem, phi_x, phi_y, **kw):
    """Boundary action A(x, y) = T - integral of alpha for boundary parameters phi_x, phi_y."""
    theta, T, aint, resid = shoot_batch(system, phi_x, phi_y, **kw)
    return T - aint, theta, T, resid


def action(system: MagneticSystem, x, y, *, with_geodesic=True, **kw) -> ActionValue:
    """Magnetic boundary action between boundary points x and y."""
    px = float(system.domain.param(np.asarray(x, float)))
    py = float(system.domain.param(np.asarray(y, float)))
    A, th, T, res = action_batch(system, px, py, **kw)
    geo = None
    if with_geodesic:
        xx, xi = system.boundary_state(px, th[0])
        geo = integrate(system, PhasePoint(xx, xi))
    return ActionValue(float(A[0]), float(T[0]), float(th[0]), float(res[0]), geo, float(T[0] - A[0]))


def requadrature_action(system: MagneticSystem, geo: GeodesicSolution, n=64):
    """T - integral of alpha recomputed by Gauss-Legendre on the dense geodesic."""
    z, w = np.polynomial.legendre.leggauss(n)
    T = geo.t_plus
    t = 0.5 * T * (z + 1)
    Y = geo(t)
    a = np.einsum("...i,...i->...", system.alpha.value(Y[:, :2]), Y[:, 2:])
    return T - 0.5 * T * np.dot(w, a)


# --------------------------------------------------------------------------
# direct minimization oracle


def _polyline_action(system: MagneticSystem, X):
    """Time-free action of the broken line X[0..N]: after optimizing the time parameter
    this is length - integral of alpha, with midpoint quadrature per segment."""
    D = X[1:] - X[:-1]
    M = 0.5 * (X[1:] + X[:-1])
    g = system.g(M)
    gD = np.einsum("...ij,...j->...i", g, D)
    L = np.sqrt(np.einsum("...i,...i->...", D, gD))
    a = system.alpha.value(M)
    val = L.sum() - np.einsum("...i,...i->...", a, D).sum()
    dg = system.metric.dg(M)
    da = system.alpha.jac(M)  # [k, i]
    dval_dD = gD / L[:, None] - a
    dval_dM = 0.5 * np.einsum("...kij,...i,...j->...k", dg, D, D) / L[:, None] - np.einsum("...ki,...i->...k", da, D)
    grad = np.zeros_like(X)
    grad[1:] += dval_dD + 0.5 * dval_dM
    grad[:-1] += -dval_dD + 0.5 * dval_dM
    return val, grad


def action_minimization_oracle(system: MagneticSystem, x, y, n_nodes=200, restarts=3, seed=0, bow=0.05):
    """Minimize the discretized time-free action over broken lines with n_nodes segments
    joining x to y, starting from a few bowed initial curves."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    s = np.linspace(0, 1, n_nodes + 1)[:, None]
    base = (1 - s) * x + s * y
    d = y - x
    nrm = np.array([-d[1], d[0]])
    rng = np.random.default_rng(seed)
    best = np.inf
    for k in range(restarts):
        c = 0.0 if k == 0 else rng.uniform(-bow, bow)
        X0 = base + c * (s * (1 - s)) * nrm
        z0 = X0[1:-1].ravel()

        def fun(z):
            X = np.vstack([x, z.reshape(-1, 2), y])
            v, gr = _polyline_action(system, X)
            return v, gr[1:-1].ravel()

        r = minimize(fun, z0, jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
        best = min(best, float(r.fun))
    return best


# --------------------------------------------------------------------------
# boundary derivative


def action_boundary_derivative(system: MagneticSystem, x, y, xi, *, h=1e-4, rtol=1e-12, atol=1e-12):
    """Derivative of A(., y) at x in the boundary direction xi: the closed form
    -<gamma_dot(0), xi> + alpha_x(xi) together with a centered difference along the
    boundary."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    px = float(system.domain.param(x))
    py = float(system.domain.param(np.asarray(y, float)))
    kw = dict(rtol=rtol, atol=atol, tol=1e-13)
    _, th, _, _ = action_batch(system, px, py, **kw)
    x0, v0 = system.boundary_state(px, th[0])
    formula = -system.inner(x0, v0, xi) + float(np.dot(system.alpha.value(x0), xi))
    # xi = c * d point / d phi
    t = system.domain.dpoint(px)
    c = float(np.dot(xi, t) / np.dot(t, t))
    Ap, _, _, _ = action_batch(system, px + h, py, **kw)
    Am, _, _, _ = action_batch(system, px - h, py, **kw)
    fd = c * float(Ap[0] - Am[0]) / (2 * h)
    return {"formula": float(formula), "fd": fd, "gap": abs(float(formula) - fd)}


def boundary_limit_check(system: MagneticSystem, phi, direction=1.0, s_list=(0.4, 0.2, 0.1)):
    """A(x, tau(s)) / s for the boundary curve tau through x = point(phi), extrapolated to
    s -> 0 by Richardson, against |xi|_g - alpha(xi) with xi = tau'(0)."""
    s_list = np.asarray(s_list, float)
    r = system.domain.radius
    ds = direction * s_list / r  # parameter increments for Euclidean arc-lengths s
    A, _, _, _ = action_batch(system, np.full(s_list.size, phi), phi + ds, margin=1e-3)
    q = A / s_list
    # two Richardson sweeps assuming an expansion in powers of s
    R1 = 2 * q[1:] - q[:-1]
    R2 = (4 * R1[1:] - R1[:-1]) / 3
    x = system.domain.point(phi)
    xi = direction * system.domain.dpoint(phi) / r
    expected = float(system.norm(x, xi) - np.dot(system.alpha.value(x), xi))
    return {"ratios": q, "extrapolated": float(R2[-1]), "expected": expected, "gap": abs(float(R2[-1]) - expected)}


# --------------------------------------------------------------------------
# gauge transformations


def gauge_transform(system: MagneticSystem, f: F.Diffeo, phi: F.Scalar | None = None, *, check=True) -> MagneticSystem:
    """(f^* g, f^* alpha + d phi); f must fix the boundary and phi must vanish there."""
    if check:
        _check_diffeo(system, f)
        if phi is not None:
            b = system.domain.point(np.linspace(0, 2 * np.pi, 64, endpoint=False))
            if np.max(np.abs(phi.value(b))) > 1e-10:
                raise ValueError("gauge potential must vanish on the boundary")
    return MagneticSystem(PullbackMetric(system.metric, f), F.PullbackForm(system.alpha, f, phi), system.domain)


def _check_diffeo(system, f, n=41):
    R = system.domain.radius
    if isinstance(f, F.RadialDiffeo):
        r = np.linspace(0, R, 401)
        if np.any(f.radial_derivative(r) <= 0) or np.any(f._m(r * r)[0] <= 0):
            raise InvalidDiffeoError("radial map is not invertible on the disk")
    g = np.linspace(-R, R, n)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    X = X[np.linalg.norm(X, axis=1) <= R]
    if np.any(np.linalg.det(f.jacobian(X)) <= 0):
        raise InvalidDiffeoError("diffeomorphism has a degenerate or orientation-reversing Jacobian")
    b = system.domain.point(np.linspace(0, 2 * np.pi, 64, endpoint=False))
    if np.max(np.abs(f(b) - b)) > 1e-10:
        raise InvalidDiffeoError("diffeomorphism does not fix the boundary")


def interior_action(system: MagneticSystem, x, y, *, rtol=1e-12, atol=1e-12):
    """T - integral of alpha along the short magnetic geodesic from interior x to y, found
    by solving exp(T, v(theta)) = y for (theta, T). Interior actions are not gauge
    invariant, which makes them a witness against trivial pullbacks."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    E = system.frame(x)
    d0 = np.linalg.solve(E, y - x)
    z0 = np.array([np.arctan2(d0[1], d0[0]), float(system.norm(x, y - x))])
    alpha_int = lambda xx, vv: np.einsum("...i,...i->...", system.alpha.value(xx), vv)

    def run(z):
        v = system.unit_vector(x, np.array(z[0]))
        res = flow_batch(system, x[None], v[None], until_exit=False, t_max=z[1], rtol=rtol, atol=atol, integrands=(alpha_int,))
        return res.y[0]

    z = fsolve(lambda z: run(z)[:2] - y, z0, xtol=1e-13)
    end = run(z)
    if np.linalg.norm(end[:2] - y) > 1e-8:
        raise NoConvergenceError("interior shooting did not converge")
    return float(z[1] - end[4])


# --------------------------------------------------------------------------
# reversibility


def reversibility_residual(system: MagneticSystem, phi, theta, *, rtol=RTOL, atol=ATOL, per_ray=False):
    """max over the fan of the phase-space gap between S(-S(x, xi)) and (x, -xi), measured as
    boundary arc-length gap plus fiber angle gap."""
    rec = scatter_fan(system, phi, theta, rtol=rtol, atol=atol)
    back = scatter_batch(system, rec.y, -rec.eta, rtol=rtol, atol=atol)
    R = system.domain.radius
    arc = R * np.abs(wrap(system.domain.param(back.y) - system.domain.param(rec.x)))
    ang = np.abs(wrap(system.fiber_angle(back.y, back.eta) - system.fiber_angle(rec.x, -rec.xi)))
    gap = arc + ang
    return gap if per_ray else float(gap.max())


# --------------------------------------------------------------------------
# linearization


def c1_norm(field_obj, system: MagneticSystem, n=41):
    """Sup of |value| + |first derivatives| over a grid of the disk (coordinate norms)."""
    R = system.domain.radius
    g = np.linspace(-R, R, n)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    X = X[np.linalg.norm(X, axis=1) <= R]
    v = field_obj.value(X).reshape(X.shape[0], -1)
    j = field_obj.jac(X).reshape(X.shape[0], -1)
    return float(np.max(np.abs(v).sum(1) + np.abs(j).sum(1)))


def perturbed_system(system: MagneticSystem, h: F.SymTensor, beta: F.OneForm, s: float) -> MagneticSystem:
    if s == 0:
        return system
    return MagneticSystem(PerturbedMetric(system.metric, h, s), F.SumForm((system.alpha, F.ScaledForm(beta, s))), system.domain)


def linearization_formula(system: MagneticSystem, h: F.SymTensor, beta: F.OneForm, phi_x, phi_y, n_gl=64):
    """1/2 integral of h(gamma_dot, gamma_dot) - integral of beta(gamma_dot) along the
    reference geodesic joining boundary parameters phi_x to phi_y."""
    _, th, T, _ = action_batch(system, phi_x, phi_y)
    x0, v0 = system.boundary_state(np.atleast_1d(phi_x), th)
    z, w = np.polynomial.legendre.leggauss(n_gl)
    times = 0.5 * T[:, None] * (z[None] + 1)
    from .flow import states_at

    S = states_at(system, x0, v0, times)
    X, V = S[..., :2], S[..., 2:]
    integrand = 0.5 * np.einsum("...ij,...i,...j->...", h.value(X), V, V) - np.einsum("...i,...i->...", beta.value(X), V)
    return 0.5 * T * (integrand @ w)


def linearization_check(system: MagneticSystem, h, beta, phi_x, phi_y, s_list=(1e-2, 5e-3), scale_sweep=(1.0, 0.5, 0.25, 0.125)):
    """Centered differences of A_s(x, y) along (g + s h, alpha + s beta) against the first
    variation formula, and the quadratic behavior of the remainder under scaling."""
    phi_x = np.atleast_1d(np.asarray(phi_x, float))
    phi_y = np.atleast_1d(np.asarray(phi_y, float))
    # integration error near 1e-10 is far below both the difference quotients and the remainders
    kw = dict(rtol=1e-10, atol=1e-10, tol=1e-12)
    A0, _, _, _ = action_batch(system, phi_x, phi_y, **kw)
    formula = linearization_formula(system, h, beta, phi_x, phi_y)
    fds = []
    for s in s_list:
        Ap, _, _, _ = action_batch(perturbed_system(system, h, beta, s), phi_x, phi_y, **kw)
        Am, _, _, _ = action_batch(perturbed_system(system, h, beta, -s), phi_x, phi_y, **kw)
        fds.append((Ap - Am) / (2 * s))
    fds = np.array(fds)
    # Richardson on the two smallest steps when the ratio is 2
    fd = fds[-1]
    if len(s_list) >= 2 and np.isclose(s_list[-2] / s_list[-1], 2.0):
        fd = (4 * fds[-1] - fds[-2]) / 3
    # second-order remainder A(c f) - A(0) - c dA under the scale sweep
    size = c1_norm(h, system) ** 2 + c1_norm(beta, system) ** 2
    rem = []
    for c in scale_sweep:
        Ac, _, _, _ = action_batch(perturbed_system(system, h, beta, c), phi_x, phi_y, **kw)
        rem.append(np.abs(Ac - A0 - c * formula))
    rem = np.array(rem)  # (n_scales, P)
    cs = np.asarray(scale_sweep)
    C = rem / (cs[:, None] ** 2 * size)
    slope = np.polyfit(np.log(cs), np.log(np.maximum(rem.max(axis=1), 1e-300)), 1)[0]
    return {
        "formula": formula,
        "fd": fd,
        "gap": np.abs(fd - formula),
        "remainder": rem,
        "fitted_C": float(C.max()),
        "remainder_slope": float(slope),
    }


# --------------------------------------------------------------------------
# simplicity


@dataclass
class SimplicityReport:
    convex: bool
    min_margin: float
    conjugate_free: bool
    first_conjugate_time: float
    details: dict = field(default_factory=dict)

    @property
    def simple(self):
        return self.convex and self.conjugate_free


def simplicity_report(system: MagneticSystem, n_stations=16, n_angles=16, n_boundary=256) -> SimplicityReport:
    """Proxy for simplicity: strict magnetic convexity of the boundary and absence of
    conjugate points along a fan of boundary-to-boundary geodesics."""
    conv = convexity_report(system, n_boundary)
    if not conv["convex"]:
        return SimplicityReport(False, conv["min_margin"], False, float("nan"), {"convexity": conv})
    phi = np.linspace(0, 2 * np.pi, n_stations, endpoint=False)
    th = np.linspace(-np.pi / 2 + 0.05, np.pi / 2 - 0.05, n_angles)
    P, T = np.meshgrid(phi, th, indexing="ij")
    x, xi = system.boundary_state(P.ravel(), T.ravel())
    rep = conjugate_point_scan(system, x, xi)
    ft = rep.first_time[np.isfinite(rep.first_time)]
    return SimplicityReport(
        True,
        conv["min_margin"],
        not rep.any_conjugate,
        float(ft.min()) if ft.size else float("nan"),
        {"convexity": conv, "max_chord": float(rep.chord_time.max())},
    )
