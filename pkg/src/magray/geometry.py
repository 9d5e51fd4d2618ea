"""Metrics, magnetic potentials, the disk domain and derived operators (Christoffel
symbols, Lorentz force, second fundamental form)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import fields as F

N_DIM = 2

Array = np.ndarray


class DegenerateMetricError(ValueError):
    pass


class DomainError(ValueError):
    pass


class InvalidDiffeoError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# --------------------------------------------------------------------------
# metrics


class Metric:
    """Riemannian metric g_ij(x) with first derivatives dg[..., k, i, j]."""

    family = "custom"

    def g(self, x) -> Array:
        raise NotImplementedError

    def dg(self, x) -> Array:
        raise NotImplementedError

    def g_dg(self, x) -> tuple[Array, Array]:
        return self.g(x), self.dg(x)


class EuclideanMetric(Metric):
    family = "euclidean"

    def g(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def dg(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def __repr__(self):
        return "EuclideanMetric()"


@dataclass(frozen=True)
class ConformalMetric(Metric):
    """g = exp(2u) delta"""

    u: F.Scalar
    family = "conformal"

    def g(self, x):
        e = np.exp(2 * self.u.value(x))
        return e[..., None, None] * np.eye(2)

    def dg(self, x):
        return self.g_dg(x)[1]

    def g_dg(self, x):
        u, gu = self.u.value_grad(x)
        e = np.exp(2 * u)
        return e[..., None, None] * np.eye(2), (2 * e)[..., None, None, None] * gu[..., :, None, None] * np.eye(2)

    def gauss_curvature_exact(self, x):
        """K = -exp(-2u) (Laplacian of u)."""
        return -np.exp(-2 * self.u.value(x)) * np.trace(self.u.hess(x), axis1=-2, axis2=-1)


@dataclass(frozen=True)
class PerturbedMetric(Metric):
    """g + s h"""

    base: Metric
    h: F.SymTensor
    s: float

    def g(self, x):
        return self.base.g(x) + self.s * self.h.value(x)

    def dg(self, x):
        return self.base.dg(x) + self.s * self.h.jac(x)

    def g_dg(self, x):
        g0, dg0 = self.base.g_dg(x)
        h, dh = self.h.value_jac(x)
        return g0 + self.s * h, dg0 + self.s * dh


@dataclass(frozen=True)
class PullbackMetric(Metric):
    """f^* g: g'_ij(x) = J^a_i g_ab(f(x)) J^b_j"""

    base: Metric
    f: F.Diffeo

    def g(self, x):
        J = self.f.jacobian(x)
        return np.einsum("...ai,...ab,...bj->...ij", J, self.base.g(self.f(x)), J)

    def dg(self, x):
        y = self.f(x)
        J = self.f.jacobian(x)
        H = self.f.hessian(x)
        gb = self.base.g(y)
        dgb = self.base.dg(y)  # [c, a, b]
        t1 = np.einsum("...aik,...ab,...bj->...kij", H, gb, J)
        t2 = np.einsum("...ai,...cab,...ck,...bj->...kij", J, dgb, J, J)
        return t1 + t1.swapaxes(-1, -2) + t2


# --------------------------------------------------------------------------
# domain


@dataclass(frozen=True)
class Disk:
    """Disk of radius R centered at the origin, defined by rho = R - |x|."""

    radius: float = 1.0

    def rho(self, x) -> Array:
        return self.radius - np.linalg.norm(x, axis=-1)

    def drho(self, x) -> Array:
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)
        return -x / r[..., None]

    def d2rho(self, x) -> Array:
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)[..., None, None]
        return -(np.eye(2) - x[..., :, None] * x[..., None, :] / r**2) / r

    def point(self, phi) -> Array:
        """Boundary point at polar angle phi (boundary parameter)."""
        phi = np.asarray(phi, float)
        return self.radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)

    def dpoint(self, phi) -> Array:
        phi = np.asarray(phi, float)
        return self.radius * np.stack([-np.sin(phi), np.cos(phi)], axis=-1)

    def param(self, x) -> Array:
        x = np.asarray(x, float)
        return np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)

    def area(self) -> float:
        return np.pi * self.radius**2


# --------------------------------------------------------------------------
# magnetic system


def _inv2(g):
    a, b, c = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
    det = a * c - b * b
    if np.any(~(det > 0)):
        raise DegenerateMetricError("metric is singular or indefinite at some queried point")
    inv = np.empty_like(g)
    inv[..., 0, 0] = c / det
    inv[..., 1, 1] = a / det
    inv[..., 0, 1] = inv[..., 1, 0] = -b / det
    return inv, det


def christoffel_from(ginv, dg):
    """Gamma^i_jk from the inverse metric and dg[..., k, i, j] = d_k g_ij."""
    # Gamma_{l j k} = 0.5 (d_j g_lk + d_k g_lj - d_l g_jk)
    low = 0.5 * (np.einsum("...jlk->...ljk", dg) + np.einsum("...klj->...ljk", dg) - dg)
    return np.einsum("...il,...ljk->...ijk", ginv, low)


_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class MagneticSystem:
    metric: Metric
    alpha: F.OneForm
    domain: Disk = field(default_factory=Disk)

    # -- metric quantities
    def g(self, x):
        return self.metric.g(x)

    def ginv(self, x):
        return _inv2(self.metric.g(x))[0]

    def sqrt_det(self, x):
        return np.sqrt(_inv2(self.metric.g(x))[1])

    def inner(self, x, a, b):
        return np.einsum("...i,...ij,...j->...", a, self.metric.g(x), b)

    def norm(self, x, a):
        return np.sqrt(self.inner(x, a, a))

    def christoffel(self, x) -> Array:
        """Gamma[..., i, j, k] = Gamma^i_jk (Levi-Civita)."""
        x = np.asarray(x, float)
        g, dg = self.metric.g_dg(x)
        return christoffel_from(_inv2(g)[0], dg)

    # -- magnetic quantities
    def omega(self, x) -> Array:
        J = self.alpha.jac(x)  # [k, i] = d_k alpha_i
        return J - J.swapaxes(-1, -2)

    def lorentz_matrix(self, x) -> Array:
        """Y[..., k, i] = Y^k_i, so (Y xi)^k = Y^k_i xi^i."""
        return np.einsum("...kj,...ij->...ki", self.ginv(x), self.omega(x))

    def lorentz(self, x, xi) -> Array:
        return np.einsum("...ki,...i->...k", self.lorentz_matrix(x), xi)

    def lam(self, x) -> Array:
        """lambda with Omega = lambda * (area form of g)."""
        return self.omega(x)[..., 0, 1] / self.sqrt_det(x)

    # -- orientation
    def perp(self, x, xi) -> Array:
        """Rotation of xi by +pi/2 in the g-orientation (counterclockwise in coordinates)."""
        ginv, det = _inv2(self.metric.g(x))
        return np.sqrt(det)[..., None] * np.einsum("...ij,jk,...k->...i", ginv, _ROT, xi)

    def frame(self, x) -> Array:
        """Oriented g-orthonormal frame; columns e1 = d_1/|d_1|, e2 = perp(e1)."""
        x = np.asarray(x, float)
        g = self.metric.g(x)
        e1 = np.zeros(x.shape)
        e1[..., 0] = 1.0 / np.sqrt(g[..., 0, 0])
        e2 = self.perp(x, e1)
        return np.stack([e1, e2], axis=-1)

    def unit_vector(self, x, theta) -> Array:
        """Unit vector at fiber angle theta measured from e1 toward e2."""
        E = self.frame(x)
        theta = np.asarray(theta, float)
        c, s = np.cos(theta), np.sin(theta)
        return E[..., :, 0] * c[..., None] + E[..., :, 1] * s[..., None]

    def fiber_angle(self, x, xi) -> Array:
        E = self.frame(x)
        g = self.metric.g(x)
        a = np.einsum("...i,...ij,...j->...", E[..., :, 0], g, xi)
        b = np.einsum("...i,...ij,...j->...", E[..., :, 1], g, xi)
        return np.arctan2(b, a)

    def normalize(self, x, xi) -> Array:
        return xi / self.norm(x, xi)[..., None]

    # -- boundary geometry
    def grad_rho(self, x) -> Array:
        return np.einsum("...ij,...j->...i", self.ginv(x), self.domain.drho(x))

    def inward_normal(self, x) -> Array:
        gr = self.grad_rho(x)
        return gr / self.norm(x, gr)[..., None]

    def unit_tangent(self, x) -> Array:
        """Unit tangent to the boundary circle, counterclockwise."""
        phi = self.domain.param(x)
        t = self.domain.dpoint(phi)
        return self.normalize(x, t)

    def hess_rho(self, x) -> Array:
        G = self.christoffel(x)
        return self.domain.d2rho(x) - np.einsum("...kij,...k->...ij", G, self.domain.drho(x))

    def second_fundamental_form(self, x, xi) -> Array:
        """Lambda(x, xi) = -Hess rho(xi, xi) / |grad rho|_g for xi tangent to the boundary."""
        gr = self.grad_rho(x)
        return -np.einsum("...i,...ij,...j->...", xi, self.hess_rho(x), xi) / self.norm(x, gr)

    def boundary_state(self, phi, theta) -> tuple[Array, Array]:
        """Point at boundary parameter phi and unit vector at angle theta from the inward normal
        (positive theta turns toward the counterclockwise tangent)."""
        x = self.domain.point(phi)
        nu = self.inward_normal(x)
        tau = self.perp(x, -nu)  # counterclockwise tangent
        theta = np.asarray(theta, float)
        xi = np.cos(theta)[..., None] * nu + np.sin(theta)[..., None] * tau
        return x, xi

    def boundary_angle(self, x, xi) -> Array:
        """Inverse of boundary_state in the fiber: angle of xi from the inward normal."""
        nu = self.inward_normal(x)
        tau = self.perp(x, -nu)
        return np.arctan2(self.inner(x, xi, tau), self.inner(x, xi, nu))

    def boundary_speed(self, phi) -> Array:
        """|d point / d phi|_g, the arc-length density of the boundary parameterization."""
        x = self.domain.point(phi)
        return self.norm(x, self.domain.dpoint(phi))

    def reversed(self) -> "MagneticSystem":
        """The system (g, -alpha)."""
        return MagneticSystem(self.metric, -self.alpha, self.domain)


def convexity_margin(system: MagneticSystem, x, xi, tol: float = 1e-9) -> Array:
    """Lambda(x, xi) - <Y_x(xi), nu(x)> at boundary points; positive means strictly
    magnetic convex in the direction xi."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    if np.any(np.abs(system.domain.rho(x)) > tol):
        raise DomainError("convexity_margin requires boundary points")
    nu = system.inward_normal(x)
    return system.second_fundamental_form(x, xi) - system.inner(x, system.lorentz(x, xi), nu)


def convexity_report(system: MagneticSystem, n: int = 256) -> dict:
    """Minimum convexity margin over both tangent orientations at n boundary stations."""
    phi = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x = system.domain.point(phi)
    tau = system.unit_tangent(x)
    m = np.concatenate([convexity_margin(system, x, tau), convexity_margin(system, x, -tau)])
    return {"min_margin": float(m.min()), "max_margin": float(m.max()), "convex": bool(m.min() > 0)}


def christoffel_fd(system: MagneticSystem, x, step: float = 1e-5) -> Array:
    """Levi-Civita symbols assembled from centered differences of g (oracle)."""
    x = np.asarray(x, float)
    dg = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        dg.append((system.metric.g(x + e) - system.metric.g(x - e)) / (2 * step))
    dg = np.stack(dg, axis=-3)
    ginv = system.ginv(x)
    low = 0.5 * (np.einsum("...jlk->...ljk", dg) + np.einsum("...klj->...ljk", dg) - dg)
    return np.einsum("...il,...ljk->...ijk", ginv, low)


# --------------------------------------------------------------------------
# systems from configuration

def constant_field_system(lam: float, radius: float = 1.0) -> MagneticSystem:
    """Euclidean disk with the constant magnetic field lam dx^1 ^ dx^2."""
    alpha = F.SymmetricGauge(lam) if lam != 0 else F.ZeroForm()
    return MagneticSystem(EuclideanMetric(), alpha, Disk(radius))


def _scalar_from_config(spec, path) -> F.Scalar:
    if isinstance(spec, (int, float)):
        return F.ConstantScalar(float(spec))
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(path, "scalar must be a number or an object with 'type'")
    t = spec["type"]
    try:
        if t == "constant":
            return F.ConstantScalar(float(spec.get("value", 0.0)))
        if t == "linear":
            return F.LinearScalar(tuple(spec.get("a", (1.0, 0.0))), float(spec.get("b", 0.0)))
        if t == "radial_quadratic":
            return F.radial_quadratic(float(spec["c"]))
        if t == "gaussian":
            return F.GaussianScalar(float(spec.get("amp", 1.0)), tuple(spec.get("center", (0.0, 0.0))), float(spec.get("width", 0.3)))
        if t == "gaussian_bump":
            return F.gaussian_bump(tuple(spec.get("center", (0.0, 0.0))), float(spec.get("width", 0.3)), float(spec.get("amp", 1.0)), int(spec.get("p", 1)))
        if t == "constant_curvature":
            return F.ConstantCurvatureFactor(float(spec["K"]))
        if t == "sum":
            return F.SumScalar(tuple(_scalar_from_config(s, f"{path}.terms[{i}]") for i, s in enumerate(spec["terms"])))
    except KeyError as exc:
        raise ConfigError(path, f"missing key {exc}") from None
    raise ConfigError(path, f"unknown scalar type {t!r}")


def metric_from_config(spec, path="system.metric") -> Metric:
    if spec is None:
        return EuclideanMetric()
    if not isinstance(spec, dict):
        raise ConfigError(path, "metric must be an object")
    fam = spec.get("family", "euclidean")
    if fam == "euclidean":
        return EuclideanMetric()
    if fam == "conformal":
        if "u" not in spec:
            raise ConfigError(path, "conformal metric needs 'u'")
        return ConformalMetric(_scalar_from_config(spec["u"], path + ".u"))
    raise ConfigError(path + ".family", f"unknown metric family {fam!r}")


def alpha_from_config(spec, path="system.alpha") -> F.OneForm:
    if spec is None:
        return F.ZeroForm()
    if not isinstance(spec, dict):
        raise ConfigError(path, "alpha must be an object")
    fam = spec.get("family", "zero")
    if fam == "zero":
        return F.ZeroForm()
    if fam == "constant_field":
        if "lam" not in spec:
            raise ConfigError(path, "constant_field needs 'lam'")
        return F.SymmetricGauge(float(spec["lam"]))
    if fam == "exact":
        return F.ExactForm(_scalar_from_config(spec.get("phi"), path + ".phi"))
    if fam == "field_times":
        return F.ScalarTimesForm(_scalar_from_config(spec["s"], path + ".s"), F.SymmetricGauge(float(spec.get("lam", 1.0))))
    if fam == "sum":
        return F.SumForm(tuple(alpha_from_config(s, f"{path}.terms[{i}]") for i, s in enumerate(spec["terms"])))
    raise ConfigError(path + ".family", f"unknown alpha family {fam!r}")


def system_from_config(cfg: dict, path="system") -> MagneticSystem:
    if not isinstance(cfg, dict):
        raise ConfigError(path, "system must be an object")
    radius = cfg.get("radius", 1.0)
    if not isinstance(radius, (int, float)) or radius <= 0:
        raise ConfigError(path + ".radius", "radius must be a positive number")
    return MagneticSystem(metric_from_config(cfg.get("metric"), path + ".metric"), alpha_from_config(cfg.get("alpha"), path + ".alpha"), Disk(float(radius)))


def load_system(path: str | Path) -> MagneticSystem:
    cfg = json.loads(Path(path).read_text())
    return system_from_config(cfg.get("system", cfg))
