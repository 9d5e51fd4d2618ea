"""Analytic field families on the plane with closed-form derivatives.

Every evaluator is vectorized over leading axes: points have shape ``(..., 2)``.
Derivative arrays put the differentiation index first, e.g. for a one-form
``jac(x)[..., k, i] = d_k alpha_i`` and for a metric ``dg(x)[..., k, i, j] =
d_k g_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _asx(x) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"points must have trailing dimension 2, got {x.shape}")
    return x


# --------------------------------------------------------------------------
# scalar fields


class Scalar:
    """Scalar field with value, gradient and Hessian."""

    def value(self, x) -> Array:
        raise NotImplementedError

    def grad(self, x) -> Array:
        raise NotImplementedError

    def hess(self, x) -> Array:
        raise NotImplementedError

    def value_grad(self, x) -> tuple[Array, Array]:
        """Value and gradient together; composite fields override this to share work."""
        return self.value(x), self.grad(x)

    def __call__(self, x) -> Array:
        return self.value(x)

    def __add__(self, other: "Scalar") -> "Scalar":
        return SumScalar((self, other))

    def __mul__(self, other) -> "Scalar":
        if isinstance(other, Scalar):
            return ProductScalar(self, other)
        return ScaledScalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Scalar":
        return ScaledScalar(self, -1.0)


@dataclass(frozen=True)
class ConstantScalar(Scalar):
    c: float = 0.0

    def value(self, x):
        x = _asx(x)
        return np.full(x.shape[:-1], self.c)

    def grad(self, x):
        return np.zeros_like(_asx(x))

    def hess(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2))


@dataclass(frozen=True)
class LinearScalar(Scalar):
    """a . x + b"""

    a: tuple = (1.0, 0.0)
    b: float = 0.0

    def value(self, x):
        return _asx(x) @ np.asarray(self.a, float) + self.b

    def grad(self, x):
        x = _asx(x)
        return np.broadcast_to(np.asarray(self.a, float), x.shape).copy()

    def hess(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2))


@dataclass(frozen=True)
class QuadraticScalar(Scalar):
    """0.5 x^T A x + b . x + c with symmetric A."""

    A: tuple = ((1.0, 0.0), (0.0, 1.0))
    b: tuple = (0.0, 0.0)
    c: float = 0.0

    def _A(self):
        A = np.asarray(self.A, float)
        return 0.5 * (A + A.T)

    def value(self, x):
        x = _asx(x)
        A = self._A()
        return 0.5 * np.einsum("...i,ij,...j->...", x, A, x) + x @ np.asarray(self.b, float) + self.c

    def grad(self, x):
        x = _asx(x)
        return x @ self._A() + np.asarray(self.b, float)

    def hess(self, x):
        x = _asx(x)
        return np.broadcast_to(self._A(), x.shape[:-1] + (2, 2)).copy()


def radial_quadratic(c: float) -> QuadraticScalar:
    """c (1 - |x|^2), which vanishes on the unit circle."""
    return QuadraticScalar(A=((-2 * c, 0.0), (0.0, -2 * c)), c=c)


def monomial_xy(c: float = 1.0) -> QuadraticScalar:
    """c x^1 x^2"""
    return QuadraticScalar(A=((0.0, c), (c, 0.0)))


@dataclass(frozen=True)
class GaussianScalar(Scalar):
    """amp * exp(-|x - center|^2 / width^2)"""

    amp: float = 1.0
    center: tuple = (0.0, 0.0)
    width: float = 0.3

    def _parts(self, x):
        x = _asx(x)
        d = x - np.asarray(self.center, float)
        s2 = self.width**2
        e = self.amp * np.exp(-np.sum(d * d, axis=-1) / s2)
        return d, s2, e

    def value(self, x):
        return self._parts(x)[2]

    def grad(self, x):
        d, s2, e = self._parts(x)
        return (-2.0 / s2) * e[..., None] * d

    def value_grad(self, x):
        d, s2, e = self._parts(x)
        return e, (-2.0 / s2) * e[..., None] * d

    def hess(self, x):
        d, s2, e = self._parts(x)
        eye = np.eye(2)
        return e[..., None, None] * ((4.0 / s2**2) * d[..., :, None] * d[..., None, :] - (2.0 / s2) * eye)


@dataclass(frozen=True)
class SumScalar(Scalar):
    terms: tuple

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def grad(self, x):
        return sum(t.grad(x) for t in self.terms)

    def value_grad(self, x):
        parts = [t.value_grad(x) for t in self.terms]
        return sum(p[0] for p in parts), sum(p[1] for p in parts)

    def hess(self, x):
        return sum(t.hess(x) for t in self.terms)


@dataclass(frozen=True)
class ScaledScalar(Scalar):
    base: Scalar
    c: float

    def value(self, x):
        return self.c * self.base.value(x)

    def grad(self, x):
        return self.c * self.base.grad(x)

    def value_grad(self, x):
        v, g = self.base.value_grad(x)
        return self.c * v, self.c * g

    def hess(self, x):
        return self.c * self.base.hess(x)


@dataclass(frozen=True)
class ProductScalar(Scalar):
    a: Scalar
    b: Scalar

    def value(self, x):
        return self.a.value(x) * self.b.value(x)

    def grad(self, x):
        return self.value_grad(x)[1]

    def value_grad(self, x):
        a, ga = self.a.value_grad(x)
        b, gb = self.b.value_grad(x)
        return a * b, a[..., None] * gb + b[..., None] * ga

    def hess(self, x):
        a, b = self.a.value(x), self.b.value(x)
        ga, gb = self.a.grad(x), self.b.grad(x)
        return (
            a[..., None, None] * self.b.hess(x)
            + b[..., None, None] * self.a.hess(x)
            + ga[..., :, None] * gb[..., None, :]
            + gb[..., :, None] * ga[..., None, :]
        )


@dataclass(frozen=True)
class PowerScalar(Scalar):
    """base ** p for integer p >= 1."""

    base: Scalar
    p: int

    def value(self, x):
        return self.base.value(x) ** self.p

    def grad(self, x):
        return self.value_grad(x)[1]

    def value_grad(self, x):
        v, g = self.base.value_grad(x)
        return v**self.p, (self.p * v ** (self.p - 1))[..., None] * g

    def hess(self, x):
        v = self.base.value(x)
        g = self.base.grad(x)
        out = (self.p * v ** (self.p - 1))[..., None, None] * self.base.hess(x)
        if self.p >= 2:
            out = out + (self.p * (self.p - 1) * v ** (self.p - 2))[..., None, None] * g[..., :, None] * g[..., None, :]
        return out


@dataclass(frozen=True)
class ConstantCurvatureFactor(Scalar):
    """u = -log(1 + K |x|^2 / 4): exp(2u) delta has constant Gauss curvature K and equals
    the Euclidean metric at the origin."""

    K: float

    def value(self, x):
        x = _asx(x)
        return -np.log1p(0.25 * self.K * np.sum(x * x, axis=-1))

    def grad(self, x):
        x = _asx(x)
        q = 1 + 0.25 * self.K * np.sum(x * x, axis=-1)
        return -(0.5 * self.K / q)[..., None] * x

    def hess(self, x):
        x = _asx(x)
        q = 1 + 0.25 * self.K * np.sum(x * x, axis=-1)
        a = 0.5 * self.K / q
        return -a[..., None, None] * np.eye(2) + (a**2)[..., None, None] * x[..., :, None] * x[..., None, :]


def boundary_factor(p: int = 1, radius: float = 1.0) -> Scalar:
    """(1 - |x|^2 / R^2)^p, vanishing to order p on the circle of radius R."""
    c = 1.0 / radius**2
    base = QuadraticScalar(A=((-2 * c, 0.0), (0.0, -2 * c)), c=1.0)
    return base if p == 1 else PowerScalar(base, p)


def gaussian_bump(center, width: float = 0.3, amp: float = 1.0, p: int = 1) -> Scalar:
    """Gaussian localized near ``center`` times a factor vanishing on the unit circle."""
    return ProductScalar(GaussianScalar(amp, tuple(center), width), boundary_factor(p))


# --------------------------------------------------------------------------
# one-forms


class OneForm:
    """Covector field alpha_i(x) with jacobian jac[..., k, i] = d_k alpha_i."""

    def value(self, x) -> Array:
        raise NotImplementedError

    def jac(self, x) -> Array:
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)

    def __add__(self, other: "OneForm") -> "OneForm":
        return SumForm((self, other))

    def __mul__(self, c: float) -> "OneForm":
        return ScaledForm(self, float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return ScaledForm(self, -1.0)


class ZeroForm(OneForm):
    def value(self, x):
        return np.zeros_like(_asx(x))

    def jac(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2))

    def __repr__(self):
        return "ZeroForm()"


@dataclass(frozen=True)
class SymmetricGauge(OneForm):
    """alpha = (lam/2)(-x^2 dx^1 + x^1 dx^2), so d alpha = lam dx^1 ^ dx^2."""

    lam: float

    def value(self, x):
        x = _asx(x)
        return 0.5 * self.lam * np.stack([-x[..., 1], x[..., 0]], axis=-1)

    def jac(self, x):
        x = _asx(x)
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 1, 0] = -0.5 * self.lam
        J[..., 0, 1] = 0.5 * self.lam
        return J


@dataclass(frozen=True)
class ExactForm(OneForm):
    """alpha = d phi"""

    phi: Scalar

    def value(self, x):
        return self.phi.grad(x)

    def jac(self, x):
        return self.phi.hess(x)


@dataclass(frozen=True)
class ScalarTimesForm(OneForm):
    """s(x) * base(x)"""

    s: Scalar
    base: OneForm

    def value(self, x):
        return self.s.value(x)[..., None] * self.base.value(x)

    def jac(self, x):
        s = self.s.value(x)
        return s[..., None, None] * self.base.jac(x) + self.s.grad(x)[..., :, None] * self.base.value(x)[..., None, :]


@dataclass(frozen=True)
class ConstantForm(OneForm):
    c: tuple = (1.0, 0.0)

    def value(self, x):
        x = _asx(x)
        return np.broadcast_to(np.asarray(self.c, float), x.shape).copy()

    def jac(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2))


@dataclass(frozen=True)
class SumForm(OneForm):
    terms: tuple

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def jac(self, x):
        return sum(t.jac(x) for t in self.terms)


@dataclass(frozen=True)
class ScaledForm(OneForm):
    base: OneForm
    c: float

    def value(self, x):
        return self.c * self.base.value(x)

    def jac(self, x):
        return self.c * self.base.jac(x)


@dataclass(frozen=True)
class CallableForm(OneForm):
    """User-supplied covector field; the jacobian falls back to centered differences."""

    fn: Callable
    jac_fn: Callable | None = None
    step: float = 1e-5

    def value(self, x):
        return np.asarray(self.fn(_asx(x)), float)

    def jac(self, x):
        if self.jac_fn is not None:
            return np.asarray(self.jac_fn(_asx(x)), float)
        x = _asx(x)
        cols = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = self.step
            cols.append((self.value(x + e) - self.value(x - e)) / (2 * self.step))
        return np.stack(cols, axis=-2)


# --------------------------------------------------------------------------
# symmetric 2-tensors


class SymTensor:
    """Symmetric covariant 2-tensor h_ij(x) with d[..., k, i, j] = d_k h_ij."""

    def value(self, x) -> Array:
        raise NotImplementedError

    def jac(self, x) -> Array:
        raise NotImplementedError

    def value_jac(self, x) -> tuple[Array, Array]:
        return self.value(x), self.jac(x)

    def __call__(self, x):
        return self.value(x)

    def __add__(self, other: "SymTensor") -> "SymTensor":
        return SumTensor((self, other))

    def __mul__(self, c: float) -> "SymTensor":
        return ScaledTensor(self, float(c))

    __rmul__ = __mul__


class ZeroTensor(SymTensor):
    def value(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2))

    def jac(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def __repr__(self):
        return "ZeroTensor()"


@dataclass(frozen=True)
class ScalarTimesTensor(SymTensor):
    """s(x) E for a constant symmetric matrix E."""

    s: Scalar
    E: tuple = ((1.0, 0.0), (0.0, 1.0))

    def _E(self):
        E = np.asarray(self.E, float)
        return 0.5 * (E + E.T)

    def value(self, x):
        return self.s.value(x)[..., None, None] * self._E()

    def jac(self, x):
        return self.s.grad(x)[..., :, None, None] * self._E()

    def value_jac(self, x):
        v, g = self.s.value_grad(x)
        E = self._E()
        return v[..., None, None] * E, g[..., :, None, None] * E


@dataclass(frozen=True)
class HessianTensor(SymTensor):
    """Euclidean Hessian of a scalar: h_ij = d_i d_j psi (third derivative by differences)."""

    psi: Scalar
    step: float = 1e-4

    def value(self, x):
        return self.psi.hess(x)

    def jac(self, x):
        x = _asx(x)
        out = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = self.step
            out.append((self.psi.hess(x + e) - self.psi.hess(x - e)) / (2 * self.step))
        return np.stack(out, axis=-3)


@dataclass(frozen=True)
class SumTensor(SymTensor):
    terms: tuple

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def jac(self, x):
        return sum(t.jac(x) for t in self.terms)

    def value_jac(self, x):
        parts = [t.value_jac(x) for t in self.terms]
        return sum(p[0] for p in parts), sum(p[1] for p in parts)


@dataclass(frozen=True)
class ScaledTensor(SymTensor):
    base: SymTensor
    c: float

    def value(self, x):
        return self.c * self.base.value(x)

    def jac(self, x):
        return self.c * self.base.jac(x)

    def value_jac(self, x):
        v, j = self.base.value_jac(x)
        return self.c * v, self.c * j


# --------------------------------------------------------------------------
# diffeomorphisms of the disk


class Diffeo:
    """Map f with jacobian J[..., a, i] = d_i f^a and hessian H[..., a, i, j]."""

    def __call__(self, x) -> Array:
        raise NotImplementedError

    def jacobian(self, x) -> Array:
        raise NotImplementedError

    def hessian(self, x) -> Array:
        raise NotImplementedError


class IdentityDiffeo(Diffeo):
    def __call__(self, x):
        return _asx(x).copy()

    def jacobian(self, x):
        x = _asx(x)
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def hessian(self, x):
        x = _asx(x)
        return np.zeros(x.shape[:-1] + (2, 2, 2))


@dataclass(frozen=True)
class RadialDiffeo(Diffeo):
    """f(x) = m(|x|^2) x with m(q) = 1 + eps (1 - q)^2.

    Polynomial in x, equal to the identity on the unit circle together with its
    first derivatives there.
    """

    eps: float

    def _m(self, q):
        e = self.eps
        return 1.0 + e * (1 - q) ** 2, -2 * e * (1 - q), 2 * e * np.ones_like(q)

    def __call__(self, x):
        x = _asx(x)
        m, _, _ = self._m(np.sum(x * x, axis=-1))
        return m[..., None] * x

    def jacobian(self, x):
        x = _asx(x)
        m, m1, _ = self._m(np.sum(x * x, axis=-1))
        return m[..., None, None] * np.eye(2) + 2 * m1[..., None, None] * x[..., :, None] * x[..., None, :]

    def hessian(self, x):
        x = _asx(x)
        _, m1, m2 = self._m(np.sum(x * x, axis=-1))
        eye = np.eye(2)
        # H[a,i,j] = 2 m' (x_j d_ai + x_i d_aj + d_ij x_a) + 4 m'' x_i x_j x_a
        t = (
            np.einsum("...j,ai->...aij", x, eye)
            + np.einsum("...i,aj->...aij", x, eye)
            + np.einsum("...a,ij->...aij", x, eye)
        )
        return 2 * m1[..., None, None, None] * t + 4 * m2[..., None, None, None] * np.einsum(
            "...a,...i,...j->...aij", x, x, x
        )

    def radial_derivative(self, r):
        """d/dr of r m(r^2); positivity means the map is a diffeomorphism."""
        q = r * r
        m, m1, _ = self._m(q)
        return m + 2 * q * m1


@dataclass(frozen=True)
class PullbackForm(OneForm):
    """f^* base + d phi"""

    base: OneForm
    f: Diffeo
    phi: Scalar | None = None

    def value(self, x):
        x = _asx(x)
        y = self.f(x)
        J = self.f.jacobian(x)
        out = np.einsum("...a,...ai->...i", self.base.value(y), J)
        if self.phi is not None:
            out = out + self.phi.grad(x)
        return out

    def jac(self, x):
        x = _asx(x)
        y = self.f(x)
        J = self.f.jacobian(x)
        H = self.f.hessian(x)
        a = self.base.value(y)
        da = self.base.jac(y)  # [b, a] = d_b alpha_a
        out = np.einsum("...ba,...bk,...ai->...ki", da, J, J) + np.einsum("...a,...aik->...ki", a, H)
        if self.phi is not None:
            out = out + self.phi.hess(x)
        return out


def random_gaussian_scalar(rng: np.random.Generator, *, p: int = 1, n_terms: int = 2, width=(0.25, 0.45), reach: float = 0.6) -> Scalar:
    """Sum of a few Gaussians (random centers, widths, amplitudes) vanishing on the unit circle."""
    terms = []
    for _ in range(n_terms):
        r = reach * np.sqrt(rng.uniform())
        t = rng.uniform(0, 2 * np.pi)
        terms.append(
            GaussianScalar(float(rng.normal()), (float(r * np.cos(t)), float(r * np.sin(t))), float(rng.uniform(*width)))
        )
    return ProductScalar(SumScalar(tuple(terms)), boundary_factor(p))
