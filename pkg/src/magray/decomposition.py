"""Discrete operators d and delta on pairs over a disk mesh, the Dirichlet solve of
delta d and the potential / solenoidal projections.

Layout on a mesh with P vertices, component-major:
  pair vector       [h11, h12, h21, h22, b1, b2]   length 6P
  potential vector  [v1, v2, phi]                  length 3P
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fields as F
from .geometry import MagneticSystem
from .mesh import DiskMesh
from .transform import PAIR_WEIGHT, TensorPair

H_COMP = ((0, 0), (0, 1), (1, 0), (1, 1))


class ConditioningError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


# --------------------------------------------------------------------------
# vector <-> field conversions


def pack_pair(H, B):
    """(P, 2, 2), (P, 2) -> pair vector."""
    H = np.asarray(H, float)
    B = np.asarray(B, float)
    return np.concatenate([H[:, i, j] for i, j in H_COMP] + [B[:, 0], B[:, 1]])


def unpack_pair(f, P):
    c = np.asarray(f).reshape(6, P)
    H = np.stack([np.stack([c[0], c[1]], -1), np.stack([c[2], c[3]], -1)], -2)
    return H, c[4:6].T.copy()


def pack_potential(v, phi):
    v = np.asarray(v, float)
    return np.concatenate([v[:, 0], v[:, 1], np.asarray(phi, float)])


def unpack_potential(w, P):
    c = np.asarray(w).reshape(3, P)
    return c[:2].T.copy(), c[2].copy()


def sample_pair(mesh: DiskMesh, f: TensorPair):
    H, B = f.values(mesh.vertices)
    return pack_pair(H, B)


def sample_potential(mesh: DiskMesh, v: F.OneForm, phi: F.Scalar):
    return pack_potential(v.value(mesh.vertices), phi.value(mesh.vertices))


@dataclass(frozen=True)
class MeshTensor(F.SymTensor):
    mesh: DiskMesh
    H: np.ndarray

    def value(self, x):
        return self.mesh.interpolate(self.H, x)


@dataclass(frozen=True)
class MeshForm(F.OneForm):
    mesh: DiskMesh
    B: np.ndarray

    def value(self, x):
        return self.mesh.interpolate(self.B, x)


def mesh_pair(mesh: DiskMesh, f_vec) -> TensorPair:
    """P1 interpolant of a pair vector as an evaluable pair (zero outside the mesh)."""
    H, B = unpack_pair(f_vec, mesh.n_vertices)
    return TensorPair(MeshTensor(mesh, H), MeshForm(mesh, B))


# --------------------------------------------------------------------------
# operators


def _blocks(rows):
    return sp.bmat(rows, format="csr")


class Decomposition:
    """Discrete d, delta, Dirichlet solve and projectors for a system on a mesh."""

    def __init__(self, system: MagneticSystem, mesh: DiskMesh):
        self.system = system
        self.mesh = mesh
        self.P = mesh.n_vertices
        X = mesh.vertices
        self._g = system.g(X)
        self._gi = system.ginv(X)
        self._vol = mesh.vertex_areas * system.sqrt_det(X)

    @cached_property
    def D(self):
        """Sparse d: potential vector -> pair vector."""
        sysm, X, P = self.system, self.mesh.vertices, self.P
        Gx, Gy = self.mesh.vertex_gradients
        Gr = (Gx, Gy)
        G = sysm.christoffel(X)  # [k, i, j]
        Om = sysm.omega(X)
        # Y on covectors: (Yv)_b = Omega_ab g^{ac} v_c  (coefficient C[b, c])
        C = np.einsum("pab,pac->pbc", Om, self._gi)
        dg = sp.diags
        rows = []
        for i, j in H_COMP:
            row = []
            for c in range(2):
                blk = 0.5 * ((Gr[i] if c == j else 0 * Gx) + (Gr[j] if c == i else 0 * Gx)) - dg(G[:, c, i, j])
                row.append(blk)
            row.append(None)
            rows.append(row)
        for b in range(2):
            rows.append([-dg(C[:, b, 0]), -dg(C[:, b, 1]), Gr[b]])
        return _blocks(rows)

    @cached_property
    def M_pair(self):
        """Lumped pair mass: g^{ia} g^{jb} on h, ((n-1)/2) g^{ab} on beta, times vertex volumes."""
        gi, vol = self._gi, self._vol
        rows = []
        for i, j in H_COMP:
            row = [sp.diags(vol * gi[:, i, a] * gi[:, j, b]) for a, b in H_COMP] + [None, None]
            rows.append(row)
        for a in range(2):
            rows.append([None] * 4 + [sp.diags(PAIR_WEIGHT * vol * gi[:, a, b]) for b in range(2)])
        return _blocks(rows)

    @cached_property
    def M_pot(self):
        gi, vol = self._gi, self._vol
        return _blocks(
            [
                [sp.diags(vol * gi[:, 0, 0]), sp.diags(vol * gi[:, 0, 1]), None],
                [sp.diags(vol * gi[:, 1, 0]), sp.diags(vol * gi[:, 1, 1]), None],
                [None, None, sp.diags(vol)],
            ]
        )

    @cached_property
    def M_pot_inv(self):
        g, vol = self._g, self._vol
        return _blocks(
            [
                [sp.diags(g[:, 0, 0] / vol), sp.diags(g[:, 0, 1] / vol), None],
                [sp.diags(g[:, 1, 0] / vol), sp.diags(g[:, 1, 1] / vol), None],
                [None, None, sp.diags(1.0 / vol)],
            ]
        )

    @cached_property
    def interior_dofs(self):
        I = self.mesh.interior
        return np.concatenate([I, I + self.P, I + 2 * self.P])

    @cached_property
    def D_I(self):
        return self.D[:, self.interior_dofs].tocsc()

    @cached_property
    def K(self):
        """Dirichlet energy matrix D_I^T M_pair D_I (symmetric positive definite)."""
        return (self.D_I.T @ self.M_pair @ self.D_I).tocsc()

    @cached_property
    def _lu(self):
        return spla.splu(self.K)

    # -- operators on vectors
    def d(self, w):
        return self.D @ w

    def delta(self, f):
        """-M_pot^{-1} D^T M_pair f: the negative adjoint of d."""
        return -(self.M_pot_inv @ (self.D.T @ (self.M_pair @ f)))

    def pair_inner(self, f1, f2):
        return float(f1 @ (self.M_pair @ f2))

    def pot_inner(self, w1, w2):
        return float(w1 @ (self.M_pot @ w2))

    def pair_norm(self, f):
        return np.sqrt(max(self.pair_inner(f, f), 0.0))

    def dirichlet_solve(self, rhs, method="cg", rtol=1e-10):
        """Solve (-delta d) w = rhs at interior dofs with w = 0 on boundary vertices."""
        b = (self.M_pot @ rhs)[self.interior_dofs]
        n = b.size
        if method == "direct":
            x = self._lu.solve(b)
        else:
            if not np.any(b):
                x = np.zeros(n)
            else:
                diag = self.K.diagonal()
                Mp = spla.LinearOperator((n, n), matvec=lambda r: r / diag)
                x, info = spla.cg(self.K, b, rtol=rtol, atol=0.0, maxiter=10 * n, M=Mp)
                res = np.linalg.norm(self.K @ x - b) / np.linalg.norm(b)
                if info != 0:
                    raise ConditioningError(f"CG did not converge (relative residual {res:.2e})", res)
        w = np.zeros(3 * self.P)
        w[self.interior_dofs] = x
        return w

    def project_potential(self, f):
        """P f = d (delta d)_D^{-1} delta f, i.e. the pair-orthogonal projection onto d of
        Dirichlet potentials (direct factorization)."""
        rhs = self.D_I.T @ (self.M_pair @ f)
        return self.D_I @ self._lu.solve(rhs)

    def project_solenoidal(self, f):
        return f - self.project_potential(f)

    def potential_of(self, f):
        """w with d w = P f."""
        w = np.zeros(3 * self.P)
        w[self.interior_dofs] = self._lu.solve(self.D_I.T @ (self.M_pair @ f))
        return w

    def delta_interior(self, f):
        """Interior rows of delta f (the rows tested against Dirichlet potentials)."""
        return self.delta(f)[self.interior_dofs]

    def delta_norm(self, f):
        """Norm of delta f over interior dofs in the potential inner product."""
        r = np.zeros(3 * self.P)
        r[self.interior_dofs] = self.delta_interior(f)
        return np.sqrt(max(self.pot_inner(r, r), 0.0))


_CACHE: dict = {}


def decomposition(system: MagneticSystem, mesh: DiskMesh) -> Decomposition:
    key = (id(system), id(mesh))
    hit = _CACHE.get(key)
    if hit is None or hit.system is not system or hit.mesh is not mesh:
        if len(_CACHE) > 8:
            _CACHE.pop(next(iter(_CACHE)))
        hit = _CACHE[key] = Decomposition(system, mesh)
    return hit


def d_op(system, mesh, w):
    return decomposition(system, mesh).d(w)


def delta_op(system, mesh, f):
    return decomposition(system, mesh).delta(f)


def dirichlet_solve(system, mesh, rhs, method="cg", rtol=1e-10):
    return decomposition(system, mesh).dirichlet_solve(rhs, method, rtol)


def project_potential(system, mesh, f):
    return decomposition(system, mesh).project_potential(f)


def project_solenoidal(system, mesh, f):
    return decomposition(system, mesh).project_solenoidal(f)


def manufactured_error(system, mesh, v: F.OneForm, phi: F.Scalar, potential_pair_fn):
    """Method of manufactured solutions: rhs = -delta_h applied to the sampled continuum
    d w*, then solve and compare with the sampled w* (relative potential norm)."""
    dec = decomposition(system, mesh)
    w_star = sample_potential(mesh, v, phi)
    f = sample_pair(mesh, potential_pair_fn(system, v, phi))
    w = dec.dirichlet_solve(-dec.delta(f))
    e = w - w_star
    return np.sqrt(dec.pot_inner(e, e) / dec.pot_inner(w_star, w_star))
