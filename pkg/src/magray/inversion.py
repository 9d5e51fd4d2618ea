"""Linearized inversion: recover the solenoidal part of a pair from its magnetic ray
transform by conjugate gradients on S N S f = S I* data, and a stability probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .decomposition import H_COMP, Decomposition, decomposition, mesh_pair, sample_pair
from .geometry import MagneticSystem
from .mesh import DiskMesh
from .transform import N_GL, BoundaryData, Fan, TensorPair, normal_op, ray_bundle


def ray_matrix(system: MagneticSystem, mesh: DiskMesh, fan: Fan, n_gl=N_GL) -> sp.csr_matrix:
    """Sparse matrix A with (A f)_r = ray transform of the P1 pair f along fan ray r."""
    b = ray_bundle(system, fan, n_gl)
    B, n = b.W.shape
    P = mesh.n_vertices
    verts, bary, _ = mesh.locate(b.X.reshape(-1, 2))
    V = b.V.reshape(-1, 2)
    W = b.W.reshape(-1)
    rows_node = np.repeat(np.arange(B), n)
    monos = [V[:, i] * V[:, j] for i, j in H_COMP] + [V[:, 0], V[:, 1]]
    rows, cols, vals = [], [], []
    for c, m in enumerate(monos):
        coeff = (W * m)[:, None] * bary  # (B n, 3)
        rows.append(np.repeat(rows_node, 3))
        cols.append((verts + c * P).ravel())
        vals.append(coeff.ravel())
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(B, 6 * P))
    A.sum_duplicates()
    return A


@dataclass
class InversionResult:
    f: np.ndarray  # S of the final iterate (pair vector)
    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)  # relative normal-equation residual (M norm)
    misfits: list = field(default_factory=list)  # data misfit ||A S x - data||_mu

    @property
    def report(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.residuals[-1] if self.residuals else 0.0,
            "final_misfit": self.misfits[-1] if self.misfits else 0.0,
        }


class LinearizedProblem:
    """Discrete normal operator N_h = M^{-1} A^T W A with the solenoidal projector S_h."""

    def __init__(self, system: MagneticSystem, mesh: DiskMesh, fan: Fan, n_gl=N_GL):
        self.system, self.mesh, self.fan = system, mesh, fan
        self.dec: Decomposition = decomposition(system, mesh)
        self.A = ray_matrix(system, mesh, fan, n_gl)
        self.w = fan.weights
        M = self.dec.M_pair.tocsc()
        # M_pair is block diagonal per vertex; a sparse LU is cheap and exact
        from scipy.sparse.linalg import splu

        self._Mlu = splu(M)
        self.M = M

    def minv(self, y):
        return self._Mlu.solve(y)

    def forward(self, f):
        return self.A @ f

    def adjoint(self, data):
        return self.minv(self.A.T @ (self.w * data))

    def normal(self, f):
        return self.adjoint(self.forward(f))

    def S(self, f):
        return self.dec.project_solenoidal(f)


def invert_linearized(
    system: MagneticSystem,
    data: BoundaryData,
    mesh: DiskMesh,
    *,
    rtol=1e-6,
    maxiter=500,
    problem: LinearizedProblem | None = None,
) -> InversionResult:
    """Conjugate gradients for S N S f = S I* data in the pair inner product."""
    prob = problem or LinearizedProblem(system, mesh, data.fan)
    S, M = prob.S, prob.M
    ip = lambda a, b: float(a @ (M @ b))
    L = lambda f: S(prob.normal(S(f)))
    b = S(prob.adjoint(data.values))
    x = np.zeros_like(b)
    r = b.copy()
    nb = np.sqrt(ip(b, b))
    res = InversionResult(x, 0, False)
    if nb == 0:
        res.converged = True
        res.residuals.append(0.0)
        res.misfits.append(float(np.sqrt(np.sum(prob.w * data.values**2))))
        return res
    p = r.copy()
    rr = ip(r, r)
    best = (np.inf, x.copy())
    for k in range(1, maxiter + 1):
        Lp = L(p)
        a = rr / ip(p, Lp)
        x = x + a * p
        r = r - a * Lp
        rr_new = ip(r, r)
        rel = np.sqrt(rr_new) / nb
        mis = prob.forward(S(x)) - data.values
        res.residuals.append(float(rel))
        res.misfits.append(float(np.sqrt(np.sum(prob.w * mis**2))))
        if rel < best[0]:
            best = (rel, x.copy())
        res.iterations = k
        if rel < rtol:
            res.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    x = x if res.converged else best[1]
    res.f = S(x)
    return res


def relative_error(dec: Decomposition, f_rec, f_true):
    return dec.pair_norm(f_rec - f_true) / dec.pair_norm(f_true)


# --------------------------------------------------------------------------
# stability probe


def m1_grid(system: MagneticSystem, spacing=0.1, enlarge=1.1):
    """Cartesian grid covering the enlarged disk M1 of radius 1.1 R."""
    R1 = enlarge * system.domain.radius
    n = int(np.ceil(R1 / spacing))
    g = spacing * np.arange(-n, n + 1)
    XX, YY = np.meshgrid(g, g, indexing="ij")
    mask = XX**2 + YY**2 <= R1**2 + 1e-12
    return g, XX, YY, mask


def h2_proxy(values, spacing, mask):
    """Discrete H^2 norm: L^2 norms of the field and its first and second centered
    differences, over stencils lying inside the mask. values: (nx, ny, m)."""
    v = np.where(mask[..., None], values, 0.0)
    inner = mask[1:-1, 1:-1] & mask[2:, 1:-1] & mask[:-2, 1:-1] & mask[1:-1, 2:] & mask[1:-1, :-2]
    inner &= mask[2:, 2:] & mask[:-2, :-2] & mask[2:, :-2] & mask[:-2, 2:]
    c = v[1:-1, 1:-1]
    dx = (v[2:, 1:-1] - v[:-2, 1:-1]) / (2 * spacing)
    dy = (v[1:-1, 2:] - v[1:-1, :-2]) / (2 * spacing)
    dxx = (v[2:, 1:-1] - 2 * c + v[:-2, 1:-1]) / spacing**2
    dyy = (v[1:-1, 2:] - 2 * c + v[1:-1, :-2]) / spacing**2
    dxy = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * spacing**2)
    tot = sum(np.sum(np.where(inner[..., None], q, 0.0) ** 2) for q in (c, dx, dy, dxx, dyy, dxy))
    return float(np.sqrt(tot * spacing**2))


def stability_probe(system: MagneticSystem, pairs, mesh: DiskMesh, *, spacing=0.1, n_fiber=64, n_gl=32):
    """r(f) = ||f^s||_L2 / ||N f||_{H^2 proxy on M1} over the sample (diagnostic only)."""
    dec = decomposition(system, mesh)
    g, XX, YY, mask = m1_grid(system, spacing)
    pts = np.stack([XX[mask], YY[mask]], -1)
    ratios = []
    for f in pairs:
        fs = dec.project_solenoidal(sample_pair(mesh, f))
        num = dec.pair_norm(fs)
        N = normal_op(system, f, pts, n_fiber=n_fiber, n_gl=n_gl)
        vals = np.zeros(XX.shape + (6,))
        vals[mask] = np.concatenate([N.H.reshape(-1, 4), N.B], axis=1)
        den = h2_proxy(vals, spacing, mask)
        ratios.append(num / den if den > 0 else np.inf)
    ratios = np.array(ratios)
    med = float(np.median(ratios))
    return {
        "ratios": ratios,
        "max": float(ratios.max()),
        "median": med,
        "growth_flag": bool(ratios.max() > 10 * med),
        "diagnostic": True,
    }
