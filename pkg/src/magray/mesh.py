"""Triangulated disk with P1 fields: gradients, lumped masses, point location and
interpolation, JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay


@dataclass
class DiskMesh:
    vertices: np.ndarray  # (P, 2)
    triangles: np.ndarray  # (T, 3), counterclockwise
    boundary: np.ndarray  # (P,) bool
    radius: float = 1.0

    @classmethod
    def build(cls, n_rings=20, radius=1.0):
        """Concentric rings of nearly equilateral spacing, Delaunay-triangulated.
        n_rings = 51 gives about 8k vertices."""
        pts = [np.zeros((1, 2))]
        for k in range(1, n_rings + 1):
            r = radius * k / n_rings
            n = 6 * k
            a = 2 * np.pi * (np.arange(n) + 0.5 * (k % 2)) / n
            pts.append(np.stack([r * np.cos(a), r * np.sin(a)], -1))
        V = np.vstack(pts)
        tri = Delaunay(V).simplices.copy()
        mesh = cls(V, tri, np.zeros(V.shape[0], bool), radius)
        mesh._orient()
        mesh.boundary = np.abs(np.linalg.norm(V, axis=1) - radius) < 1e-9
        return mesh

    def _orient(self):
        a = self.signed_areas()
        flip = a < 0
        self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]

    def signed_areas(self):
        P = self.vertices[self.triangles]
        e1 = P[:, 1] - P[:, 0]
        e2 = P[:, 2] - P[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def areas(self):
        return self.signed_areas()

    @cached_property
    def vertex_areas(self):
        """Lumped (barycentric) area per vertex."""
        va = np.zeros(self.n_vertices)
        np.add.at(va, self.triangles.ravel(), np.repeat(self.areas / 3, 3))
        return va

    @cached_property
    def h(self):
        P = self.vertices[self.triangles]
        e = np.concatenate([P[:, 1] - P[:, 0], P[:, 2] - P[:, 1], P[:, 0] - P[:, 2]])
        return float(np.linalg.norm(e, axis=1).max())

    @cached_property
    def interior(self):
        return np.nonzero(~self.boundary)[0]

    @cached_property
    def triangle_gradients(self):
        """Sparse (T x P) matrices Gx, Gy: constant gradient of a P1 field per triangle."""
        P = self.vertices[self.triangles]  # (T, 3, 2)
        A2 = 2 * self.areas
        # grad lambda_i = perp(opposite edge) / (2 area)
        gx = np.stack([P[:, 1, 1] - P[:, 2, 1], P[:, 2, 1] - P[:, 0, 1], P[:, 0, 1] - P[:, 1, 1]], 1) / A2[:, None]
        gy = np.stack([P[:, 2, 0] - P[:, 1, 0], P[:, 0, 0] - P[:, 2, 0], P[:, 1, 0] - P[:, 0, 0]], 1) / A2[:, None]
        rows = np.repeat(np.arange(self.n_triangles), 3)
        cols = self.triangles.ravel()
        shape = (self.n_triangles, self.n_vertices)
        return sp.csr_matrix((gx.ravel(), (rows, cols)), shape), sp.csr_matrix((gy.ravel(), (rows, cols)), shape)

    @cached_property
    def averaging(self):
        """Sparse (P x T) area-weighted average of triangle values onto vertices."""
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(self.n_triangles), 3)
        w = np.repeat(self.areas, 3)
        A = sp.csr_matrix((w, (rows, cols)), (self.n_vertices, self.n_triangles))
        s = np.asarray(A.sum(axis=1)).ravel()
        return sp.diags(1.0 / s) @ A

    @cached_property
    def vertex_gradients(self):
        Gx, Gy = self.triangle_gradients
        Av = self.averaging
        return (Av @ Gx).tocsr(), (Av @ Gy).tocsr()

    @cached_property
    def _delaunay(self):
        return Delaunay(self.vertices)

    def locate(self, X):
        """Triangle index (into self.triangles) and barycentric coordinates; -1 outside."""
        X = np.asarray(X, float)
        shp = X.shape[:-1]
        X2 = X.reshape(-1, 2)
        d = self._delaunay
        s = d.find_simplex(X2)
        T = d.transform[s]
        b = np.einsum("pij,pj->pi", T[:, :2], X2 - T[:, 2])
        bary = np.concatenate([b, 1 - b.sum(1, keepdims=True)], 1)
        verts = d.simplices[s]
        inside = s >= 0
        bary[~inside] = 0.0
        verts[~inside] = 0
        return verts.reshape(shp + (3,)), bary.reshape(shp + (3,)), inside.reshape(shp)

    def interpolation_matrix(self, X):
        """Sparse (N x P) P1 interpolation; rows of points outside the mesh are zero."""
        verts, bary, _ = self.locate(np.asarray(X).reshape(-1, 2))
        n = verts.shape[0]
        rows = np.repeat(np.arange(n), 3)
        return sp.csr_matrix((bary.ravel(), (rows, verts.ravel())), (n, self.n_vertices))

    def interpolate(self, values, X):
        """P1 interpolation of vertex values (P, ...) at points X (..., 2); zero outside."""
        X = np.asarray(X, float)
        values = np.asarray(values, float)
        rest = values.shape[1:]
        verts, bary, _ = self.locate(X)
        vals = values.reshape(self.n_vertices, -1)[verts]  # (..., 3, m)
        out = np.einsum("...k,...km->...m", bary, vals)
        return out.reshape(X.shape[:-1] + rest)

    def to_dict(self):
        return {
            "radius": self.radius,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": self.boundary.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["vertices"], float), np.asarray(d["triangles"], int), np.asarray(d["boundary"], bool), float(d["radius"])
        )

    def to_json(self, path, fields: dict | None = None):
        d = self.to_dict()
        if fields:
            d["fields"] = {k: np.asarray(v).tolist() for k, v in fields.items()}
        Path(path).write_text(json.dumps(d))

    @classmethod
    def from_json(cls, path):
        d = json.loads(Path(path).read_text())
        mesh = cls.from_dict(d)
        fields = {k: np.asarray(v) for k, v in d.get("fields", {}).items()}
        return mesh, fields
