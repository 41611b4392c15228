"""Ray/triangle queries accelerated by an axis-aligned bounding volume tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MIN = 1e-7
BARY_TOL = 1e-12


def intersect_triangles(origin, direction, a, b, c, t_min=T_MIN):
    """Moller-Trumbore against many triangles at once.

    Returns ``(t, u, v)`` arrays with ``t = inf`` where there is no hit. The
    barycentric test is inclusive on edges so a ray through a shared edge
    hits both neighbours (the caller breaks the tie by face index).
    """
    e1 = b - a
    e2 = c - a
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - a
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= -BARY_TOL) & (v >= -BARY_TOL) & (u + v <= 1.0 + BARY_TOL) & (t > t_min)
    return np.where(hit, t, np.inf), u, v


def _clean_bary(u, v):
    b = np.clip(np.array([1.0 - u - v, u, v]), 0.0, None)
    return b / b.sum()


@dataclass
class Hit:
    t: float
    face: int
    bary: np.ndarray  # weights of the face's three vertices
    point: np.ndarray


class _Node:
    __slots__ = ("lo", "hi", "left", "right", "faces")

    def __init__(self, lo, hi, left=None, right=None, faces=None):
        self.lo, self.hi, self.left, self.right, self.faces = lo, hi, left, right, faces


class TriangleBVH:
    """Median-split AABB tree over the faces of a triangle mesh."""

    def __init__(self, vertices, faces, leaf_size=8):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]
        self._lo = tri.min(1)
        self._hi = tri.max(1)
        cent = tri.mean(1)
        self.root = self._build(np.arange(len(self.faces)), cent, leaf_size)

    def _build(self, idx, cent, leaf_size):
        lo, hi = self._lo[idx].min(0), self._hi[idx].max(0)
        if len(idx) <= leaf_size:
            return _Node(lo, hi, faces=idx)
        axis = int(np.argmax(cent[idx].max(0) - cent[idx].min(0)))
        order = idx[np.argsort(cent[idx, axis], kind="stable")]
        mid = len(order) // 2
        return _Node(
            lo,
            hi,
            self._build(order[:mid], cent, leaf_size),
            self._build(order[mid:], cent, leaf_size),
        )

    @staticmethod
    def _slab(lo, hi, origin, inv_dir, t_max):
        t1 = (lo - origin) * inv_dir
        t2 = (hi - origin) * inv_dir
        tmin = np.nanmax(np.minimum(t1, t2))
        tmax = np.nanmin(np.maximum(t1, t2))
        return tmax >= max(tmin, 0.0) and tmin <= t_max

    def first_hit(self, origin, direction, t_min=T_MIN):
        """Nearest intersection with ``t > t_min`` or ``None``."""
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_dir = 1.0 / direction
        best_t, best_f, best_uv = np.inf, -1, None
        stack = [self.root]
        while stack:
            node = stack.pop()
            with np.errstate(invalid="ignore"):
                if not self._slab(node.lo, node.hi, origin, inv_dir, best_t):
                    continue
            if node.faces is None:
                stack.append(node.right)
                stack.append(node.left)
                continue
            f = node.faces
            t, u, v = intersect_triangles(origin, direction, self._a[f], self._b[f], self._c[f], t_min)
            for k in np.flatnonzero(np.isfinite(t)):
                if t[k] < best_t or (t[k] == best_t and f[k] < best_f):
                    best_t, best_f, best_uv = t[k], int(f[k]), (u[k], v[k])
        if best_f < 0:
            return None
        u, v = best_uv
        bary = _clean_bary(u, v)
        point = bary @ self.vertices[self.faces[best_f]]
        return Hit(float(best_t), best_f, bary, point)


def brute_force_first_hit(vertices, faces, origin, direction, t_min=T_MIN):
    tri = np.asarray(vertices)[np.asarray(faces)]
    t, u, v = intersect_triangles(origin, direction, tri[:, 0], tri[:, 1], tri[:, 2], t_min)
    if not np.isfinite(t).any():
        return None
    f = int(np.argmin(t))  # argmin returns the lowest index among ties
    bary = _clean_bary(u[f], v[f])
    return Hit(float(t[f]), f, bary, bary @ tri[f])
