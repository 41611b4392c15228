"""Snapping points onto mesh vertices: soft (differentiable) and hard."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import ConfigurationError, ValidationError
from .rotations import as_tensor

DEFAULT_K = 10
DEFAULT_TAU = 1.0
TAU_FLOOR = 1e-4


@dataclass(frozen=True)
class ProjectionParams:
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")


def _sq_dists(points, vertices):
    p = np.asarray(points, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    return ((p[:, None, :] - v[None, :, :]) ** 2).sum(-1)


def _knn_brute(points, vertices, k):
    out = np.empty((len(points), k), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(len(vertices), 1))
    for s in range(0, len(points), chunk):
        d2 = _sq_dists(points[s:s + chunk], vertices)
        if k < d2.shape[1]:
            # partition first, then a stable sort of (distance, index) on the survivors
            part = np.argpartition(d2, k, axis=1)[:, : k + 1]
            kth = np.take_along_axis(d2, part, 1).max(1, keepdims=True)
            for r in range(len(d2)):
                cand = np.flatnonzero(d2[r] <= kth[r])
                order = np.lexsort((cand, d2[r, cand]))
                out[s + r] = cand[order[:k]]
        else:
            out[s:s + chunk] = np.argsort(d2, axis=1, kind="stable")
    return out


def knn(points, vertices, k):
    """Exact k nearest vertices, ties broken toward the lower vertex index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < k:
        raise ConfigurationError(f"need at least k={k} vertices, mesh has {len(vertices)}")
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(vertices))):
        raise ValidationError("non-finite input to nearest-neighbour search")
    if k == len(vertices):
        return _knn_brute(points, vertices, k)
    # one spare candidate shows whether the k-th place is contested
    _, cand = cKDTree(vertices).query(points, k + 1)
    cand = cand.reshape(len(points), k + 1)
    d2 = ((vertices[cand] - points[:, None, :]) ** 2).sum(-1)
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, 1)
    d2 = np.take_along_axis(d2, order, 1)
    out = cand[:, :k].copy()
    close = d2[:, k] <= d2[:, k - 1] * (1 + 1e-9) + 1e-300
    if close.any():
        out[close] = _knn_brute(points[close], vertices, k)
    return out


def soft_projection_weights(points, vertices, tau, k=DEFAULT_K, neighbors=None):
    """Neighbour indices ``(N, k)`` and softmax weights ``(N, k)``.

    ``points``/``tau`` may be tensors carrying gradients; neighbour selection
    itself is piecewise constant and computed without them.
    """
    points = as_tensor(points)
    verts = as_tensor(vertices)
    if neighbors is None:
        neighbors = knn(points.detach().numpy(), verts.detach().numpy(), k)
    idx = torch.as_tensor(neighbors)
    nb = verts[idx]  # (N, k, 3)
    d2 = ((points.unsqueeze(-2) - nb) ** 2).sum(-1)
    tau = as_tensor(tau)
    if bool((tau.detach() <= 0).any()):
        raise ConfigurationError("tau must be positive")
    # softmax subtracts the row max internally (shift-invariant)
    return idx, torch.softmax(-d2 / tau**2, dim=-1)


def soft_project(points, vertices, tau=DEFAULT_TAU, k=DEFAULT_K, neighbors=None):
    if isinstance(tau, ProjectionParams):
        tau, k = tau.tau, tau.k
    idx, w = soft_projection_weights(points, vertices, tau, k, neighbors)
    verts = as_tensor(vertices)
    return (w.unsqueeze(-1) * verts[idx]).sum(-2)


def hard_project(points, vertices):
    """Nearest vertex per point (lowest index among ties)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < 1:
        raise ConfigurationError("mesh has no vertices")
    idx = knn(points, vertices, 1)[:, 0]
    return vertices[idx], idx
