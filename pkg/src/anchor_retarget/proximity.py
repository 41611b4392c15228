"""Pairwise proximity representation over deformed anchors.

All functions accept ``numpy`` arrays or ``torch`` tensors, return tensors,
and broadcast over leading batch (frame) dimensions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError
from .rotations import as_tensor

DEFAULT_ALPHA = 5.0
D_MIN_FRACTION = 0.05
D_MAX_FRACTION = 0.15


@dataclass(frozen=True)
class ProximityParams:
    alpha: float
    d_min: float
    d_max: float

    def __post_init__(self):
        if not self.d_max > self.d_min >= 0:
            raise ConfigurationError(f"need d_max > d_min >= 0, got {self.d_min}, {self.d_max}")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")

    @classmethod
    def from_height(cls, height, alpha=DEFAULT_ALPHA):
        return cls(alpha, D_MIN_FRACTION * height, D_MAX_FRACTION * height)


def pair_differences(a):
    """``diff[..., i, j] = a_j - a_i``."""
    a = as_tensor(a)
    return a.unsqueeze(-3) - a.unsqueeze(-2)


def safe_norm(x, dim=-1):
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def distance_matrix(anchors):
    return safe_norm(pair_differences(anchors))


def check_orthonormal(frames, tol=1e-6):
    f = as_tensor(frames).detach()
    eye = torch.eye(3, dtype=f.dtype)
    err = (f.transpose(-1, -2) @ f - eye).abs().amax() if f.numel() else 0.0
    if err > tol:
        raise ValidationError(f"tangent frames are not orthonormal (max error {float(err):.2e})")


def direction_matrix(anchors, frames, check=True):
    """``D[i, j] = T_i^T (a_j - a_i)``: direction from i to j in i's frame."""
    frames = as_tensor(frames)
    if check:
        check_orthonormal(frames)
    diff = pair_differences(anchors)
    return torch.einsum("...iba,...ijb->...ija", frames, diff)


def weight_matrix(dist, alpha, d_min, d_max):
    if not d_max > d_min >= 0:
        raise ConfigurationError(f"need d_max > d_min >= 0, got {d_min}, {d_max}")
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    dist = as_tensor(dist)
    return torch.exp(-alpha * torch.clamp(dist - d_min, min=0.0) / (d_max - d_min))


def ordering_matrix(anchors, normals):
    """``D[i, j] = n_i . (a_j - a_i)``; negative means j is behind i's tangent plane."""
    normals = as_tensor(normals)
    return torch.einsum("...ia,...ija->...ij", normals, pair_differences(anchors))


def body_part_mask(labels):
    """True for pairs whose anchors carry different body-part labels."""
    labels = getattr(labels, "labels", labels)
    codes = {name: k for k, name in enumerate(sorted(set(labels)))}
    ids = torch.tensor([codes[x] for x in labels])
    return ids.unsqueeze(0) != ids.unsqueeze(1)


def signed_log_transform(x, eps=1e-8):
    x = as_tensor(x)
    return torch.sign(x) * torch.log1p(torch.abs(x) + eps)


def inverse_signed_log_transform(y, eps=1e-8):
    y = as_tensor(y)
    return torch.sign(y) * (torch.expm1(torch.abs(y)) - eps)


@dataclass(frozen=True, eq=False)
class ProximityTables:
    dist: torch.Tensor
    dir: torch.Tensor
    weight: torch.Tensor
    order: torch.Tensor
    params: ProximityParams


def proximity_tables(anchors, frames, params, check=True):
    """All four tables for deformed anchors; normals are the frames' third column."""
    frames = as_tensor(frames)
    dist = distance_matrix(anchors)
    return ProximityTables(
        dist=dist,
        dir=direction_matrix(anchors, frames, check=check),
        weight=weight_matrix(dist, params.alpha, params.d_min, params.d_max),
        order=ordering_matrix(anchors, frames[..., :, 2]),
        params=params,
    )


def dump_tables(tables, prefix):
    """Write ``<prefix>.bin`` (little-endian float64, row-major) and a JSON header."""
    prefix = Path(prefix)
    fields = {}
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name in ("dist", "dir", "weight", "order"):
            arr = np.ascontiguousarray(getattr(tables, name).detach().numpy(), dtype="<f8")
            fh.write(arr.tobytes())
            fields[name] = {"shape": list(arr.shape), "offset": offset}
            offset += arr.nbytes
    header = {
        "dtype": "<f8",
        "order": "C",
        "fields": fields,
        "params": {"alpha": tables.params.alpha, "d_min": tables.params.d_min, "d_max": tables.params.d_max},
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_tables(prefix):
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    out = {}
    for name, spec in header["fields"].items():
        n = int(np.prod(spec["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=spec["offset"]).reshape(spec["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return ProximityTables(params=ProximityParams(**header["params"]), **out)
