"""Bone-indexed surface anchors: extraction by ray casting and deformation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .character import (
    END_EFFECTORS,
    JointTransforms,
    SkinWeights,
    blended_rotation,
    lbs_tensors,
    skinning_transforms,
)
from .errors import ExtractionError, StructuralError
from .raycast import TriangleBVH
from .rotations import as_tensor

DEFAULT_SAMPLES_PER_BONE = 3
DEFAULT_RAYS_PER_SAMPLE = 8
VERTEX_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Anchors ordered by (bone, sample, ray).

    ``frames[i]`` has columns (tangent, bitangent, normal); tangent is the
    rest bone axis and bitangent = normal x tangent, which makes the basis
    right-handed.
    """

    bone_parent: np.ndarray
    bone_child: np.ndarray
    sample_index: np.ndarray
    ray_index: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    rest_positions: np.ndarray
    frames: np.ndarray
    labels: tuple
    skin: SkinWeights
    samples_per_bone: int
    rays_per_sample: int

    def __len__(self):
        return len(self.rest_positions)

    @property
    def n_anchors(self):
        return len(self.rest_positions)

    @property
    def normals(self):
        return self.frames[:, :, 2]

    @property
    def tangents(self):
        return self.frames[:, :, 0]

    def effector_anchors(self, skeleton, e):
        """Indices of anchors that sit on the end-effector segment(s) of ``e``."""
        return np.flatnonzero(np.isin(self.bone_parent, sorted(skeleton.end_joints(e))))

    def limb_anchors(self, skeleton, e):
        return np.flatnonzero(np.isin(self.bone_parent, sorted(skeleton.limb_joints(e))))


@dataclass(frozen=True, eq=False)
class DeformedAnchors:
    positions: np.ndarray
    frames: np.ndarray

    @property
    def normals(self):
        return self.frames[..., :, 2]


def _ray_basis(axis):
    ref = np.array([0.0, 0.0, 1.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ axis) * axis
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def frame_tensors(tangent, normal):
    """Frames from unit tangents: the tangent is used as given (not
    renormalized), the normal is made orthogonal to it."""
    n = normal - (normal * tangent).sum(-1, keepdim=True) * tangent
    n = n / torch.linalg.norm(n, dim=-1, keepdim=True)
    b = torch.cross(n, tangent, dim=-1)
    return torch.stack([tangent, b, n], dim=-1)


def make_frame(tangent, normal):
    """Orthonormal (tangent, bitangent, normal) matrix, tangent direction kept."""
    t = np.asarray(tangent, dtype=np.float64)
    t = t / np.linalg.norm(t)
    return frame_tensors(torch.from_numpy(t), torch.as_tensor(normal, dtype=torch.float64)).numpy()


def extract_anchors(mesh, skeleton, skin, samples_per_bone=DEFAULT_SAMPLES_PER_BONE,
                    rays_per_sample=DEFAULT_RAYS_PER_SAMPLE):
    if samples_per_bone < 1 or rays_per_sample < 1:
        raise ValueError("samples_per_bone and rays_per_sample must be >= 1")
    bvh = TriangleBVH(mesh.vertices, mesh.faces)
    vnormals = mesh.vertex_normals()
    g = skeleton.rest_global
    rows = []
    for p, c in skeleton.bones:
        seg = g[c] - g[p]
        length = np.linalg.norm(seg)
        if length < 1e-12:
            raise StructuralError(f"bone {skeleton.names[p]}->{skeleton.names[c]} has zero length")
        axis = seg / length
        u, w = _ray_basis(axis)
        for s in range(samples_per_bone):
            origin = g[p] + (s + 0.5) / samples_per_bone * seg
            for k in range(rays_per_sample):
                ang = 2.0 * np.pi * k / rays_per_sample
                d = np.cos(ang) * u + np.sin(ang) * w
                hit = bvh.first_hit(origin, d)
                if hit is None:
                    hit = bvh.first_hit(origin, -d)
                if hit is None:
                    raise ExtractionError(
                        f"rays from bone {skeleton.names[p]}->{skeleton.names[c]} miss the mesh; "
                        "does the mesh enclose the skeleton?"
                    )
                bary, point = hit.bary, hit.point
                top = int(np.argmax(bary))
                if bary[top] > 1.0 - VERTEX_SNAP:
                    # a hit on a vertex takes that vertex's data exactly
                    bary = np.eye(3)[top]
                    point = mesh.vertices[mesh.faces[hit.face, top]].copy()
                n = bary @ vnormals[mesh.faces[hit.face]]
                if np.linalg.norm(n - (n @ axis) * axis) < 1e-8:
                    n = d
                rows.append((p, c, s, k, hit.face, bary, point, make_frame(axis, n)))
    p, c, s, k, f, bary, pts, frames = zip(*rows)
    face = np.array(f)
    bary = np.array(bary)
    vert_w = skin.matrix[mesh.faces[face]]  # (N, 3, J)
    anchor_w = np.einsum("nk,nkj->nj", bary, vert_w)
    total = anchor_w.sum(1, keepdims=True)
    anchor_w = np.where(np.abs(total - 1.0) > 1e-12, anchor_w / total, anchor_w)
    return AnchorSet(
        bone_parent=np.array(p),
        bone_child=np.array(c),
        sample_index=np.array(s),
        ray_index=np.array(k),
        face=face,
        bary=bary,
        rest_positions=np.array(pts),
        frames=np.array(frames),
        labels=tuple(skeleton.body_parts[j] for j in p),
        skin=SkinWeights(anchor_w),
        samples_per_bone=samples_per_bone,
        rays_per_sample=rays_per_sample,
    )


def orthonormalize_tensors(tangent, normal):
    t = tangent / torch.linalg.norm(tangent, dim=-1, keepdim=True)
    n = normal - (normal * t).sum(-1, keepdim=True) * t
    n = n / torch.linalg.norm(n, dim=-1, keepdim=True)
    b = torch.cross(n, t, dim=-1)
    return torch.stack([t, b, n], dim=-1)


def deform_frames_tensors(frames, weights, rot):
    """Rotate rest frames ``(N, 3, 3)`` by the blended linear part of the
    skinning transform and re-orthonormalize (tangent first, then normal).

    Anchors whose blended matrix is exactly the identity keep their frame
    bit-for-bit.
    """
    eye = torch.eye(3, dtype=rot.dtype)
    a = eye + blended_rotation(weights, rot - eye)
    t = (a @ frames[..., :, 0].unsqueeze(-1)).squeeze(-1)
    n = (a @ frames[..., :, 2].unsqueeze(-1)).squeeze(-1)
    out = orthonormalize_tensors(t, n)
    same = (a == eye).flatten(-2).all(-1)[..., None, None]
    return torch.where(same, frames.expand_as(out), out)


def deform_anchors(anchors, rest, posed, weights=None):
    w = anchors.skin if weights is None else weights
    w = w.matrix if isinstance(w, SkinWeights) else np.asarray(w, dtype=np.float64)
    if w.shape != (anchors.n_anchors, rest.rotations.shape[0]):
        raise StructuralError("anchor weights must be (n_anchors, n_joints)")
    r, t = skinning_transforms(
        as_tensor(rest.rotations), as_tensor(rest.translations),
        as_tensor(posed.rotations), as_tensor(posed.translations),
    )
    wt = as_tensor(w)
    pos = lbs_tensors(as_tensor(anchors.rest_positions), wt, r, t)
    frames = deform_frames_tensors(as_tensor(anchors.frames), wt, r)
    return DeformedAnchors(pos.numpy(), frames.numpy())


def end_effector_sets(anchors, skeleton):
    """``{e: (effector anchor indices, limb anchor indices)}``."""
    return {
        e: (anchors.effector_anchors(skeleton, e), anchors.limb_anchors(skeleton, e))
        for e in END_EFFECTORS
    }


__all__ = [
    "AnchorSet",
    "DeformedAnchors",
    "JointTransforms",
    "deform_anchors",
    "extract_anchors",
]
