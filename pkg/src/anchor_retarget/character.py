"""Skeleton, mesh, skinning and motion representation.

Domain objects hold ``numpy`` arrays (immutable by convention); the numeric
kernels (``fk_tensors``, ``lbs_tensors`` ...) work on ``torch`` tensors so
that the optimizer can differentiate through them. High-level functions
accept and return ``numpy``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import StructuralError, ValidationError
from .rotations import DTYPE, as_tensor, quat_to_matrix, yaw_matrix

END_EFFECTORS = ("lh", "rh", "lf", "rf")
DEFAULT_FPS = 30.0


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint hierarchy in the rest pose.

    ``offsets[0]`` is the rest position of the root; every other row is the
    local offset of the joint relative to its parent. ``parents[0] == -1``.
    """

    names: tuple
    parents: tuple
    offsets: np.ndarray
    end_effectors: dict
    ball_joints: dict
    body_parts: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        self._validate_structure()
        if self.body_parts is None:
            object.__setattr__(self, "body_parts", default_body_parts(self))
        else:
            object.__setattr__(self, "body_parts", tuple(self.body_parts))
        if len(self.body_parts) != self.n_joints:
            raise StructuralError("body_parts needs one label per joint")

    @property
    def n_joints(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise StructuralError(f"unknown joint {name!r}") from None

    def _validate_structure(self):
        n = len(self.names)
        if len(self.parents) != n or self.offsets.shape != (n, 3):
            raise StructuralError("names, parents and offsets must have one entry per joint")
        if len(set(self.names)) != n:
            raise StructuralError("joint names must be unique")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise StructuralError(f"exactly one root at index 0 required, found {roots}")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise StructuralError(f"joint {self.names[j]!r}: parent index {p} must precede it")
        if not np.all(np.isfinite(self.offsets)):
            raise ValidationError("non-finite joint offset")
        for e in END_EFFECTORS:
            if e not in self.end_effectors or e not in self.ball_joints:
                raise StructuralError(f"end-effector {e!r} or its ball joint is missing")
            ej, bj = self.end_effectors[e], self.ball_joints[e]
            if not (0 <= ej < n and 0 <= bj < n):
                raise StructuralError(f"end-effector {e!r} references a missing joint")
            if bj not in self.ancestors(ej):
                raise StructuralError(
                    f"ball joint {self.names[bj]!r} is not an ancestor of {self.names[ej]!r}"
                )

    def ancestors(self, j):
        out = []
        p = self.parents[j]
        while p >= 0:
            out.append(p)
            p = self.parents[p]
        return out

    def descendants(self, j):
        out = {j}
        for c in range(j + 1, self.n_joints):
            if self.parents[c] in out:
                out.add(c)
        return out

    @property
    def rest_global(self):
        g = np.zeros_like(self.offsets)
        g[0] = self.offsets[0]
        for j in range(1, self.n_joints):
            g[j] = g[self.parents[j]] + self.offsets[j]
        return g

    @property
    def bones(self):
        """``(parent, child)`` for every non-root joint, ordered by child."""
        return [(self.parents[c], c) for c in range(1, self.n_joints)]

    def limb_joints(self, e):
        """Joints whose segments make up the limb of end-effector ``e``.

        The chain from the ball joint to ``e`` plus everything below ``e``.
        The ball joint itself is included only when no other end-effector
        hangs below it (a shoulder belongs to its arm, the pelvis does not).
        """
        ej, bj = self.end_effectors[e], self.ball_joints[e]
        chain = [ej] + [a for a in self.ancestors(ej) if a in self.descendants(bj) and a != bj]
        shared = any(
            self.end_effectors[o] in self.descendants(bj) for o in END_EFFECTORS if o != e
        )
        out = set(chain) | self.descendants(ej)
        if not shared:
            out.add(bj)
        return out

    def end_joints(self, e):
        return self.descendants(self.end_effectors[e])


def default_body_parts(skel):
    """Label joints as ``limb_<e>``, ``end_<e>`` or ``trunk``."""
    labels = ["trunk"] * len(skel.names)
    for e in END_EFFECTORS:
        for j in skel.limb_joints(e):
            labels[j] = f"limb_{e}"
        for j in skel.end_joints(e):
            labels[j] = f"end_{e}"
    return tuple(labels)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise StructuralError("mesh needs (N, 3) vertices and (F, 3) faces")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite mesh vertex")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        bad = np.flatnonzero(self.face_areas() <= 1e-12)
        if bad.size:
            raise ValidationError(f"degenerate triangle(s), first is face {bad[0]}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def vertex_normals(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        fn = np.cross(b - a, c - a)  # area weighted
        vn = np.zeros_like(self.vertices)
        for i in range(3):
            np.add.at(vn, self.faces[:, i], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(norm > 0, norm, 1.0)

    @property
    def height(self):
        y = self.vertices[:, 1]
        return float(y.max() - y.min())


@dataclass(frozen=True, eq=False)
class SkinWeights:
    """Dense ``(n_points, n_joints)`` blend weights."""

    matrix: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", w)
        if w.ndim != 2:
            raise StructuralError("skin weights must be a 2-D matrix")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("skin weights must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(w.sum(1) - 1.0) > 1e-6)
        if bad.size:
            raise ValidationError(f"skin weights of point {bad[0]} do not sum to 1")

    @classmethod
    def from_sparse(cls, rows, n_joints):
        w = np.zeros((len(rows), n_joints))
        for i, row in enumerate(rows):
            for j, wt in row:
                if not 0 <= int(j) < n_joints:
                    raise ValidationError(f"point {i}: weight references joint {j}")
                w[i, int(j)] += float(wt)
        return cls(w)

    def to_sparse(self):
        return [[[int(j), float(r[j])] for j in np.flatnonzero(r)] for r in self.matrix]

    def dominant(self):
        return self.matrix.argmax(1)


def rigid_binding(mesh, skeleton):
    """Bind every vertex fully to the joint whose bone segment is nearest.

    Fallback for synthetic characters that ship without weights.
    """
    g = skeleton.rest_global
    v = mesh.vertices
    best = np.full(len(v), np.inf)
    owner = np.zeros(len(v), dtype=int)
    for p, c in skeleton.bones:
        a, b = g[p], g[c]
        ab = b - a
        t = np.clip(((v - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d = np.linalg.norm(v - (a + t[:, None] * ab), axis=1)
        closer = d < best
        best[closer] = d[closer]
        owner[closer] = p
    w = np.zeros((len(v), skeleton.n_joints))
    w[np.arange(len(v)), owner] = 1.0
    return SkinWeights(w)


@dataclass(frozen=True, eq=False)
class Character:
    name: str
    skeleton: Skeleton
    mesh: Mesh
    skin: SkinWeights
    anchors: object = None

    def __post_init__(self):
        if self.skin.matrix.shape != (self.mesh.n_vertices, self.skeleton.n_joints):
            raise StructuralError("skin weights must be (n_vertices, n_joints)")

    @property
    def height(self):
        return self.mesh.height

    def with_anchors(self, anchors):
        return replace(self, anchors=anchors)


@dataclass(frozen=True, eq=False)
class Motion:
    """Sequence of local joint rotations plus world root positions."""

    quats: np.ndarray
    root_pos: np.ndarray
    fps: float = DEFAULT_FPS
    contacts: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.quats, dtype=np.float64)
        r = np.asarray(self.root_pos, dtype=np.float64)
        object.__setattr__(self, "quats", q)
        object.__setattr__(self, "root_pos", r)
        if q.ndim != 3 or q.shape[-1] != 4 or r.shape != (q.shape[0], 3):
            raise StructuralError("motion needs (T, J, 4) rotations and (T, 3) root positions")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
            raise ValidationError("non-finite motion value")
        bad = np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-6
        if bad.any():
            t, j = np.argwhere(bad)[0]
            raise ValidationError(f"frame {t} joint {j}: rotation is not unit length")
        c = self.contacts
        if c is None:
            c = np.zeros(q.shape[:2], dtype=bool)
        c = np.asarray(c, dtype=bool)
        if c.shape != q.shape[:2]:
            raise StructuralError("contacts must be (T, J)")
        object.__setattr__(self, "contacts", c)

    @property
    def n_frames(self):
        return self.quats.shape[0]

    @property
    def dt(self):
        return 1.0 / self.fps


# ---------------------------------------------------------------------------
# tensor kernels


def fk_tensors(parents, offsets, quats, root_pos):
    """World rotations ``(..., J, 3, 3)`` and positions ``(..., J, 3)``."""
    local = quat_to_matrix(quats)
    rots, pos = [local[..., 0, :, :]], [root_pos]
    for j in range(1, len(parents)):
        p = parents[j]
        rots.append(rots[p] @ local[..., j, :, :])
        pos.append(pos[p] + (rots[p] @ offsets[j].unsqueeze(-1)).squeeze(-1))
    return torch.stack(rots, dim=-3), torch.stack(pos, dim=-2)


def skinning_transforms(rest_rot, rest_pos, posed_rot, posed_pos):
    """Per-joint ``posed o rest^-1`` as (rotation, translation)."""
    r = posed_rot @ rest_rot.transpose(-1, -2)
    t = posed_pos - (r @ rest_pos.unsqueeze(-1)).squeeze(-1)
    return r, t


def lbs_tensors(points, weights, rot, trans):
    """Linear blend skinning with precomposed joint transforms.

    ``points`` (N, 3) rest positions, ``weights`` (N, J), ``rot`` (..., J, 3, 3)
    and ``trans`` (..., J, 3). Written as ``x + sum_j w_j ((R_j - I) x + t_j)``
    so the rest pose maps every point onto itself bit-exactly.
    """
    eye = torch.eye(3, dtype=rot.dtype)
    blend_r = torch.einsum("nj,...jab->...nab", weights, rot - eye)
    blend_t = torch.einsum("nj,...ja->...na", weights, trans)
    return points + (blend_r @ points.unsqueeze(-1)).squeeze(-1) + blend_t


def blended_rotation(weights, rot):
    """Weighted sum of the linear parts ``sum_j w_j R_j`` per point."""
    return torch.einsum("nj,...jab->...nab", weights, rot)


def headings(root_rot, eps=1e-8):
    """Facing angle about +y from the root's forward (+z) axis.

    A forward axis with no horizontal component keeps the previous frame's
    heading (0 for the first frame).
    """
    fwd = root_rot[..., :, 2]
    fx, fz = fwd[..., 0], fwd[..., 2]
    flat = torch.sqrt(fx * fx + fz * fz)
    ok = flat > eps
    safe_x = torch.where(ok, fx, torch.zeros_like(fx))
    safe_z = torch.where(ok, fz, torch.ones_like(fz))
    theta = torch.atan2(safe_x, safe_z)
    if not bool(ok.all()):
        fixed = []
        prev = torch.zeros((), dtype=theta.dtype)
        for t in range(theta.shape[0]):
            cur = theta[t] if ok[t] else prev.detach()
            fixed.append(cur)
            prev = cur
        theta = torch.stack(fixed)
    return theta


def facing_positions(world_pos, theta, root_pos):
    """Express ``(T, J, 3)`` world positions in the per-frame facing frame."""
    origin = root_pos * torch.tensor([1.0, 0.0, 1.0], dtype=root_pos.dtype)
    rel = world_pos - origin.unsqueeze(-2)
    r = yaw_matrix(theta)
    return torch.einsum("tba,tjb->tja", r, rel)


def root_movement(theta, root_pos):
    """``(dx, dz, dtheta, h)`` per frame; the first frame has zero motion.

    Displacements are measured in the previous frame's facing frame.
    """
    d = root_pos[1:] - root_pos[:-1]
    c, s = torch.cos(theta[:-1]), torch.sin(theta[:-1])
    dx = c * d[:, 0] - s * d[:, 2]
    dz = s * d[:, 0] + c * d[:, 2]
    dth = theta[1:] - theta[:-1]
    dth = torch.atan2(torch.sin(dth), torch.cos(dth))
    zero = torch.zeros(1, dtype=root_pos.dtype)
    return torch.stack(
        [torch.cat([zero, dx]), torch.cat([zero, dz]), torch.cat([zero, dth]), root_pos[:, 1]],
        dim=-1,
    )


def velocity_tensors(p, dt):
    prev = torch.cat([p[:1], p[:-1]], dim=0)
    return prev, (p - prev) / dt


# ---------------------------------------------------------------------------
# numpy-facing operations


@dataclass(frozen=True, eq=False)
class JointTransforms:
    rotations: np.ndarray
    translations: np.ndarray
    dt: float = 1.0 / DEFAULT_FPS

    @property
    def positions(self):
        return self.translations

    @classmethod
    def rest(cls, skeleton, dt=1.0 / DEFAULT_FPS):
        n = skeleton.n_joints
        return cls(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), skeleton.rest_global, dt)


@dataclass(frozen=True, eq=False)
class MotionFrame:
    q: np.ndarray
    p: np.ndarray
    p_prev: np.ndarray
    p_dot: np.ndarray
    r: np.ndarray
    c: np.ndarray
    root_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _check_rotations(q, n_joints):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n_joints, 4):
        raise StructuralError(f"expected {n_joints} rotations, got shape {q.shape}")
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-6):
        raise ValidationError("rotations must be unit quaternions")
    return q


def forward_kinematics(skeleton, frame, dt=1.0 / DEFAULT_FPS):
    q = _check_rotations(frame.q, skeleton.n_joints)
    rot, pos = fk_tensors(
        skeleton.parents,
        as_tensor(skeleton.offsets),
        as_tensor(q),
        as_tensor(frame.root_pos),
    )
    return JointTransforms(rot.numpy(), pos.numpy(), dt)


def linear_blend_skinning(points, weights, rest_transforms, posed_transforms):
    w = weights.matrix if isinstance(weights, SkinWeights) else np.asarray(weights, float)
    n_joints = rest_transforms.rotations.shape[0]
    if w.ndim != 2 or w.shape[1] != n_joints:
        raise ValidationError(
            f"weights reference {w.shape[-1]} joints but transforms have {n_joints}"
        )
    if np.any(np.abs(w.sum(1) - 1.0) > 1e-6):
        raise ValidationError("per-point weights must sum to 1")
    r, t = skinning_transforms(
        as_tensor(rest_transforms.rotations),
        as_tensor(rest_transforms.translations),
        as_tensor(posed_transforms.rotations),
        as_tensor(posed_transforms.translations),
    )
    return lbs_tensors(as_tensor(points), as_tensor(w), r, t).numpy()


def motion_frames(skeleton, motion):
    """Derive the full per-frame representation (facing positions, root
    movement, velocities) for a motion."""
    if motion.quats.shape[1] != skeleton.n_joints:
        raise StructuralError(
            f"motion has {motion.quats.shape[1]} joints, skeleton has {skeleton.n_joints}"
        )
    root = as_tensor(motion.root_pos)
    rot, pos = fk_tensors(skeleton.parents, as_tensor(skeleton.offsets), as_tensor(motion.quats), root)
    theta = headings(rot[:, 0])
    p = facing_positions(pos, theta, root).numpy()
    r = root_movement(theta, root).numpy()
    frames = [
        MotionFrame(
            q=motion.quats[t],
            p=p[t],
            p_prev=p[t],
            p_dot=np.zeros_like(p[t]),
            r=r[t],
            c=motion.contacts[t],
            root_pos=motion.root_pos[t],
        )
        for t in range(motion.n_frames)
    ]
    return compute_velocities(frames, motion.dt)


def compute_velocities(frames: Sequence[MotionFrame], dt):
    if dt <= 0:
        raise ValidationError("dt must be positive")
    if not frames:
        raise ValidationError("need at least one frame")
    out = []
    prev = frames[0].p
    for f in frames:
        out.append(replace(f, p_prev=prev, p_dot=(f.p - prev) / dt))
        prev = f.p
    return out


def limb_length(skeleton, e):
    """Straightened reach from the ball joint (exclusive) to ``e`` (inclusive)."""
    if e not in skeleton.end_effectors:
        raise ValidationError(f"unknown end-effector {e!r}")
    j, b = skeleton.end_effectors[e], skeleton.ball_joints[e]
    total = 0.0
    while j != b:
        if j < 0:
            raise StructuralError(f"ball joint of {e!r} is not on its chain")
        total += float(np.linalg.norm(skeleton.offsets[j]))
        j = skeleton.parents[j]
    return total
