"""Procedural test characters: a rigidly skinned humanoid built from closed
ellipsoids (meters, y-up, facing +z, T-pose) and a few scripted motions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .anchors import _ray_basis, extract_anchors
from .character import Character, Mesh, Motion, Skeleton, SkinWeights
from .errors import ValidationError

# name, parent, offset, body part
JOINTS = (
    ("pelvis", -1, (0.0, 1.0, 0.0), "torso"),
    ("spine", 0, (0.0, 0.12, 0.0), "torso"),
    ("chest", 1, (0.0, 0.20, 0.0), "torso"),
    ("neck", 2, (0.0, 0.18, 0.0), "head"),
    ("head", 3, (0.0, 0.08, 0.0), "head"),
    ("head_end", 4, (0.0, 0.20, 0.0), "head"),
    ("l_shoulder", 2, (0.18, 0.14, 0.0), "l_arm"),
    ("l_elbow", 6, (0.28, 0.0, 0.0), "l_arm"),
    ("l_wrist", 7, (0.26, 0.0, 0.0), "l_hand"),
    ("l_hand_end", 8, (0.16, 0.0, 0.0), "l_hand"),
    ("r_shoulder", 2, (-0.18, 0.14, 0.0), "r_arm"),
    ("r_elbow", 10, (-0.28, 0.0, 0.0), "r_arm"),
    ("r_wrist", 11, (-0.26, 0.0, 0.0), "r_hand"),
    ("r_hand_end", 12, (-0.16, 0.0, 0.0), "r_hand"),
    ("l_hip", 0, (0.09, -0.07, 0.0), "l_leg"),
    ("l_knee", 14, (0.0, -0.42, 0.0), "l_leg"),
    ("l_ankle", 15, (0.0, -0.41, 0.0), "l_foot"),
    ("l_toe", 16, (0.0, -0.06, 0.15), "l_foot"),
    ("r_hip", 0, (-0.09, -0.07, 0.0), "r_leg"),
    ("r_knee", 18, (0.0, -0.42, 0.0), "r_leg"),
    ("r_ankle", 19, (0.0, -0.41, 0.0), "r_foot"),
    ("r_toe", 20, (0.0, -0.06, 0.15), "r_foot"),
)
END_EFFECTORS = {"lh": 8, "rh": 12, "lf": 16, "rf": 20}
BALL_JOINTS = {"lh": 6, "rh": 10, "lf": 14, "rf": 18}
LIMB_PARTS = ("l_arm", "l_hand", "r_arm", "r_hand", "l_leg", "l_foot", "r_leg", "r_foot")

# bone (parent, child) -> radial half-widths (along the two ray-basis axes)
BONE_RADII = {
    (2, 6): (0.04, 0.04),
    (2, 10): (0.04, 0.04),
    (3, 4): (0.045, 0.045),
    (4, 5): (0.10, 0.10),
    (6, 7): (0.05, 0.05),
    (7, 8): (0.045, 0.045),
    (8, 9): (0.04, 0.04),
    (10, 11): (0.05, 0.05),
    (11, 12): (0.045, 0.045),
    (12, 13): (0.04, 0.04),
    (14, 15): (0.07, 0.07),
    (15, 16): (0.055, 0.055),
    (16, 17): (0.045, 0.045),
    (18, 19): (0.07, 0.07),
    (19, 20): (0.055, 0.055),
    (20, 21): (0.045, 0.045),
}
TORSO = dict(center=(0.0, 1.195, 0.0), radii=(0.17, 0.295, 0.11), joint=0)
HEAD_BONE = (4, 5)


def humanoid_skeleton(head_scale=1.0, scale=1.0):
    names, parents, offsets, parts = zip(*JOINTS)
    offsets = np.array(offsets, dtype=np.float64) * scale
    offsets[5] *= head_scale
    return Skeleton(names, parents, offsets, dict(END_EFFECTORS), dict(BALL_JOINTS), parts)


def ellipsoid(center, axes, radii, n_lat=8, n_lon=12):
    """Closed UV ellipsoid with outward winding. ``axes`` columns are the
    principal directions, scaled by ``radii``."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            th = 2 * np.pi * j / n_lon
            verts.append((np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)))
    verts.append((0.0, 0.0, -1.0))
    unit = np.array(verts)
    faces = []
    last = len(verts) - 1
    for j in range(n_lon):
        faces.append((0, 1 + j, 1 + (j + 1) % n_lon))
        base = 1 + (n_lat - 2) * n_lon
        faces.append((last, base + (j + 1) % n_lon, base + j))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + (j + 1) % n_lon
            faces.append((a, a + n_lon, b))
            faces.append((b, a + n_lon, b + n_lon))
    faces = np.array(faces)
    # unit sphere winding is outward already; the linear map keeps it when det > 0
    m = np.asarray(axes, dtype=np.float64) * np.asarray(radii, dtype=np.float64)
    if np.linalg.det(m) < 0:
        faces = faces[:, ::-1]
    return unit @ m.T + np.asarray(center, dtype=np.float64), faces


@dataclass(frozen=True)
class Primitive:
    center: np.ndarray
    axes: np.ndarray
    radii: tuple
    joint: int


def humanoid_primitives(skeleton, head_scale=1.0, scale=1.0):
    g = skeleton.rest_global
    torso_r = tuple(scale * r for r in TORSO["radii"])
    prims = [Primitive(scale * np.array(TORSO["center"]), np.eye(3), torso_r, TORSO["joint"])]
    for (p, c), radii in BONE_RADII.items():
        ru, rw = scale * radii[0], scale * radii[1]
        seg = g[c] - g[p]
        length = np.linalg.norm(seg)
        axis = seg / length
        u, w = _ray_basis(axis)
        half = 0.45 * length
        if (p, c) == HEAD_BONE:
            # sphere of the given radius sitting on the head joint
            r = ru * head_scale
            centre = g[p] + r * axis
            prims.append(Primitive(centre, np.stack([u, w, axis], 1), (r, r, r), p))
            continue
        prims.append(Primitive(g[p] + 0.5 * seg, np.stack([u, w, axis], 1), (ru, rw, half), p))
    return prims


def humanoid(name="humanoid", head_scale=1.0, samples_per_bone=2, rays_per_sample=6, anchors=True,
             n_lat=8, n_lon=12, scale=1.0, conform=False, head_detail=1):
    """Rigidly skinned humanoid about 1.76 ``scale`` tall; ``head_scale``
    grows the head sphere about the head joint (and the head bone with it).
    ``head_detail`` multiplies the head sphere's tessellation. With
    ``conform`` every anchor is also a mesh vertex."""
    skel = humanoid_skeleton(head_scale, scale)
    verts, faces, owner = [], [], []
    n = 0
    for prim in humanoid_primitives(skel, head_scale, scale):
        fine = head_detail if prim.joint == HEAD_BONE[0] else 1
        v, f = ellipsoid(prim.center, prim.axes, prim.radii, n_lat * fine, n_lon * fine)
        verts.append(v)
        faces.append(f + n)
        owner.append(np.full(len(v), prim.joint))
        n += len(v)
    mesh = Mesh(np.concatenate(verts), np.concatenate(faces))
    owner = np.concatenate(owner)
    w = np.zeros((mesh.n_vertices, skel.n_joints))
    w[np.arange(mesh.n_vertices), owner] = 1.0
    char = Character(name, skel, mesh, SkinWeights(w))
    if anchors:
        char = char.with_anchors(extract_anchors(mesh, skel, char.skin, samples_per_bone, rays_per_sample))
        if conform:
            char = conform_to_anchors(char)
    return char


# ---------------------------------------------------------------------------
# poses and motions


def from_to(a, b):
    """Minimal rotation taking direction ``a`` onto direction ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return Rotation.identity()
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return Rotation.from_rotvec(np.pi * perp / np.linalg.norm(perp))
    return Rotation.from_rotvec(axis / s * np.arctan2(s, c))


def aim_chain(skeleton, local, chain, directions):
    """Set local rotations along ``chain`` (joint, child) so each bone points
    along the given world direction; ``local`` is a list of Rotations."""
    world = _world(skeleton, local)
    for (j, c), d in zip(chain, directions):
        r_world = from_to(skeleton.offsets[c], np.asarray(d, dtype=float))
        p = skeleton.parents[j]
        parent = world[p] if p >= 0 else Rotation.identity()
        local[j] = parent.inv() * r_world
        world = _world(skeleton, local)
    return local


def _world(skeleton, local):
    out = []
    for j, p in enumerate(skeleton.parents):
        out.append(local[j] if p < 0 else out[p] * local[j])
    return out


def _to_quats(local):
    xyzw = np.array([r.as_quat() for r in local])
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def unit(skeleton):
    """Length scale of a humanoid skeleton (1 for the meter-sized default)."""
    return float(skeleton.offsets[0, 1])


def a_pose(skeleton, arm_drop=np.radians(45), leg_spread=np.radians(4)):
    local = [Rotation.identity()] * skeleton.n_joints
    c, s = np.cos(arm_drop), np.sin(arm_drop)
    local = aim_chain(skeleton, local, [(6, 7), (7, 8), (8, 9)], [(c, -s, 0)] * 3)
    local = aim_chain(skeleton, local, [(10, 11), (11, 12), (12, 13)], [(-c, -s, 0)] * 3)
    cs, ss = np.cos(leg_spread), np.sin(leg_spread)
    local = aim_chain(skeleton, local, [(14, 15)], [(ss, -cs, 0)])
    local = aim_chain(skeleton, local, [(18, 19)], [(-ss, -cs, 0)])
    return local


def walk_motion(skeleton, n_frames=30, fps=30.0, speed=0.6, swing=np.radians(15)):
    """Gentle walk: A-pose arms swinging fore-aft, legs swinging, root
    moving along +z. Limbs stay clear of the body."""
    base = a_pose(skeleton)
    quats, roots = [], []
    for t in range(n_frames):
        ph = 2 * np.pi * t / n_frames
        local = list(base)
        a = swing * np.sin(ph)
        for j, sgn in ((6, 1), (10, -1), (14, -1), (18, 1)):
            local[j] = Rotation.from_rotvec([sgn * a, 0.0, 0.0]) * base[j]
        local[15] = Rotation.from_rotvec([max(0.0, np.sin(ph)) * swing, 0, 0])
        local[19] = Rotation.from_rotvec([max(0.0, -np.sin(ph)) * swing, 0, 0])
        quats.append(_to_quats(local))
        roots.append(skeleton.offsets[0] + unit(skeleton) * np.array([0.0, 0.01 * np.cos(2 * ph), speed * t / fps]))
    return Motion(np.array(quats), np.array(roots), fps)


HAND_GAP = 0.005


def head_sphere(skeleton):
    """Centre and radius of the head sphere in the rest pose."""
    g = skeleton.rest_global
    r = 0.5 * np.linalg.norm(skeleton.offsets[HEAD_BONE[1]])
    axis = (g[HEAD_BONE[1]] - g[HEAD_BONE[0]]) / (2 * r)
    return g[HEAD_BONE[0]] + r * axis, r


def two_bone_elbow(shoulder, wrist, upper, fore, pole):
    """Elbow position for a two-bone chain bent toward ``pole``."""
    v = wrist - shoulder
    dist = np.linalg.norm(v)
    if dist > upper + fore or dist < abs(upper - fore):
        raise ValidationError(f"wrist at {dist:.3f} is out of reach for bones {upper:.3f}/{fore:.3f}")
    u = v / dist
    a = (upper**2 - fore**2 + dist**2) / (2 * dist)
    p = pole - (pole @ u) * u
    return shoulder + a * u + np.sqrt(max(upper**2 - a**2, 0.0)) * p / np.linalg.norm(p)


def touch_pose(skeleton, elevation=np.radians(60), hand_radius=0.04, gap=HAND_GAP):
    """A-pose with the left hand lying against the head sphere, its centre
    above the contact point at ``elevation`` (radians above the horizontal,
    on the arm's side) and its long axis along the meridian."""
    centre, r = head_sphere(skeleton)
    hand_radius, gap = unit(skeleton) * hand_radius, unit(skeleton) * gap
    g = skeleton.rest_global
    upper, fore, hand = (np.linalg.norm(skeleton.offsets[j]) for j in (7, 8, 9))
    n = np.array([np.cos(elevation), np.sin(elevation), 0.0])
    d = np.array([-np.sin(elevation), np.cos(elevation), 0.0])
    wrist = centre + (r + hand_radius + gap) * n - 0.5 * hand * d
    elbow = two_bone_elbow(g[6], wrist, upper, fore, np.array([1.0, -1.0, 0.0]))
    local = a_pose(skeleton)
    return aim_chain(skeleton, local, [(6, 7), (7, 8), (8, 9)], [elbow - g[6], wrist - elbow, d])


def hand_to_head_motion(skeleton, n_frames=20, fps=30.0, reach_frames=None, elevation=np.radians(60)):
    """Left hand travels from the A-pose onto the head and stays there."""
    start, touch = a_pose(skeleton), touch_pose(skeleton, elevation)
    reach_frames = max(1, n_frames // 4) if reach_frames is None else reach_frames
    quats = []
    for t in range(n_frames):
        a = min(1.0, t / reach_frames)
        local = []
        for r0, r1 in zip(start, touch):
            key = Rotation.concatenate([r0, r1])
            local.append(Slerp([0.0, 1.0], key)([a])[0])
        quats.append(_to_quats(local))
    roots = np.repeat(skeleton.offsets[:1], n_frames, axis=0)
    contacts = np.zeros((n_frames, skeleton.n_joints), dtype=bool)
    contacts[reach_frames:, 8] = True
    return Motion(np.array(quats), roots, fps, contacts)


def rest_motion(skeleton, n_frames=1, fps=30.0):
    q = np.zeros((n_frames, skeleton.n_joints, 4))
    q[..., 0] = 1.0
    return Motion(q, np.repeat(skeleton.offsets[:1], n_frames, axis=0), fps)


# ---------------------------------------------------------------------------
# anchor-conforming meshes


def insert_points(mesh, skin, points, tol=1e-6):
    """Insert surface points as mesh vertices without changing the surface.

    A point inside a triangle splits it 1-to-3; a point on an edge splits
    the two triangles sharing it 2-to-4; a point on a vertex is left alone.
    Returns the new mesh and skin weights.
    """
    verts = [np.asarray(v, dtype=np.float64) for v in mesh.vertices]
    weights = [w for w in skin.matrix]
    faces = [tuple(int(i) for i in f) for f in mesh.faces]
    for point in np.asarray(points, dtype=np.float64):
        tri = np.array([[verts[k] for k in f] for f in faces])
        b = _bary_many(point, tri)
        off = np.abs(np.einsum("fk,fki->fi", b, tri) - point).max(1)
        ok = (b.min(1) >= -tol) & (off < tol * max(1.0, np.abs(point).max()))
        if not ok.any():
            raise ValidationError("point does not lie on the mesh surface")
        fi = int(np.flatnonzero(ok)[np.argmax(b[ok].min(1))])
        local = np.clip(b[fi], 0.0, None)
        small = local < tol
        if small.sum() >= 2:
            continue  # already a vertex
        f = faces[fi]
        k = len(verts)
        if not small.any():
            weights.append(local @ np.array([weights[i] for i in f]))
            verts.append(local @ np.array([verts[i] for i in f]))
            a, c, d = f
            faces[fi:fi + 1] = [(a, c, k), (c, d, k), (d, a, k)]
            continue
        # on the edge opposite the small coordinate
        m = int(np.flatnonzero(small)[0])
        a, c = f[(m + 1) % 3], f[(m + 2) % 3]
        s_ac = local[(m + 1) % 3] / (local[(m + 1) % 3] + local[(m + 2) % 3])
        verts.append(s_ac * verts[a] + (1.0 - s_ac) * verts[c])
        weights.append(s_ac * weights[a] + (1.0 - s_ac) * weights[c])
        out = []
        for g in faces:
            for r in range(3):
                if (g[r], g[(r + 1) % 3]) in ((a, c), (c, a)):
                    x, y, z = g[r], g[(r + 1) % 3], g[(r + 2) % 3]
                    out += [(x, k, z), (k, y, z)]
                    break
            else:
                out.append(g)
        faces = out
    return Mesh(np.array(verts), np.array(faces)), SkinWeights(np.array(weights))


def _bary_many(p, tri):
    a = tri[:, 0]
    v0, v1, v2 = tri[:, 1] - a, tri[:, 2] - a, p - a
    d00 = (v0 * v0).sum(1)
    d01 = (v0 * v1).sum(1)
    d11 = (v1 * v1).sum(1)
    d20 = (v2 * v0).sum(1)
    d21 = (v2 * v1).sum(1)
    den = d00 * d11 - d01 * d01
    den = np.where(np.abs(den) < 1e-300, np.inf, den)
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - v - w, v, w], 1)


def conform_to_anchors(character):
    """Re-mesh so every anchor is a vertex, then re-extract the anchors."""
    anc = character.anchors
    mesh, skin = insert_points(character.mesh, character.skin, anc.rest_positions)
    out = Character(character.name, character.skeleton, mesh, skin)
    return out.with_anchors(extract_anchors(mesh, out.skeleton, skin, anc.samples_per_bone, anc.rays_per_sample))
