"""Penetration and contact metrics on deformed characters."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .character import fk_tensors, lbs_tensors, skinning_transforms
from .errors import StructuralError, ValidationError
from .rotations import as_tensor

LIMB_KEYWORDS = ("arm", "hand", "leg", "foot", "limb_", "end_")
DEFAULT_CONTACT_FRACTION = 0.01
_RAY = np.array([0.5773502691896258, 0.5773502691896258, 0.5773502691896258]) + np.array([0.0123, -0.0071, 0.0029])
_RAY /= np.linalg.norm(_RAY)
_GRAZE = 1e-9


def is_limb_part(label):
    return any(k in label for k in LIMB_KEYWORDS)


# ---------------------------------------------------------------------------
# point in mesh


def edge_use_counts(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def check_watertight(faces):
    faces = np.asarray(faces)
    if len(faces) == 0 or np.any(edge_use_counts(faces) != 2):
        raise ValidationError("mesh is not watertight (some edge is not shared by exactly two faces)")


def _parity(points, tri, direction):
    """Crossing parity along ``direction`` plus a flag for grazing rays."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    pvec = np.cross(direction, e2)
    det = np.einsum("fi,fi->f", e1, pvec)
    flat = np.abs(det) < 1e-14
    inv = 1.0 / np.where(flat, 1.0, det)
    tvec = points[:, None, :] - a[None]
    u = np.einsum("pfi,fi->pf", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = (qvec @ direction) * inv
    t = np.einsum("fi,pfi->pf", e2, qvec) * inv
    w = 1.0 - u - v
    inside_tri = (u >= 0) & (v >= 0) & (w >= 0) & ~flat
    hits = inside_tri & (t > 0)
    edge = np.minimum(np.minimum(np.abs(u), np.abs(v)), np.abs(w)) < _GRAZE
    near = edge & (u > -_GRAZE) & (v > -_GRAZE) & (w > -_GRAZE)
    graze = ((near & (t > 0)) | (inside_tri & (np.abs(t) < _GRAZE))).any(1)
    return hits.sum(1) % 2 == 1, graze


def points_in_mesh(points, vertices, faces, check=True, max_retries=8):
    """Ray-parity inside test for many points against one closed mesh.

    Rays that graze an edge or vertex are re-cast along a jittered direction.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if check:
        check_watertight(faces)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = np.asarray(vertices, dtype=np.float64)[faces]
    out = np.zeros(len(points), dtype=bool)
    rng = np.random.default_rng(0)
    chunk = max(1, 400_000 // max(len(faces), 1))
    for s in range(0, len(points), chunk):
        pts = points[s:s + chunk]
        inside, graze = _parity(pts, tri, _RAY)
        d = _RAY
        for _ in range(max_retries):
            if not graze.any():
                break
            d = d + 0.05 * rng.standard_normal(3)
            d /= np.linalg.norm(d)
            redo = np.flatnonzero(graze)
            inside[redo], graze[redo] = _parity(pts[redo], tri, d)
        out[s:s + chunk] = inside
    return out


def point_in_mesh(point, mesh):
    """True iff ``point`` lies inside the closed ``mesh``."""
    return bool(points_in_mesh(np.asarray(point)[None], mesh.vertices, mesh.faces)[0])


# ---------------------------------------------------------------------------
# body-part sub-meshes


def boundary_loops(faces):
    """Closed boundary loops (vertex lists) of an open triangle set."""
    directed = {}
    for f in faces:
        for i in range(3):
            directed[(int(f[i]), int(f[(i + 1) % 3]))] = True
    nxt = {}
    for a, b in directed:
        if (b, a) not in directed:
            # boundary edge a->b, walk opposite to the face winding for a cap with matching orientation
            nxt[b] = a
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, v = [], start
        while v not in seen:
            seen.add(v)
            loop.append(v)
            v = nxt.get(v)
            if v is None:
                raise ValidationError("non-manifold sub-mesh boundary")
        loops.append(loop)
    return loops


def cap_boundaries(faces):
    """Close open boundary loops with triangle fans (no new vertices)."""
    extra = []
    for loop in boundary_loops(faces):
        for i in range(1, len(loop) - 1):
            extra.append((loop[0], loop[i], loop[i + 1]))
    if not extra:
        return faces
    return np.concatenate([faces, np.array(extra, dtype=np.int64)])


def connected_components(faces, n_vertices):
    parent = np.arange(n_vertices)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for f in faces:
        ra = find(f[0])
        for v in f[1:]:
            rb = find(v)
            if ra != rb:
                parent[rb] = ra
    roots = np.array([find(f[0]) for f in faces])
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


@dataclass(frozen=True, eq=False)
class PartMeshes:
    """Closed pieces per body part. ``components[part]`` is a list of
    ``(vertex_ids, local_faces)`` pairs into the character's vertex array."""

    parts: tuple
    vertex_part: np.ndarray  # index into parts per vertex
    components: dict

    def vertices_of(self, part):
        return np.flatnonzero(self.vertex_part == self.parts.index(part))


def part_weights(character):
    parts = tuple(dict.fromkeys(character.skeleton.body_parts))
    onehot = np.zeros((character.skeleton.n_joints, len(parts)))
    for j, label in enumerate(character.skeleton.body_parts):
        onehot[j, parts.index(label)] = 1.0
    return parts, character.skin.matrix @ onehot


def part_meshes(character):
    """Split the mesh by dominant body part: vertices by their largest
    part weight, faces by the largest summed weight of their corners.
    Open boundaries are capped and each connected piece kept separately."""
    parts, pw = part_weights(character)
    vertex_part = pw.argmax(1)
    faces = character.mesh.faces
    face_part = pw[faces].sum(1).argmax(1)
    comps = {}
    for k, part in enumerate(parts):
        sel = faces[face_part == k]
        if len(sel) == 0:
            comps[part] = []
            continue
        pieces = []
        for idx in connected_components(sel, character.mesh.n_vertices):
            sub = cap_boundaries(sel[idx])
            ids, local = np.unique(sub, return_inverse=True)
            local = local.reshape(-1, 3)
            check_watertight(local)
            pieces.append((ids, local))
        comps[part] = pieces
    return PartMeshes(parts, vertex_part, comps)


def _inside_part(points, verts, pieces):
    """Points inside any piece, with an axis-aligned box prefilter."""
    inside = np.zeros(len(points), dtype=bool)
    for ids, local in pieces:
        v = verts[ids]
        lo, hi = v.min(0), v.max(0)
        cand = np.flatnonzero(np.all((points >= lo) & (points <= hi), axis=1) & ~inside)
        if len(cand):
            inside[cand] = points_in_mesh(points[cand], v, local, check=False)
    return inside


# ---------------------------------------------------------------------------
# deformation


def deformed_vertices(character, motion):
    """``(T, N_V, 3)`` skinned vertex positions for a motion."""
    sk = character.skeleton
    if motion.quats.shape[1] != sk.n_joints:
        raise StructuralError("motion and character joint counts differ")
    rot, pos = fk_tensors(sk.parents, as_tensor(sk.offsets), as_tensor(motion.quats), as_tensor(motion.root_pos))
    eye = torch.eye(3, dtype=rot.dtype).expand(sk.n_joints, 3, 3)
    r, t = skinning_transforms(eye, as_tensor(sk.rest_global), rot, pos)
    return lbs_tensors(as_tensor(character.mesh.vertices), as_tensor(character.skin.matrix), r, t).numpy()


def _frames(character, motion_or_vertices):
    if isinstance(motion_or_vertices, np.ndarray):
        v = motion_or_vertices
        return v[None] if v.ndim == 2 else v
    return deformed_vertices(character, motion_or_vertices)


# ---------------------------------------------------------------------------
# metrics


def penetration_counts(character, motion_or_vertices, parts=None, limb=is_limb_part):
    """Per frame, the number of limb vertices inside some other part, and
    the number of limb vertices."""
    pm = parts or part_meshes(character)
    frames = _frames(character, motion_or_vertices)
    limb_parts = [p for p in pm.parts if limb(p)]
    n_limb = sum(len(pm.vertices_of(p)) for p in limb_parts)
    counts = np.zeros(len(frames), dtype=np.int64)
    for t, verts in enumerate(frames):
        for part in limb_parts:
            ids = pm.vertices_of(part)
            hit = np.zeros(len(ids), dtype=bool)
            for other in pm.parts:
                if other != part and pm.components[other]:
                    hit |= _inside_part(verts[ids], verts, pm.components[other])
            counts[t] += int(hit.sum())
    return counts, n_limb


def penetration_rate(character, motion_or_vertices, parts=None, limb=is_limb_part):
    """Percentage of limb vertices inside other body parts, over all frames."""
    counts, n_limb = penetration_counts(character, motion_or_vertices, parts, limb)
    if n_limb == 0:
        raise ValidationError("character has no limb vertices")
    return 100.0 * counts.sum() / (n_limb * len(counts))


@dataclass(frozen=True)
class ContactEvent:
    frame: int
    pair: tuple
    present: bool

    def __post_init__(self):
        a, b = self.pair
        if a == b:
            raise ValidationError("contact pair labels must differ")
        object.__setattr__(self, "pair", tuple(sorted((a, b))))


def default_contact_threshold(character):
    return DEFAULT_CONTACT_FRACTION * character.height


def detect_contacts(character, motion_or_vertices, delta_c=None, parts=None):
    """One event per frame and unordered part pair: present iff the parts
    come closer than ``delta_c`` without either entering the other."""
    delta_c = default_contact_threshold(character) if delta_c is None else delta_c
    if not delta_c > 0:
        raise ValidationError("contact threshold must be positive")
    pm = parts or part_meshes(character)
    frames = _frames(character, motion_or_vertices)
    pairs = list(itertools.combinations(sorted(pm.parts), 2))
    events = []
    for t, verts in enumerate(frames):
        trees = {p: cKDTree(verts[pm.vertices_of(p)]) for p in pm.parts if len(pm.vertices_of(p))}
        for a, b in pairs:
            present = False
            if a in trees and b in trees:
                d, _ = trees[b].query(verts[pm.vertices_of(a)], k=1, distance_upper_bound=delta_c)
                if np.any(d < delta_c):
                    present = not (
                        _inside_part(verts[pm.vertices_of(a)], verts, pm.components[b]).any()
                        or _inside_part(verts[pm.vertices_of(b)], verts, pm.components[a]).any()
                    )
            events.append(ContactEvent(t, (a, b), present))
    return events


def event_grid(events):
    """``(frames, pairs, bool grid)`` from a list of events."""
    frames = sorted({e.frame for e in events})
    pairs = sorted({e.pair for e in events})
    grid = np.zeros((len(frames), len(pairs)), dtype=bool)
    fi = {f: i for i, f in enumerate(frames)}
    pi = {p: i for i, p in enumerate(pairs)}
    for e in events:
        grid[fi[e.frame], pi[e.pair]] = e.present
    return frames, pairs, grid


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fn: int
    fp: int
    tn: int
    pen_rate: Optional[float] = None
    delta_c: Optional[float] = None

    def _ratio(self, num, den):
        return None if den == 0 else num / den

    @property
    def precision(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)

    def fractions(self):
        def f(num, den):
            return None if den == 0 else Fraction(num, den)

        return (
            f(self.tp, self.tp + self.fp),
            f(self.tp, self.tp + self.fn),
            f(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn),
        )

    def to_dict(self):
        out = asdict(self)
        out.update(precision=self.precision, recall=self.recall, accuracy=self.accuracy)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion_counts(source, target):
    source, target = np.asarray(source, dtype=bool), np.asarray(target, dtype=bool)
    if source.shape != target.shape:
        raise ValidationError(f"event grids differ in shape: {source.shape} vs {target.shape}")
    return (
        int((source & target).sum()),
        int((source & ~target).sum()),
        int((~source & target).sum()),
        int((~source & ~target).sum()),
    )


def contact_preservation(source_events, target_events, pen_rate=None, delta_c=None):
    """Per (frame, pair) confusion matrix between source and target events.

    Accepts event lists or boolean ``(frames, pairs)`` grids.
    """
    if isinstance(source_events, np.ndarray) or isinstance(target_events, np.ndarray):
        tp, fn, fp, tn = confusion_counts(source_events, target_events)
        return MetricsReport(tp, fn, fp, tn, pen_rate, delta_c)
    fs, ps, gs = event_grid(source_events)
    ft, pt, gt = event_grid(target_events)
    if len(fs) != len(ft):
        raise ValidationError(f"frame counts differ: {len(fs)} vs {len(ft)}")
    if ps != pt:
        # align on the union of pairs; absent cells are non-contacts
        pairs = sorted(set(ps) | set(pt))
        gs = _expand(gs, ps, pairs)
        gt = _expand(gt, pt, pairs)
    tp, fn, fp, tn = confusion_counts(gs, gt)
    return MetricsReport(tp, fn, fp, tn, pen_rate, delta_c)


def _expand(grid, pairs, union):
    out = np.zeros((grid.shape[0], len(union)), dtype=bool)
    for k, p in enumerate(pairs):
        out[:, union.index(p)] = grid[:, k]
    return out


def write_events_csv(events, path, columns=("frame", "part_a", "part_b", "present")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for e in sorted(events, key=lambda e: (e.frame, e.pair)):
            w.writerow([e.frame, e.pair[0], e.pair[1], int(e.present)])


def part_contacts(events, a, b):
    """Per-frame presence of the contact between parts ``a`` and ``b``."""
    pair = tuple(sorted((a, b)))
    frames = sorted({e.frame for e in events})
    present = {e.frame: e.present for e in events if e.pair == pair}
    return np.array([present.get(f, False) for f in frames])
