"""JSON, BVH and OBJ files plus run configuration.

JSON documents are written canonically (sorted keys, no whitespace,
shortest round-tripping float repr) so save -> load -> save is byte-stable.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .anchors import AnchorSet
from .character import (
    END_EFFECTORS,
    Character,
    Mesh,
    Motion,
    Skeleton,
    SkinWeights,
    fk_tensors,
    lbs_tensors,
    skinning_transforms,
)
from .errors import ConfigurationError, StructuralError, ValidationError
from .objectives import LossWeights
from .optimizer import OptimConfig
from .rotations import as_tensor, sixd_to_quat


class SchemaError(ValidationError):
    """A document does not match its JSON schema."""


class ParseError(ValidationError):
    """A text file could not be tokenized or parsed."""


# ---------------------------------------------------------------------------
# JSON plumbing


def dumps(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False) + "\n"


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such file") from None
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not UTF-8 ({exc.reason})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _schema(name):
    text = resources.files(__package__).joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc, kind):
    """Raise :class:`SchemaError` naming the JSON path of the first problem."""
    validator = jsonschema.Draft202012Validator(_schema(kind))
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise SchemaError(f"{kind} schema violation at {err.json_path}: {err.message}")


def _floats(a):
    return np.asarray(a, dtype=np.float64).tolist()


# ---------------------------------------------------------------------------
# characters


def character_to_dict(character):
    sk = character.skeleton
    doc = {
        "name": character.name,
        "skeleton": [
            {
                "name": sk.names[j],
                "parent": None if sk.parents[j] < 0 else sk.names[sk.parents[j]],
                "offset": _floats(sk.offsets[j]),
                "part": sk.body_parts[j],
            }
            for j in range(sk.n_joints)
        ],
        "end_effectors": {
            e: {"joint": sk.names[sk.end_effectors[e]], "ball": sk.names[sk.ball_joints[e]]} for e in END_EFFECTORS
        },
        "mesh": {"vertices": _floats(character.mesh.vertices), "faces": character.mesh.faces.tolist()},
        "skin_weights": character.skin.to_sparse(),
    }
    if character.anchors is not None:
        doc["anchors"] = anchors_to_dict(character.anchors, sk)
    return doc


def anchors_to_dict(anchors, skeleton):
    items = []
    for i in range(anchors.n_anchors):
        items.append({
            "bone": [skeleton.names[anchors.bone_parent[i]], skeleton.names[anchors.bone_child[i]]],
            "sample": int(anchors.sample_index[i]),
            "ray": int(anchors.ray_index[i]),
            "face": int(anchors.face[i]),
            "bary": _floats(anchors.bary[i]),
            "position": _floats(anchors.rest_positions[i]),
            "frame": _floats(anchors.frames[i]),
            "label": anchors.labels[i],
            "skin": [[int(j), float(anchors.skin.matrix[i, j])] for j in np.flatnonzero(anchors.skin.matrix[i])],
        })
    return {"samples_per_bone": anchors.samples_per_bone, "rays_per_sample": anchors.rays_per_sample, "items": items}


def _joint(skeleton, name, where):
    try:
        return skeleton.index(name)
    except StructuralError:
        raise StructuralError(f"{where}: unknown joint {name!r}") from None


def anchors_from_dict(doc, skeleton, mesh):
    items = doc["items"]
    if not items:
        raise ValidationError("anchors.items is empty")
    parent = np.array([_joint(skeleton, it["bone"][0], f"anchors.items[{i}].bone") for i, it in enumerate(items)])
    child = np.array([_joint(skeleton, it["bone"][1], f"anchors.items[{i}].bone") for i, it in enumerate(items)])
    for i, (p, c) in enumerate(zip(parent, child)):
        if skeleton.parents[c] != p:
            raise StructuralError(f"anchors.items[{i}].bone is not a bone of the skeleton")
    face = np.array([it["face"] for it in items])
    if face.max() >= len(mesh.faces):
        raise ValidationError("anchors reference a face index beyond the mesh")
    bary = np.array([it["bary"] for it in items], dtype=np.float64)
    if np.any(bary < -1e-9) or np.any(np.abs(bary.sum(1) - 1.0) > 1e-9):
        raise ValidationError("anchor barycentric coordinates must be nonnegative and sum to 1")
    frames = np.array([it["frame"] for it in items], dtype=np.float64)
    gram = np.einsum("nki,nkj->nij", frames, frames)
    if np.abs(gram - np.eye(3)).max() > 1e-9 or np.any(np.linalg.det(frames) < 0):
        raise ValidationError("anchor frames must be right-handed orthonormal")
    skin = SkinWeights.from_sparse([it["skin"] for it in items], skeleton.n_joints)
    return AnchorSet(
        bone_parent=parent,
        bone_child=child,
        sample_index=np.array([it["sample"] for it in items]),
        ray_index=np.array([it["ray"] for it in items]),
        face=face,
        bary=bary,
        rest_positions=np.array([it["position"] for it in items], dtype=np.float64),
        frames=frames,
        labels=tuple(it["label"] for it in items),
        skin=skin,
        samples_per_bone=int(doc["samples_per_bone"]),
        rays_per_sample=int(doc["rays_per_sample"]),
    )


def character_from_dict(doc):
    validate_document(doc, "character")
    joints = doc["skeleton"]
    names = [j["name"] for j in joints]
    index = {n: k for k, n in enumerate(names)}
    if len(index) != len(names):
        raise StructuralError("skeleton: joint names must be unique")
    parents = []
    for k, j in enumerate(joints):
        if j["parent"] is None:
            parents.append(-1)
        elif j["parent"] in index:
            parents.append(index[j["parent"]])
        else:
            raise StructuralError(f"skeleton[{k}].parent: unknown joint {j['parent']!r}")
    ends, balls = {}, {}
    for e, spec in doc["end_effectors"].items():
        for key, out in (("joint", ends), ("ball", balls)):
            if spec[key] not in index:
                raise StructuralError(f"end_effectors.{e}.{key}: unknown joint {spec[key]!r}")
            out[e] = index[spec[key]]
    parts = [j.get("part") for j in joints]
    skeleton = Skeleton(names, parents, [j["offset"] for j in joints], ends, balls,
                        None if any(p is None for p in parts) else parts)
    mesh = Mesh(np.array(doc["mesh"]["vertices"], dtype=np.float64).reshape(-1, 3),
                np.array(doc["mesh"]["faces"], dtype=np.int64).reshape(-1, 3))
    if len(doc["skin_weights"]) != mesh.n_vertices:
        raise StructuralError("skin_weights needs one row per mesh vertex")
    skin = SkinWeights.from_sparse(doc["skin_weights"], skeleton.n_joints)
    character = Character(doc.get("name", "character"), skeleton, mesh, skin)
    if "anchors" in doc:
        character = character.with_anchors(anchors_from_dict(doc["anchors"], skeleton, mesh))
    return character


def load_character(path):
    return character_from_dict(_read_json(path))


def save_character(character, path):
    Path(path).write_text(dumps(character_to_dict(character)), encoding="utf-8")


# ---------------------------------------------------------------------------
# motions


def motion_to_dict(motion, skeleton=None):
    frames = []
    for t in range(motion.n_frames):
        frame = {"rotations": _floats(motion.quats[t]), "root": {"pos": _floats(motion.root_pos[t])}}
        if motion.contacts.any():
            frame["contacts"] = [bool(c) for c in motion.contacts[t]]
        frames.append(frame)
    doc = {"fps": float(motion.fps), "frames": frames}
    if skeleton is not None:
        doc["joints"] = list(skeleton.names)
    return doc


def motion_from_dict(doc, skeleton):
    validate_document(doc, "motion")
    n = skeleton.n_joints
    if "joints" in doc and list(doc["joints"]) != list(skeleton.names):
        raise StructuralError("motion joint names do not match the skeleton")
    quats, roots, contacts = [], [], []
    for t, frame in enumerate(doc["frames"]):
        rot = frame["rotations"]
        if len(rot) != n:
            raise StructuralError(f"frames[{t}].rotations: {len(rot)} joints, skeleton has {n}")
        widths = {len(r) for r in rot}
        if len(widths) != 1:
            raise ValidationError(f"frames[{t}].rotations mixes quaternion and 6D entries")
        arr = np.array(rot, dtype=np.float64)
        if arr.shape[1] == 6:
            arr = sixd_to_quat(torch.from_numpy(arr)).numpy()
        quats.append(arr)
        roots.append(frame["root"]["pos"])
        c = frame.get("contacts", [False] * n)
        if len(c) != n:
            raise StructuralError(f"frames[{t}].contacts: expected {n} entries")
        contacts.append(c)
    return Motion(np.array(quats), np.array(roots, dtype=np.float64), float(doc["fps"]), np.array(contacts, dtype=bool))


def load_motion(path, skeleton):
    return motion_from_dict(_read_json(path), skeleton)


def save_motion(motion, path, skeleton=None):
    Path(path).write_text(dumps(motion_to_dict(motion, skeleton)), encoding="utf-8")


# ---------------------------------------------------------------------------
# BVH

_AXES = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
_POS = ("Xposition", "Yposition", "Zposition")


def _tokens(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            yield lineno, tok


class _Stream:
    def __init__(self, text, path):
        self.toks = list(_tokens(text))
        self.i = 0
        self.path = path

    def peek(self):
        return self.toks[self.i][1] if self.i < len(self.toks) else None

    def next(self, expect=None):
        if self.i >= len(self.toks):
            raise ParseError(f"{self.path}: unexpected end of file")
        line, tok = self.toks[self.i]
        self.i += 1
        if expect is not None and tok != expect:
            raise ParseError(f"{self.path}:{line}: expected {expect!r}, found {tok!r}")
        return tok

    def number(self, kind=float):
        line = self.toks[self.i][0] if self.i < len(self.toks) else "EOF"
        tok = self.next()
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"{self.path}:{line}: expected a number, found {tok!r}") from None

    def line(self):
        return self.toks[self.i][0] if self.i < len(self.toks) else "EOF"


def _parse_joint(s, parent, joints):
    name = s.next()
    s.next("{")
    s.next("OFFSET")
    offset = [s.number() for _ in range(3)]
    s.next("CHANNELS")
    line = s.line()
    count = s.number(int)
    channels = [s.next() for _ in range(count)]
    rot = [c for c in channels if c in _AXES]
    pos = [c for c in channels if c in _POS]
    bad = [c for c in channels if c not in _AXES and c not in _POS]
    if bad or len(rot) != 3 or len(set(rot)) != 3:
        raise ParseError(f"{s.path}:{line}: unsupported channel order {' '.join(channels)!r} for {name!r}")
    if pos and parent >= 0:
        raise ParseError(f"{s.path}:{line}: position channels are only supported on the root ({name!r})")
    me = len(joints)
    joints.append(dict(name=name, parent=parent, offset=offset, channels=channels))
    while True:
        tok = s.next()
        if tok == "}":
            return
        if tok == "JOINT":
            _parse_joint(s, me, joints)
        elif tok == "End":
            s.next("Site")
            s.next("{")
            s.next("OFFSET")
            end = [s.number() for _ in range(3)]
            s.next("}")
            if any(end):
                joints.append(dict(name=f"{name}_end", parent=me, offset=end, channels=[]))
        else:
            raise ParseError(f"{s.path}:{s.toks[s.i - 1][0]}: unexpected token {tok!r}")


def _side(name):
    n = name.lower()
    if "left" in n or re.match(r"^l[_.\s]", n) or re.search(r"[_.]l$", n):
        return "l"
    if "right" in n or re.match(r"^r[_.\s]", n) or re.search(r"[_.]r$", n):
        return "r"
    return None


def guess_end_effectors(names, parents):
    """Wrists and ankles by name; ball joints by topology (the first joint
    below the branching joint on the way to the root)."""
    depth = [0] * len(names)
    for j in range(1, len(names)):
        depth[j] = depth[parents[j]] + 1
    children = [0] * len(names)
    for p in parents[1:]:
        children[p] += 1
    kinds = {"h": ("wrist", "hand"), "f": ("ankle", "foot")}
    skip = ("end", "finger", "thumb", "index", "middle", "ring", "pinky", "toe")
    ends, balls = {}, {}
    for e in END_EFFECTORS:
        cands = [
            j for j, nm in enumerate(names)
            if _side(nm) == e[0] and any(k in nm.lower() for k in kinds[e[1]])
            and not any(x in nm.lower() for x in skip)
        ]
        if not cands:
            raise StructuralError(f"cannot identify end-effector {e!r} from joint names; pass it explicitly")
        j = min(cands, key=lambda c: depth[c])
        b = j
        while parents[b] >= 0 and children[parents[b]] < 2:
            b = parents[b]
        if parents[b] < 0 or b == j:
            raise StructuralError(f"cannot find the ball joint of {e!r}")
        ends[e], balls[e] = j, b
    return ends, balls


def import_bvh(path, end_effectors=None):
    """``(Skeleton, Motion)`` from a BVH file. ``end_effectors`` maps each of
    lh/rh/lf/rf to ``(joint name, ball joint name)``; by default they are
    guessed from the joint names."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such file") from None
    s = _Stream(text, path)
    s.next("HIERARCHY")
    s.next("ROOT")
    joints = []
    _parse_joint(s, -1, joints)
    s.next("MOTION")
    s.next("Frames:")
    n_frames = s.number(int)
    s.next("Frame")
    s.next("Time:")
    frame_time = s.number()
    if n_frames < 1 or not frame_time > 0:
        raise ParseError(f"{path}: need at least one frame and a positive frame time")
    width = sum(len(j["channels"]) for j in joints)
    data = np.array([s.number() for _ in range(n_frames * width)]).reshape(n_frames, width)
    if s.peek() is not None:
        raise ParseError(f"{path}:{s.line()}: trailing data after {n_frames} frames")

    names = [j["name"] for j in joints]
    parents = [j["parent"] for j in joints]
    offsets = np.array([j["offset"] for j in joints], dtype=np.float64)
    if end_effectors is None:
        ends, balls = guess_end_effectors(names, parents)
    else:
        ends = {e: names.index(v[0]) for e, v in end_effectors.items()}
        balls = {e: names.index(v[1]) for e, v in end_effectors.items()}
    skeleton = Skeleton(names, parents, offsets, ends, balls)

    quats = np.zeros((n_frames, len(joints), 4))
    quats[..., 0] = 1.0
    root = np.repeat(offsets[:1], n_frames, axis=0)
    col = 0
    for k, j in enumerate(joints):
        ch = j["channels"]
        if not ch:
            continue
        block = data[:, col:col + len(ch)]
        col += len(ch)
        rot = [c for c in ch if c in _AXES]
        angles = np.stack([block[:, ch.index(c)] for c in rot], 1)
        xyzw = Rotation.from_euler("".join(_AXES[c] for c in rot), angles, degrees=True).as_quat()
        quats[:, k] = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], 1)
        for a, c in enumerate(_POS):
            if c in ch:
                root[:, a] = offsets[0, a] + block[:, ch.index(c)]
    return skeleton, Motion(quats, root, 1.0 / frame_time)


def export_bvh(skeleton, motion, path, order="ZXY"):
    """Write every joint with rotation channels in ``order``; the root also
    carries positions relative to its offset."""
    if sorted(order) != ["X", "Y", "Z"]:
        raise ConfigurationError(f"rotation order must permute XYZ, got {order!r}")
    kids = [[] for _ in range(skeleton.n_joints)]
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            kids[p].append(j)
    rot_channels = " ".join(f"{a}rotation" for a in order)
    lines = ["HIERARCHY"]

    def emit(j, indent):
        pad = "  " * indent
        head = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{head} {skeleton.names[j]}")
        lines.append(f"{pad}{{")
        off = " ".join(repr(float(x)) for x in skeleton.offsets[j])
        lines.append(f"{pad}  OFFSET {off}")
        if j == 0:
            lines.append(f"{pad}  CHANNELS 6 Xposition Yposition Zposition {rot_channels}")
        else:
            lines.append(f"{pad}  CHANNELS 3 {rot_channels}")
        for c in kids[j]:
            emit(c, indent + 1)
        if not kids[j]:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET 0.0 0.0 0.0")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    lines += ["MOTION", f"Frames: {motion.n_frames}", f"Frame Time: {repr(1.0 / motion.fps)}"]
    order_js = []

    def walk(j):
        order_js.append(j)
        for c in kids[j]:
            walk(c)

    walk(0)
    q = motion.quats
    for t in range(motion.n_frames):
        vals = list(motion.root_pos[t] - skeleton.offsets[0])
        for j in order_js:
            w, x, y, z = q[t, j]
            vals += list(Rotation.from_quat([x, y, z, w]).as_euler(order, degrees=True))
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# OBJ export


def _deform(skeleton, motion, points, weights):
    rot, pos = fk_tensors(skeleton.parents, as_tensor(skeleton.offsets), as_tensor(motion.quats),
                          as_tensor(motion.root_pos))
    eye = torch.eye(3, dtype=rot.dtype).expand(skeleton.n_joints, 3, 3)
    r, t = skinning_transforms(eye, as_tensor(skeleton.rest_global), rot, pos)
    return lbs_tensors(as_tensor(points), as_tensor(weights), r, t).numpy()


def export_obj_sequence(character, motion, out_dir, anchors=None, anchor_skin=None):
    """One ``frame_XXXX.obj`` mesh per frame and, when anchors are known,
    an ``anchors_XXXX.obj`` point cloud. Returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"{out}: cannot create directory ({exc.strerror})") from None
    sk = character.skeleton
    verts = _deform(sk, motion, character.mesh.vertices, character.skin.matrix)
    if anchors is None and character.anchors is not None:
        anchors, anchor_skin = character.anchors.rest_positions, character.anchors.skin.matrix
    pts = None if anchors is None else _deform(sk, motion, anchors, anchor_skin)
    faces = "".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in character.mesh.faces)
    written = []
    for t in range(motion.n_frames):
        path = out / f"frame_{t:04d}.obj"
        body = "".join(f"v {x!r} {y!r} {z!r}\n" for x, y, z in verts[t].tolist())
        path.write_text(f"# {character.name} frame {t}\n" + body + faces)
        written.append(path)
        if pts is not None:
            apath = out / f"anchors_{t:04d}.obj"
            apath.write_text("".join(f"v {x!r} {y!r} {z!r}\n" for x, y, z in pts[t].tolist()))
            written.append(apath)
    return written


def read_obj(path):
    """Vertices and (0-based) faces of a triangle OBJ."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        else:
            raise ParseError(f"{path}:{lineno}: unsupported record {parts[0]!r}")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a ``retarget run`` needs besides the input files."""

    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 5.0
    k: int = 10
    tau_init: float = 1.0
    steps: int = 500
    lr_anchor: float = 1e-3
    lr_pose: float = 1e-3
    lr_tau: Optional[float] = None
    delta_c: Optional[float] = None  # None: 1% of the character height
    samples_per_bone: int = 3
    rays_per_sample: int = 8
    seed: int = 0
    window: Optional[int] = None
    optimizer: str = "adam"
    anchor_optimizer: Optional[str] = None
    momentum: float = 0.0
    schedule: str = "alternating"
    freeze_anchors: bool = False
    adapt_frames: bool = True
    pair_cutoff: float = 0.0

    def __post_init__(self):
        # surface precondition failures at load time, not mid-run
        self.optim()
        if self.delta_c is not None and not self.delta_c > 0:
            raise ConfigurationError("delta_c must be positive")
        if self.samples_per_bone < 1 or self.rays_per_sample < 1:
            raise ConfigurationError("samples_per_bone and rays_per_sample must be >= 1")

    def optim(self, **overrides):
        keys = {f.name for f in fields(OptimConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in keys and k != "weights"}
        kw.update(overrides)
        return OptimConfig(weights=self.weights, **kw)

    def to_dict(self):
        out = asdict(self)
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_dict(cls, doc):
        validate_document(doc, "config")
        doc = dict(doc)
        weights = LossWeights().replace(**doc.pop("weights", {}))
        return cls(weights=weights, **doc)


def load_config(path=None):
    """Defaults when ``path`` is None; TOML for ``.toml``, JSON otherwise."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"{path}: no such file") from None
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    else:
        doc = _read_json(path)
    return RunConfig.from_dict(doc)
