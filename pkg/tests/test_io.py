import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from anchor_retarget import io, synthetic
from anchor_retarget.character import Motion
from anchor_retarget.errors import ConfigurationError, StructuralError, ValidationError
from anchor_retarget.objectives import LossWeights


def test_character_round_trip_is_byte_stable(humanoid, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    io.save_character(humanoid, a)
    back = io.load_character(a)
    io.save_character(back, b)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(back.mesh.vertices, humanoid.mesh.vertices)
    np.testing.assert_array_equal(back.anchors.frames, humanoid.anchors.frames)
    assert back.anchors.labels == humanoid.anchors.labels
    assert back.skeleton.body_parts == humanoid.skeleton.body_parts


def test_motion_round_trip(humanoid, walk, tmp_path):
    path = tmp_path / "m.json"
    io.save_motion(walk, path, humanoid.skeleton)
    back = io.load_motion(path, humanoid.skeleton)
    np.testing.assert_array_equal(back.quats, walk.quats)
    np.testing.assert_array_equal(back.root_pos, walk.root_pos)
    assert back.fps == walk.fps


def test_motion_accepts_6d_rotations(humanoid, walk, tmp_path):
    doc = io.motion_to_dict(walk)
    for frame in doc["frames"]:
        q = np.array(frame["rotations"])
        m = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
        frame["rotations"] = np.concatenate([m[:, :, 0], m[:, :, 1]], 1).tolist()
    back = io.motion_from_dict(doc, humanoid.skeleton)
    dots = np.abs((back.quats * walk.quats).sum(-1))
    np.testing.assert_allclose(dots, 1.0, atol=1e-12)


def test_schema_errors_name_the_json_path(humanoid, walk):
    doc = io.motion_to_dict(walk)
    doc["frames"][2]["root"]["pos"] = [0.0, 1.0]
    with pytest.raises(io.SchemaError, match=r"\$\.frames\[2\]\.root\.pos"):
        io.motion_from_dict(doc, humanoid.skeleton)
    doc = io.character_to_dict(humanoid)
    del doc["mesh"]
    with pytest.raises(io.SchemaError, match="mesh"):
        io.character_from_dict(doc)


def test_semantic_errors(humanoid, walk, tmp_path):
    doc = io.motion_to_dict(walk, humanoid.skeleton)
    doc["frames"][0]["rotations"] = doc["frames"][0]["rotations"][:-1]
    with pytest.raises(StructuralError, match="frames\\[0\\].rotations"):
        io.motion_from_dict(doc, humanoid.skeleton)
    cdoc = io.character_to_dict(humanoid)
    cdoc["skeleton"][3]["parent"] = "nobody"
    with pytest.raises(StructuralError, match="unknown joint"):
        io.character_from_dict(cdoc)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(io.ParseError, match="bad.json:1:2"):
        io.load_character(bad)
    with pytest.raises(ValidationError, match="no such file"):
        io.load_character(tmp_path / "missing.json")


def test_bvh_round_trip(humanoid, walk, tmp_path):
    path = tmp_path / "w.bvh"
    io.export_bvh(humanoid.skeleton, walk, path)
    sk, motion = io.import_bvh(path)
    assert sk.names == humanoid.skeleton.names and sk.parents == humanoid.skeleton.parents
    assert sk.end_effectors == humanoid.skeleton.end_effectors
    assert sk.ball_joints == humanoid.skeleton.ball_joints
    np.testing.assert_allclose(motion.root_pos, walk.root_pos, atol=1e-12)
    dots = np.abs((motion.quats * walk.quats).sum(-1))
    np.testing.assert_allclose(dots, 1.0, atol=1e-12)
    assert motion.fps == pytest.approx(walk.fps)


def test_bvh_parse_errors(tmp_path):
    path = tmp_path / "t.bvh"
    path.write_text("HIERARCHY\nROOT hips\n{\n OFFSET 0 0 0\n CHANNELS 3 Xrotation Yrotation Zrotation\n"
                    "End Site\n{\nOFFSET 0 1 0\n}\n}\nMOTION\nFrames: 1\nFrame Time: 0.1\n0 0\n")
    with pytest.raises(io.ParseError):
        io.import_bvh(path)
    with pytest.raises(ConfigurationError):
        io.export_bvh(synthetic.humanoid_skeleton(), synthetic.rest_motion(synthetic.humanoid_skeleton()),
                      tmp_path / "x.bvh", order="XXY")


def test_obj_export(humanoid, walk, tmp_path):
    files = io.export_obj_sequence(humanoid, walk, tmp_path / "obj")
    assert len(files) == 2 * walk.n_frames
    v, f = io.read_obj(files[0])
    np.testing.assert_array_equal(f, humanoid.mesh.faces)
    assert v.shape == humanoid.mesh.vertices.shape
    pts, _ = io.read_obj(files[1])
    assert pts.shape == (humanoid.anchors.n_anchors, 3)


def test_default_config():
    cfg = io.load_config(None)
    assert cfg.weights == LossWeights()
    assert (cfg.k, cfg.tau_init, cfg.steps, cfg.lr_anchor, cfg.lr_pose) == (10, 1.0, 500, 1e-3, 1e-3)
    opt = cfg.optim(steps=3)
    assert opt.steps == 3 and opt.weights == cfg.weights


def test_config_files(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text("steps = 7\nseed = 3\n[weights]\ndir = 10.0\n")
    cfg = io.load_config(toml)
    assert (cfg.steps, cfg.seed, cfg.weights.dir, cfg.weights.dist) == (7, 3, 10.0, 1.0)
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"steps": -1}))
    with pytest.raises(ValidationError):
        io.load_config(js)
    js.write_text(json.dumps({"lr_pose": 0.0}))
    with pytest.raises(ValidationError):
        io.load_config(js)
    toml.write_text("steps = = 1")
    with pytest.raises(io.ParseError):
        io.load_config(toml)


def test_motion_without_contacts_round_trips(humanoid, tmp_path):
    m = Motion(np.tile([1.0, 0, 0, 0], (2, humanoid.skeleton.n_joints, 1)), np.zeros((2, 3)))
    doc = io.motion_to_dict(m)
    assert "contacts" not in doc["frames"][0]
    assert not io.motion_from_dict(doc, humanoid.skeleton).contacts.any()
