import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from anchor_retarget import synthetic
from anchor_retarget.errors import ValidationError
from anchor_retarget.evaluation import (
    ContactEvent,
    MetricsReport,
    boundary_loops,
    cap_boundaries,
    check_watertight,
    confusion_counts,
    contact_preservation,
    detect_contacts,
    event_grid,
    is_limb_part,
    part_contacts,
    part_meshes,
    penetration_counts,
    penetration_rate,
    points_in_mesh,
    write_events_csv,
)


@pytest.fixture(scope="module")
def blob():
    return synthetic.ellipsoid((0.0, 0.0, 0.0), np.eye(3), (1.0, 0.6, 0.8), n_lat=9, n_lon=13)


def test_points_in_mesh_matches_winding_number(blob, rng):
    verts, faces = blob
    pts = rng.uniform(-1.2, 1.2, size=(300, 3))
    got = points_in_mesh(pts, verts, faces)
    want = np.array([oracles.winding_number(p, verts, faces) > 0.5 for p in pts])
    np.testing.assert_array_equal(got, want)


def test_unit_box_inside_outside():
    cube_v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [0.5, 0.5, 0.5 - 1e-3]])
    np.testing.assert_array_equal(points_in_mesh(pts, cube_v, faces), [True, False, True])


def test_open_mesh_rejected(blob):
    verts, faces = blob
    with pytest.raises(ValidationError, match="watertight"):
        points_in_mesh(np.zeros((1, 3)), verts, faces[1:])


def test_capping_closes_an_open_cylinder(blob):
    verts, faces = blob
    top = faces[np.all(verts[faces][:, :, 2] > 0.1, axis=1)]
    assert len(boundary_loops(top)) == 1
    check_watertight(cap_boundaries(top))


def test_limb_labels():
    assert is_limb_part("l_arm") and is_limb_part("r_foot") and is_limb_part("end_lh")
    assert not is_limb_part("head") and not is_limb_part("torso")


def test_part_meshes_cover_every_vertex(humanoid):
    pm = part_meshes(humanoid)
    assert set(pm.parts) == set(humanoid.skeleton.body_parts)
    assert sum(len(pm.vertices_of(p)) for p in pm.parts) == humanoid.mesh.n_vertices
    assert all(pm.components[p] for p in pm.parts)


def test_rest_pose_penetration_is_limb_overlap_only(humanoid):
    rest = synthetic.rest_motion(humanoid.skeleton, 1)
    counts, n_limb = penetration_counts(humanoid, rest)
    assert n_limb > 0 and counts.shape == (1,)
    # a limb pushed through the torso raises the count
    v = humanoid.mesh.vertices.copy()
    pm = part_meshes(humanoid)
    arm = pm.vertices_of("l_arm")
    v[arm] += np.array([-0.5, -0.3, 0.0])
    rate_in = penetration_rate(humanoid, v, pm)
    assert rate_in > penetration_rate(humanoid, humanoid.mesh.vertices, pm)


def test_contact_needs_proximity_without_penetration(humanoid):
    pm = part_meshes(humanoid)
    v = humanoid.mesh.vertices.copy()
    hand = pm.vertices_of("l_hand")
    head = pm.vertices_of("head")
    dc = 0.01 * humanoid.height
    # move the hand so its closest vertex sits just outside the head's top vertex
    top = head[np.argmax(v[head, 1])]
    low = hand[np.argmin(v[hand, 1])]
    touching = v.copy()
    touching[hand] += v[top] + np.array([0, 0.5 * dc, 0]) - v[low]
    far = v.copy()
    far[hand] += v[top] + np.array([0, 3 * dc, 0]) - v[low]
    inside = v.copy()
    inside[hand] += v[top] - np.array([0, 0.05, 0]) - v[low]
    frames = np.stack([touching, far, inside])
    grid = part_contacts(detect_contacts(humanoid, frames, dc, pm), "l_hand", "head")
    np.testing.assert_array_equal(grid, [True, False, False])


def test_contact_event_pairs_are_unordered():
    assert ContactEvent(0, ("z", "a"), True).pair == ("a", "z")
    with pytest.raises(ValidationError):
        ContactEvent(0, ("a", "a"), True)


def test_event_grid_and_csv(tmp_path):
    events = [ContactEvent(1, ("a", "b"), True), ContactEvent(0, ("a", "b"), False), ContactEvent(0, ("a", "c"), True)]
    frames, pairs, grid = event_grid(events)
    assert frames == [0, 1] and pairs == [("a", "b"), ("a", "c")]
    np.testing.assert_array_equal(grid, [[False, True], [True, False]])
    write_events_csv(events, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines == ["frame,part_a,part_b,present", "0,a,b,0", "0,a,c,1", "1,a,b,1"]


grids = st.integers(1, 6).flatmap(
    lambda t: st.integers(1, 5).flatmap(
        lambda p: st.tuples(arrays(bool, (t, p)), arrays(bool, (t, p)))
    )
)


@given(grids)
def test_confusion_matches_oracle(pair):
    src, tgt = pair
    counts, ratios = oracles.confusion(src.tolist(), tgt.tolist())
    assert confusion_counts(src, tgt) == counts
    assert contact_preservation(src, tgt).fractions() == ratios


def test_undefined_ratios_are_none():
    rep = MetricsReport(0, 0, 0, 4)
    assert rep.precision is None and rep.recall is None and rep.accuracy == 1.0
    assert '"precision": null' in rep.to_json()


def test_preservation_aligns_pair_sets():
    src = [ContactEvent(0, ("a", "b"), True)]
    tgt = [ContactEvent(0, ("a", "c"), True)]
    rep = contact_preservation(src, tgt)
    assert (rep.tp, rep.fn, rep.fp, rep.tn) == (0, 1, 1, 0)
    with pytest.raises(ValidationError, match="frame"):
        contact_preservation(src, tgt + [ContactEvent(1, ("a", "c"), False)])
