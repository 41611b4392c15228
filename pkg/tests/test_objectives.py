import numpy as np
import pytest
import torch

import oracles
from anchor_retarget import synthetic
from anchor_retarget.anchors import deform_frames_tensors, end_effector_sets
from anchor_retarget.character import END_EFFECTORS, lbs_tensors, limb_length, skinning_transforms
from anchor_retarget.errors import StructuralError
from anchor_retarget.objectives import (
    LossReport,
    LossWeights,
    adapt_anchors,
    build_scene,
    cosine_residual,
    evaluate_terms,
    hard_anchors,
    l_anchor_direction,
    l_anchor_distance,
    l_init,
    l_ordering,
    l_reachability,
    l_reconstruction,
    l_simplification,
    l_velocity,
    motion_features,
    reach_violations,
    source_tables,
    value_and_gradient,
)
from anchor_retarget.optimizer import initialize, reference_motion
from anchor_retarget.proximity import ProximityParams, body_part_mask, proximity_tables


@pytest.fixture(scope="module")
def big_head():
    return synthetic.humanoid("big", head_scale=1.5, samples_per_bone=1, rays_per_sample=4)


@pytest.fixture(scope="module")
def scene(humanoid, walk, big_head):
    ref = reference_motion(initialize(humanoid, walk, big_head), walk)
    return build_scene(humanoid, walk, big_head, ref)


def test_cosine_residual_equals_one_minus_cos(rng):
    u, v = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    res, valid = cosine_residual(torch.tensor(u), torch.tensor(v))
    assert valid.all()
    want = [oracles.one_minus_cos(a, b) for a, b in zip(u, v)]
    np.testing.assert_allclose(res.numpy(), want, atol=1e-14)


def test_cosine_residual_skips_short_vectors():
    u = torch.tensor([[0.0, 0, 0], [1.0, 0, 0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 0, 0], [0.0, 1, 0]], dtype=torch.float64)
    res, valid = cosine_residual(u, v)
    assert valid.tolist() == [False, True]
    np.testing.assert_allclose(res.numpy(), [0.0, 1.0])
    mask = torch.ones(1, 2, dtype=torch.bool)
    loss, excluded = l_anchor_direction(u[None], v[None], torch.ones(1, 2), mask, return_excluded=True)
    assert excluded == 1 and float(loss) == pytest.approx(0.5)


def test_simplification_and_init_match_oracles(rng):
    a, v = rng.normal(size=(9, 3)), rng.normal(size=(25, 3))
    assert float(l_simplification(a, v)) == pytest.approx(oracles.l_simp(a, v), rel=1e-12)
    b = a + rng.normal(size=a.shape)
    assert float(l_init(b, a)) == pytest.approx(oracles.l_init(b, a), rel=1e-12)


def test_empty_mask_warns_and_returns_zero():
    z = torch.zeros(3, 3, dtype=torch.float64)
    with pytest.warns(RuntimeWarning, match="empty"):
        assert float(l_anchor_distance(z, z, z, torch.zeros(3, 3, dtype=torch.bool))) == 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(dir=-1.0)
    assert LossWeights().replace(dir=2.0).dir == 2.0


def test_scene_terms_agree_with_dense_terms(scene, humanoid, walk, big_head, rng):
    """The pair-list objective reproduces the dense-matrix term functions."""
    delta = torch.tensor(rng.normal(scale=0.01, size=(scene.n_anchors, 3)))
    tau = torch.tensor(0.05, dtype=torch.float64)
    quats = scene.ref_quats.clone()
    quats[:, 7] = torch.tensor([np.cos(0.2), 0, np.sin(0.2), 0])
    root = scene.ref_root + 0.01
    terms, _ = evaluate_terms(scene, delta, tau, quats, root)

    adapted, skin, frames = adapt_anchors(scene, delta, tau)
    rot, pos, p, pdot, r = motion_features(scene.parents, scene.offsets, quats, root, scene.dt)
    sr, st = skinning_transforms(scene.rest_rot, scene.rest_pos, rot, pos)
    a_d = lbs_tensors(adapted, skin, sr, st)
    f_d = deform_frames_tensors(frames, skin, sr)
    params = ProximityParams.from_height(humanoid.height)
    tgt = proximity_tables(a_d, f_d, params)
    _, _, src = source_tables(humanoid, walk, params)
    mask = body_part_mask(humanoid.anchors.labels)

    rel = dict(rel=1e-10, abs=1e-14)
    for name, fn, field in (("dist", l_anchor_distance, "dist"), ("dir", l_anchor_direction, "dir"),
                            ("ord", l_ordering, "order")):
        dense = fn(getattr(src, field), getattr(tgt, field), src.weight, mask).mean()
        assert float(terms[name]) == pytest.approx(float(dense), **rel)
    assert float(terms["simp"]) == pytest.approx(float(l_simplification(adapted, scene.vertices)), **rel)
    assert float(terms["init"]) == pytest.approx(float(l_init(adapted, scene.anchors_rest)), **rel)
    assert float(terms["proj"]) == pytest.approx(0.05**2)

    sets = end_effector_sets(big_head.anchors, big_head.skeleton)
    ells = {e: limb_length(big_head.skeleton, e) for e in END_EFFECTORS}
    balls = [{e: pos[t, big_head.skeleton.ball_joints[e]] for e in END_EFFECTORS} for t in range(scene.n_frames)]
    reach = np.mean([float(l_reachability(balls[t], a_d[t], src.weight[t], sets, ells)) for t in range(len(balls))])
    assert float(terms["reach"]) == pytest.approx(reach, **rel)

    rec = np.mean([
        float(l_reconstruction(
            dict(q=quats[t], p=p[t], r=r[t], c=scene.ref_c[t]),
            dict(q=scene.ref_quats[t], p=scene.ref_p[t], r=scene.ref_r[t], c=scene.ref_c[t]),
        ))
        for t in range(scene.n_frames)
    ])
    assert float(terms["rec"]) == pytest.approx(rec, **rel)
    assert float(terms["vel"]) == pytest.approx(float(l_velocity(pdot, scene.ref_pdot).mean()), **rel)


def test_reconstruction_and_velocity_vs_oracle(rng):
    q = rng.normal(size=(2, 5, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    pred = dict(q=q[0], p=rng.normal(size=(5, 3)), r=rng.normal(size=4), c=rng.random(5) < 0.5)
    ref = dict(q=q[1], p=rng.normal(size=(5, 3)), r=rng.normal(size=4), c=rng.random(5) < 0.5)
    w = LossWeights()
    assert float(l_reconstruction(pred, ref, w)) == pytest.approx(oracles.l_rec(pred, ref, w.q, w.p, w.r, w.c),
                                                                  rel=1e-12)
    assert float(l_velocity(pred["p"], ref["p"])) == pytest.approx(oracles.l_vel(pred["p"], ref["p"]), rel=1e-12)


def test_gradients_are_finite_and_cover_all_variables(scene):
    value, grads, rep = value_and_gradient(
        scene, np.zeros((scene.n_anchors, 3)), 0.05, scene.ref_quats, scene.ref_root
    )
    assert np.isfinite(value)
    assert set(grads) == {"delta", "tau", "rotation", "root"}
    for g in grads.values():
        assert torch.isfinite(g).all()
    assert grads["delta"].abs().sum() > 0
    assert isinstance(rep, LossReport) and rep.total == pytest.approx(value)


def test_retarget_objective_does_not_touch_anchor_terms(scene):
    w = LossWeights()
    _, _, rep = value_and_gradient(scene, np.zeros((scene.n_anchors, 3)), 0.05, scene.ref_quats, scene.ref_root,
                                   w, "retarget", ("rotation", "root"))
    weighted = sum(getattr(w, k) * rep.terms[k] for k in ("rec", "vel", "dist", "dir"))
    assert rep.retarget_total == pytest.approx(weighted)
    # the initialization is the reconstruction reference
    assert rep.terms["rec"] == 0.0 and rep.terms["vel"] == 0.0


def test_hard_anchors_are_mesh_vertices(scene, rng):
    pos, skin, frames, idx = hard_anchors(scene, rng.normal(scale=0.02, size=(scene.n_anchors, 3)))
    torch.testing.assert_close(pos, scene.vertices[idx])
    torch.testing.assert_close(skin, scene.vertex_skin[idx])


def test_window_matches_standalone_clip(scene, humanoid, walk, big_head):
    sub = scene.window(2, 5)
    assert sub.n_frames == 3
    assert torch.equal(sub.ref_pdot[0], torch.zeros_like(sub.ref_pdot[0]))
    torch.testing.assert_close(sub.src_dist, scene.src_dist[2:5])


def test_build_scene_rejects_mismatch(humanoid, walk, big_head):
    short = synthetic.walk_motion(humanoid.skeleton, n_frames=4)
    with pytest.raises(StructuralError, match="length"):
        build_scene(humanoid, walk, big_head, short)
    bare = synthetic.humanoid("bare", anchors=False)
    with pytest.raises(StructuralError, match="anchors"):
        build_scene(humanoid, walk, bare, walk)


def test_pair_cutoff_keeps_heavy_pairs(humanoid, walk, big_head, scene):
    ref = reference_motion(initialize(humanoid, walk, big_head), walk)
    cut = build_scene(humanoid, walk, big_head, ref, pair_cutoff=1e-4)
    assert 0 < len(cut.pair_i) < len(scene.pair_i)
    assert cut.n_mask == scene.n_mask
    assert float(cut.src_weight.max(0).values.min()) > 1e-4


def test_reach_violations_zero_at_rest(humanoid):
    anc = humanoid.anchors
    rest = synthetic.rest_motion(humanoid.skeleton, 2)
    src = proximity_tables(np.stack([anc.rest_positions] * 2), np.stack([anc.frames] * 2),
                           ProximityParams.from_height(humanoid.height))
    v = reach_violations(humanoid, rest, anc.rest_positions, anc.skin.matrix, src.weight.numpy())
    assert v.size > 0 and v.max() < 0.2
    assert np.all(v >= 0)
