import numpy as np
import pytest

from anchor_retarget import synthetic
from anchor_retarget.character import Character, Skeleton
from anchor_retarget.errors import ConfigurationError, StructuralError
from anchor_retarget.optimizer import (
    TRACE_COLUMNS,
    OptimConfig,
    initialize,
    leg_ratio,
    load_checkpoint,
    make_scene,
    run,
    save_checkpoint,
    trace_losses,
    write_trace_csv,
)

FAST = dict(tau_init=0.05, pair_cutoff=1e-4)


@pytest.fixture(scope="module")
def big_head():
    return synthetic.humanoid("big", head_scale=1.5, samples_per_bone=1, rays_per_sample=4)


def test_config_validation():
    for bad in (dict(steps=-1), dict(lr_pose=0.0), dict(optimizer="lbfgs"), dict(momentum=1.0),
                dict(schedule="random"), dict(window=0), dict(checkpoint_every=5)):
        with pytest.raises(ConfigurationError):
            OptimConfig(**bad)


def test_initialization_scales_root_by_leg_length(humanoid, walk):
    tall = synthetic.humanoid("tall", scale=1.5, samples_per_bone=1, rays_per_sample=4)
    assert leg_ratio(humanoid, tall) == pytest.approx(1.5)
    state = initialize(humanoid, walk, tall)
    np.testing.assert_allclose(state.root_pos, 1.5 * walk.root_pos)
    assert np.array_equal(state.quats, walk.quats) and not state.delta.any()


def test_topology_mismatch_is_reported(humanoid, walk):
    sk = humanoid.skeleton
    parents = list(sk.parents)
    parents[10] = 3
    other = Skeleton(sk.names, parents, sk.offsets, sk.end_effectors, sk.ball_joints)
    with pytest.raises(StructuralError, match="r_shoulder"):
        initialize(humanoid, walk, Character("x", other, humanoid.mesh, humanoid.skin, humanoid.anchors))


def test_alternating_schedule_alternates(humanoid, walk, big_head):
    seen = []

    def hook(kind, before, after):
        seen.append(kind)
        if kind == "anchor":
            assert before.pose_bytes() == after.pose_bytes()
        else:
            assert before.anchor_bytes() == after.anchor_bytes()

    result = run(humanoid, walk, big_head, OptimConfig(steps=3, **FAST), hook=hook)
    assert seen == ["anchor", "pose"] * 3
    assert len(result.trace) == 3 and result.state.step == 3
    assert not np.array_equal(result.motion.quats, walk.quats)
    assert result.anchors.shape == (big_head.anchors.n_anchors, 3)
    np.testing.assert_array_equal(result.anchors, big_head.mesh.vertices[result.vertex_indices])


def test_frozen_anchors_stay_at_zero(humanoid, walk, big_head):
    result = run(humanoid, walk, big_head, OptimConfig(steps=2, freeze_anchors=True, **FAST))
    assert not result.state.delta.any()


@pytest.mark.parametrize("kw", [dict(optimizer="sgd", momentum=0.5), dict(schedule="joint"), dict(window=3)])
def test_variants_run(humanoid, walk, big_head, kw):
    result = run(humanoid, walk, big_head, OptimConfig(steps=2, **FAST, **kw))
    assert np.isfinite(result.final.total)
    assert result.final_grad_norm >= 0


def test_checkpoint_resume_matches_uninterrupted(humanoid, walk, big_head, tmp_path):
    cfg = OptimConfig(steps=4, window=4, seed=7, checkpoint_every=2, checkpoint_dir=str(tmp_path), **FAST)
    full = run(humanoid, walk, big_head, cfg)
    state, trace = load_checkpoint(tmp_path / "step_000002")
    assert state.step == 2 and len(trace) == 2
    resumed = run(humanoid, walk, big_head, cfg, resume=tmp_path / "step_000002")
    assert resumed.motion.quats.tobytes() == full.motion.quats.tobytes()
    assert resumed.state.delta.tobytes() == full.state.delta.tobytes()


def test_checkpoint_round_trip(humanoid, walk, big_head, tmp_path):
    _, state = make_scene(humanoid, walk, big_head, OptimConfig(**FAST))
    save_checkpoint(state, [], tmp_path / "c")
    back, trace = load_checkpoint(tmp_path / "c")
    assert trace == [] and back.tau == state.tau
    assert back.quats.tobytes() == state.quats.tobytes()


def test_trace_table(humanoid, walk, big_head, tmp_path):
    result = run(humanoid, walk, big_head, OptimConfig(steps=2, **FAST))
    cols, rows = trace_losses(result)
    assert cols == TRACE_COLUMNS and len(rows) == 2 and len(rows[0]) == len(cols)
    write_trace_csv(result, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == ["step", *cols] and len(lines) == 3
