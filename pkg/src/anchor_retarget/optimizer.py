"""Direct alternating optimization of anchor displacements and target pose.

Each iteration runs an anchor step (updates the displacements and the
projection temperature) followed by a pose step (updates per-joint rotations
and root positions). The anchor step descends the full objective, the pose
step only the retargeting terms with the anchors held fixed. Updates use Adam by default; plain descent
(optionally with momentum) is available.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .character import END_EFFECTORS, Motion, limb_length
from .errors import ConfigurationError, NumericalError, StructuralError
from .objectives import (
    ANCHOR_TERMS,
    TERMS,
    LossReport,
    LossWeights,
    build_scene,
    hard_anchors,
    report,
    value_and_gradient,
)
from .projection import DEFAULT_K, DEFAULT_TAU, TAU_FLOOR
from .rotations import as_tensor, quat_exp, quat_mul, quat_normalize

log = logging.getLogger(__name__)

TRACE_COLUMNS = tuple(f"L_{k}" for k in TERMS) + ("L_anc", "L_retarget")
_STATE_ARRAYS = ("delta", "quats", "root_pos")


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 500
    lr_anchor: float = 1e-3
    lr_pose: float = 1e-3
    lr_tau: Optional[float] = None  # None: share the anchor learning rate
    weights: LossWeights = field(default_factory=LossWeights)
    window: Optional[int] = None  # frames per step; None uses the whole clip
    seed: int = 0
    k: int = DEFAULT_K
    tau_init: float = DEFAULT_TAU
    alpha: float = 5.0
    optimizer: str = "adam"
    anchor_optimizer: Optional[str] = None  # None: same as ``optimizer``
    momentum: float = 0.0  # plain descent only
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "alternating"
    freeze_anchors: bool = False
    adapt_frames: bool = True
    pair_cutoff: float = 0.0
    divergence_factor: float = 1e6
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        for name in ("lr_anchor", "lr_pose"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr_tau is not None and not self.lr_tau > 0:
            raise ConfigurationError("lr_tau must be positive")
        if self.window is not None and self.window < 1:
            raise ConfigurationError("window must be >= 1")
        if self.k < 1 or not self.tau_init > 0:
            raise ConfigurationError("k must be >= 1 and tau_init positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        for name in (self.optimizer, self.anchor_optimizer or self.optimizer):
            if name not in ("adam", "sgd"):
                raise ConfigurationError(f"unknown optimizer {name!r}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.schedule not in ("alternating", "joint"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ConfigurationError("checkpoint_every needs checkpoint_dir")

    @property
    def anchor_kind(self):
        return self.anchor_optimizer or self.optimizer

    @property
    def tau_lr(self):
        return self.lr_anchor if self.lr_tau is None else self.lr_tau


@dataclass(frozen=True, eq=False)
class OptimState:
    delta: np.ndarray  # (N_A, 3)
    tau: float
    quats: np.ndarray  # (T, J, 4)
    root_pos: np.ndarray  # (T, 3)
    step: int = 0
    buffers: dict = field(default_factory=dict)  # momentum, keyed like the gradients

    def pose_bytes(self):
        return self.quats.tobytes() + self.root_pos.tobytes()

    def anchor_bytes(self):
        return self.delta.tobytes() + np.float64(self.tau).tobytes()


@dataclass(eq=False)
class RetargetResult:
    motion: Motion
    anchors: np.ndarray  # hard-projected rest-pose anchors
    vertex_indices: np.ndarray
    trace: list
    final: LossReport
    final_grad_norm: float
    state: OptimState
    wall_time: float


def leg_ratio(source, target):
    src = np.mean([limb_length(source.skeleton, e) for e in ("lf", "rf")])
    tgt = np.mean([limb_length(target.skeleton, e) for e in ("lf", "rf")])
    if src <= 0:
        raise StructuralError("source legs have zero length")
    return tgt / src


def initialize(source, source_motion, target, config=OptimConfig()):
    """Zero displacements, initial temperature, and the source rotations
    copied onto the target with the root trajectory scaled by leg length."""
    ss, ts = source.skeleton, target.skeleton
    if ss.parents != ts.parents:
        n = min(ss.n_joints, ts.n_joints)
        diff = [ts.names[j] for j in range(n) if ss.parents[j] != ts.parents[j]]
        raise StructuralError(f"skeleton topologies differ (joints: {diff or 'count'})")
    if target.anchors is None:
        raise StructuralError("target character has no anchors")
    return OptimState(
        delta=np.zeros((target.anchors.n_anchors, 3)),
        tau=float(config.tau_init),
        quats=source_motion.quats.copy(),
        root_pos=source_motion.root_pos * leg_ratio(source, target),
    )


def reference_motion(state, source_motion):
    return Motion(state.quats.copy(), state.root_pos.copy(), source_motion.fps, source_motion.contacts.copy())


def make_scene(source, source_motion, target, config=OptimConfig()):
    """Initial state plus the precomputed scene, with the initialization as
    the reconstruction reference."""
    state = initialize(source, source_motion, target, config)
    ref = reference_motion(state, source_motion)
    scene = build_scene(
        source, source_motion, target, ref, alpha=config.alpha, k=config.k,
        pair_cutoff=config.pair_cutoff, adapt_frames=config.adapt_frames,
    )
    return scene, state


def _window(scene, state, config, rng):
    t = scene.n_frames
    if config.window is None or config.window >= t:
        return scene, slice(0, t)
    start = int(rng.integers(0, t - config.window + 1))
    sl = slice(start, start + config.window)
    return scene.window(sl.start, sl.stop), sl


def _step(g, lr, buffers, key, config, t, kind):
    """Displacement for one update of the variable ``key`` (its ``t``-th)."""
    if kind == "sgd":
        if config.momentum:
            v = buffers.get(key)
            g = g.copy() if v is None else config.momentum * v + g
            buffers[key] = g
        return -lr * g
    b1, b2 = config.betas
    m = b1 * buffers.get(key + ".m", 0.0) + (1 - b1) * g
    v = b2 * buffers.get(key + ".v", 0.0) + (1 - b2) * g * g
    buffers[key + ".m"], buffers[key + ".v"] = m, v
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return -lr * m_hat / (np.sqrt(v_hat) + config.eps)


def _evaluate(scene, state, config, wrt, sl=slice(None), objective="total"):
    return value_and_gradient(
        scene, torch.from_numpy(state.delta), torch.tensor(state.tau, dtype=torch.float64),
        torch.from_numpy(state.quats[sl]), torch.from_numpy(state.root_pos[sl]),
        config.weights, objective, wrt,
    )


def _apply_anchor(state, grads, config, buffers):
    t = state.step + 1
    delta = state.delta
    if not config.freeze_anchors:
        delta = delta + _step(grads["delta"].numpy(), config.lr_anchor, buffers, "delta", config, t, config.anchor_kind)
    g_tau = np.asarray(grads["tau"].numpy(), dtype=np.float64)
    tau = float(state.tau + _step(g_tau, config.tau_lr, buffers, "tau", config, t, config.anchor_kind))
    return delta, max(tau, TAU_FLOOR)


def _apply_pose(state, grads, config, buffers, sl):
    t = state.step + 1
    g_rot = np.zeros(state.quats.shape[:-1] + (3,))
    g_root = np.zeros_like(state.root_pos)
    g_rot[sl], g_root[sl] = grads["rotation"].numpy(), grads["root"].numpy()
    d_rot = _step(g_rot, config.lr_pose, buffers, "rotation", config, t, config.optimizer)
    d_root = _step(g_root, config.lr_pose, buffers, "root", config, t, config.optimizer)
    q0 = torch.from_numpy(state.quats)
    q = quat_normalize(quat_mul(quat_exp(torch.from_numpy(d_rot)), q0))
    # joints with a zero increment keep their quaternion bit-for-bit
    still = torch.from_numpy(~d_rot.any(-1))[..., None]
    return torch.where(still, q0, q).numpy(), state.root_pos + d_root


def anchor_step(state, scene, config=OptimConfig(), sl=slice(None)):
    """One descent update of the displacements and the temperature; the
    pose arrays of the returned state are the same objects as the input's."""
    value, grads, rep = _evaluate(scene, state, config, ("delta", "tau"), sl)
    buffers = dict(state.buffers)
    delta, tau = _apply_anchor(state, grads, config, buffers)
    return replace(state, delta=delta, tau=tau, buffers=buffers), value, rep


def pose_step(state, scene, config=OptimConfig(), sl=slice(None)):
    """One descent update of rotations and root positions with the anchors
    held fixed."""
    value, grads, rep = _evaluate(scene, state, config, ("rotation", "root"), sl, "retarget")
    buffers = dict(state.buffers)
    quats, root = _apply_pose(state, grads, config, buffers, sl)
    return replace(state, quats=quats, root_pos=root, buffers=buffers), value, rep


def joint_step(state, scene, config=OptimConfig(), sl=slice(None)):
    """Simultaneous update of every variable (comparison schedule)."""
    value, grads, rep = _evaluate(scene, state, config, ("delta", "tau", "rotation", "root"), sl)
    buffers = dict(state.buffers)
    delta, tau = _apply_anchor(state, grads, config, buffers)
    quats, root = _apply_pose(state, grads, config, buffers, sl)
    return replace(state, delta=delta, tau=tau, quats=quats, root_pos=root, buffers=buffers), value, rep


def iterate(state, scene, config, rng, hook=None):
    """One full iteration of the configured schedule. Returns the new state,
    the total objective before the update and its loss report."""
    sub, sl = _window(scene, state, config, rng)
    if config.schedule == "joint":
        new, value, rep = joint_step(state, sub, config, sl)
    else:
        mid, value, rep = anchor_step(state, sub, config, sl)
        if hook:
            hook("anchor", state, mid)
        new, _, _ = pose_step(mid, sub, config, sl)
        if hook:
            hook("pose", mid, new)
    return replace(new, step=state.step + 1), value, rep


def run(source, source_motion, target, config=OptimConfig(), resume=None, hook=None):
    """Optimize, then snap the adapted anchors to their nearest vertices and
    report the objective once more with those anchors (no further update).

    ``resume`` is a checkpoint path; ``hook(kind, before, after)`` is called
    around every step (for instrumentation).
    """
    t0 = time.perf_counter()
    scene, state = make_scene(source, source_motion, target, config)
    trace = []
    if resume is not None:
        state, trace = load_checkpoint(resume)
        if state.delta.shape != (scene.n_anchors, 3) or state.quats.shape[0] != scene.n_frames:
            raise StructuralError("checkpoint does not match this scene")
    rng = np.random.default_rng(config.seed)
    # replay the window draws already consumed so resumed runs match
    for _ in range(state.step):
        _window(scene, state, config, rng)
    initial = None
    while state.step < config.steps:
        new, value, rep = iterate(state, scene, config, rng, hook)
        if not np.isfinite(value):
            raise NumericalError(f"objective became non-finite at step {state.step}")
        initial = value if initial is None else initial
        if value > config.divergence_factor * max(initial, 1e-12):
            raise NumericalError(
                f"diverged at step {state.step}: objective {value:.3e} vs initial {initial:.3e}; "
                f"last terms {rep.as_row()}"
            )
        trace.append(rep)
        state = new
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, trace, Path(config.checkpoint_dir) / f"step_{state.step:06d}")
    return finish(scene, state, source_motion, config, trace, time.perf_counter() - t0)


def finish(scene, state, source_motion, config, trace, elapsed=0.0):
    pos, skin, frames, idx = hard_anchors(scene, state.delta)
    hard = (pos, skin, frames)
    tau = torch.tensor(state.tau, dtype=torch.float64)
    _, grads, final = value_and_gradient(
        scene, torch.from_numpy(state.delta), tau, torch.from_numpy(state.quats),
        torch.from_numpy(state.root_pos), config.weights, "retarget", ("rotation", "root"), anchors=hard,
    )
    gnorm = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
    motion = Motion(state.quats.copy(), state.root_pos.copy(), source_motion.fps, source_motion.contacts.copy())
    return RetargetResult(motion, pos.numpy(), idx.numpy(), trace, final, gnorm, state, elapsed)


def trace_losses(result):
    """``(columns, rows)``: one row per step, every term plus both totals."""
    trace = result.trace if isinstance(result, RetargetResult) else result
    return TRACE_COLUMNS, [[rep.as_row()[c] for c in TRACE_COLUMNS] for rep in trace]


def write_trace_csv(result, path):
    cols, rows = trace_losses(result)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + cols)
        for i, row in enumerate(rows):
            w.writerow([i] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state, trace, prefix):
    """``<prefix>.bin`` (little-endian float64 arrays) plus a JSON header
    holding the scalars and the trace so far."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: getattr(state, name) for name in _STATE_ARRAYS}
    arrays.update({f"buffer.{k}": np.asarray(v, dtype=np.float64) for k, v in sorted(state.buffers.items())})
    fields_, offset = {}, 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d buffers 0-d
            fh.write(arr.tobytes())
            fields_[name] = {"shape": list(arr.shape), "offset": offset}
            offset += arr.nbytes
    header = {
        "step": state.step,
        "tau": state.tau,
        "fields": fields_,
        "trace": [{"terms": r.terms, "excluded_dir_pairs": r.excluded_dir_pairs} for r in trace],
        "weights": asdict(trace[0].weights) if trace else None,
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))


def load_checkpoint(prefix):
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    arrays = {}
    for name, spec in header["fields"].items():
        n = int(np.prod(spec["shape"]))
        arrays[name] = np.frombuffer(raw, "<f8", n, spec["offset"]).reshape(spec["shape"]).astype(np.float64)
    buffers = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("buffer.")}
    state = OptimState(
        delta=arrays["delta"], tau=header["tau"], quats=arrays["quats"], root_pos=arrays["root_pos"],
        step=header["step"], buffers=buffers,
    )
    w = LossWeights(**header["weights"]) if header["weights"] else LossWeights()
    trace = [LossReport(r["terms"], w, r["excluded_dir_pairs"]) for r in header["trace"]]
    return state, trace


def adapted_anchor_positions(scene, state):
    """Soft-projected rest-pose anchors for a state (no gradients)."""
    from .objectives import adapt_anchors

    with torch.no_grad():
        pos, _, _ = adapt_anchors(scene, torch.from_numpy(state.delta), torch.tensor(state.tau, dtype=torch.float64))
    return pos.numpy()


__all__ = [
    "ANCHOR_TERMS",
    "END_EFFECTORS",
    "OptimConfig",
    "OptimState",
    "RetargetResult",
    "anchor_step",
    "initialize",
    "joint_step",
    "pose_step",
    "run",
    "trace_losses",
]
