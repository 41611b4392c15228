"""Anchor-adaptation and retargeting objectives.

The individual loss terms take dense matrices as documented; the scene-level
objective evaluates the same formulas on a precomputed list of masked anchor
pairs so the per-frame ``N x N x 3`` intermediates are never materialized.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
from scipy.spatial import cKDTree

from .anchors import deform_frames_tensors, frame_tensors
from .character import (
    END_EFFECTORS,
    facing_positions,
    fk_tensors,
    headings,
    lbs_tensors,
    limb_length,
    root_movement,
    skinning_transforms,
    velocity_tensors,
)
from .errors import NumericalError, StructuralError
from .projection import DEFAULT_K, knn, soft_projection_weights
from .proximity import ProximityParams, body_part_mask, proximity_tables, safe_norm
from .rotations import as_tensor, quat_exp, quat_mul, quat_to_6d

log = logging.getLogger(__name__)

EPS_DIR = 1e-8
ANCHOR_TERMS = ("simp", "proj", "reach", "ord", "init")
RETARGET_TERMS = ("rec", "vel", "dist", "dir")
TERMS = ANCHOR_TERMS + RETARGET_TERMS


@dataclass(frozen=True)
class LossWeights:
    simp: float = 0.01
    proj: float = 0.01
    reach: float = 1000.0
    ord: float = 1.0
    init: float = 1.0
    rec: float = 1.0
    q: float = 15.0
    p: float = 0.01
    r: float = 10.0
    c: float = 1.0
    vel: float = 1.0
    dist: float = 1.0
    dir: float = 1500.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def replace(self, **kw):
        return LossWeights(**{**asdict(self), **kw})


# ---------------------------------------------------------------------------
# individual terms


def _nn_sq(x, y):
    """Squared distance from each row of ``x`` to its nearest row of ``y``.

    The neighbour is found on detached values; the distance is then
    recomputed in torch so the (sub)gradient flows through the chosen pair.
    """
    _, idx = cKDTree(y.detach().numpy()).query(x.detach().numpy())
    return ((x - y[torch.as_tensor(idx)]) ** 2).sum(-1)


def l_average(x, y):
    return _nn_sq(as_tensor(x), as_tensor(y)).mean()


def l_maximum(x, y):
    return _nn_sq(as_tensor(x), as_tensor(y)).max()


def l_simplification(adapted, vertices):
    adapted, vertices = as_tensor(adapted), as_tensor(vertices)
    return l_average(adapted, vertices) + l_maximum(adapted, vertices) + l_average(vertices, adapted)


def l_projection(tau):
    return as_tensor(tau) ** 2


def reach_penalty(ball, anchors_d, ell):
    """``max(0, |p_b - a_j| - ell)^2`` for every anchor ``j``."""
    gap = safe_norm(as_tensor(anchors_d) - as_tensor(ball).unsqueeze(-2)) - ell
    return torch.clamp(gap, min=0.0) ** 2


def l_reachability(ball_positions, anchors_d, w_src, effector_sets, limb_lengths):
    """Mean of ``W(i, j) P(e, j)`` over ``(e, i, j)``, ``i`` on ``e``, ``j`` off its limb.

    ``ball_positions`` maps e -> (3,), ``effector_sets`` maps e -> (N_e, limb),
    ``limb_lengths`` maps e -> float. Single frame.
    """
    anchors_d, w_src = as_tensor(anchors_d), as_tensor(w_src)
    n = anchors_d.shape[0]
    total = anchors_d.new_zeros(())
    count = 0
    for e in END_EFFECTORS:
        eff, limb = effector_sets[e]
        others = np.setdiff1d(np.arange(n), limb)
        if len(eff) == 0 or len(others) == 0:
            continue
        pen = reach_penalty(ball_positions[e], anchors_d[others], limb_lengths[e])
        total = total + (w_src[np.ix_(eff, others)] * pen.unsqueeze(0)).sum()
        count += len(eff) * len(others)
    if count == 0:
        warnings.warn("reachability set is empty; returning 0", RuntimeWarning)
        return total
    return total / count


def _masked_mean(values, mask, name):
    count = int(mask.sum())
    if count == 0:
        warnings.warn(f"{name}: empty pair mask; returning 0", RuntimeWarning)
        return values.new_zeros(values.shape[:-2])
    return (values * mask).sum((-1, -2)) / count


def l_ordering(ord_src, ord_tgt, w_src, mask):
    ord_src, ord_tgt, w_src = as_tensor(ord_src), as_tensor(ord_tgt), as_tensor(w_src)
    return _masked_mean(w_src * (ord_src - ord_tgt) ** 2, torch.as_tensor(mask), "L_ord")


def l_init(adapted, initial):
    diff = as_tensor(adapted) - as_tensor(initial)
    return (diff**2).sum(-1).mean()


def l_reconstruction(pred, ref, weights=LossWeights()):
    """Frame-level reconstruction term.

    ``pred``/``ref`` are mappings with ``q`` (J, 4), ``p`` (J, 3), ``r`` (4,)
    and ``c`` (J,). Rotations are compared on their 6D encodings.
    """
    dq = quat_to_6d(as_tensor(pred["q"])) - quat_to_6d(as_tensor(ref["q"]))
    dp = as_tensor(pred["p"]) - as_tensor(ref["p"])
    dr = as_tensor(pred["r"]) - as_tensor(ref["r"])
    dc = as_tensor(np.asarray(pred["c"], dtype=float)) - as_tensor(np.asarray(ref["c"], dtype=float))
    return (
        weights.q * (dq**2).sum()
        + weights.p * (dp**2).sum()
        + weights.r * (dr**2).sum()
        + weights.c * (dc**2).sum()
    )


def l_velocity(pred_vel, ref_vel):
    return ((as_tensor(ref_vel) - as_tensor(pred_vel)) ** 2).sum((-1, -2))


def l_anchor_distance(dist_src, dist_tgt, w_src, mask):
    dist_src, dist_tgt, w_src = as_tensor(dist_src), as_tensor(dist_tgt), as_tensor(w_src)
    return _masked_mean(w_src * (dist_src - dist_tgt) ** 2, torch.as_tensor(mask), "L_dist")


def cosine_residual(u, v, eps=EPS_DIR):
    """``1 - cos(u, v)`` and a validity mask (both norms above ``eps``)."""
    nu, nv = safe_norm(u), safe_norm(v)
    valid = (nu > eps) & (nv > eps)
    one = torch.ones_like(nu)
    # 1 - cos as half the squared distance of the unit vectors: no
    # cancellation near alignment, and an exactly zero gradient at u == v
    du = u / torch.where(valid, nu, one).unsqueeze(-1) - v / torch.where(valid, nv, one).unsqueeze(-1)
    res = 0.5 * (du**2).sum(-1)
    return torch.where(valid, res, torch.zeros_like(res)), valid


def l_anchor_direction(dir_src, dir_tgt, w_src, mask, return_excluded=False):
    """Weighted ``1 - cos`` over masked pairs; near-zero vectors are skipped
    (they still count in the normalizer) and reported."""
    mask = torch.as_tensor(mask)
    res, valid = cosine_residual(as_tensor(dir_src), as_tensor(dir_tgt))
    loss = _masked_mean(as_tensor(w_src) * res, mask, "L_dir")
    excluded = int((mask & ~valid).sum())
    if excluded:
        log.debug("L_dir: %d masked pair(s) excluded for near-zero length", excluded)
    return (loss, excluded) if return_excluded else loss


# ---------------------------------------------------------------------------
# scene-level objective


@dataclass
class LossReport:
    terms: dict
    weights: LossWeights = field(default_factory=LossWeights)
    excluded_dir_pairs: int = 0

    @property
    def anchor_total(self):
        w = self.weights
        return sum(getattr(w, k) * self.terms[k] for k in ANCHOR_TERMS)

    @property
    def retarget_total(self):
        w = self.weights
        return sum(getattr(w, k) * self.terms[k] for k in RETARGET_TERMS)

    @property
    def total(self):
        return self.anchor_total + self.retarget_total

    def as_row(self):
        row = {f"L_{k}": float(self.terms[k]) for k in TERMS}
        row["L_anc"] = float(self.anchor_total)
        row["L_retarget"] = float(self.retarget_total)
        return row


@dataclass(eq=False)
class Scene:
    """Everything the objective needs that does not change during a run."""

    parents: tuple
    offsets: torch.Tensor
    vertices: torch.Tensor
    vertex_skin: torch.Tensor
    vertex_normals: torch.Tensor
    anchors_rest: torch.Tensor
    frames_rest: torch.Tensor
    rest_rot: torch.Tensor
    rest_pos: torch.Tensor
    pair_i: torch.Tensor
    pair_j: torch.Tensor
    n_mask: int
    src_dist: torch.Tensor
    src_dir: torch.Tensor
    src_order: torch.Tensor
    src_weight: torch.Tensor
    reach: list
    ref_q6: torch.Tensor
    ref_p: torch.Tensor
    ref_r: torch.Tensor
    ref_pdot: torch.Tensor
    ref_c: torch.Tensor
    ref_quats: torch.Tensor
    ref_root: torch.Tensor
    dt: float
    k: int = DEFAULT_K
    adapt_frames: bool = True

    @property
    def n_frames(self):
        return self.ref_p.shape[0]

    def window(self, start, stop):
        """The same scene restricted to frames ``[start, stop)``, treated as
        a standalone clip (its first frame has zero velocity)."""
        sl = slice(start, stop)
        q, root = self.ref_quats[sl], self.ref_root[sl]
        _, _, p, pdot, r = motion_features(self.parents, self.offsets, q, root, self.dt)
        reach = [{**item, "w": item["w"][sl]} for item in self.reach]
        return replace(
            self, src_dist=self.src_dist[sl], src_dir=self.src_dir[:, sl], src_order=self.src_order[sl],
            src_weight=self.src_weight[sl], reach=reach, ref_q6=self.ref_q6[sl], ref_p=p, ref_r=r,
            ref_pdot=pdot, ref_c=self.ref_c[sl], ref_quats=q, ref_root=root,
        )

    @property
    def n_anchors(self):
        return self.anchors_rest.shape[0]


def source_tables(source, motion, params):
    """Per-frame deformed source anchors and their proximity tables."""
    sk, anc = source.skeleton, source.anchors
    rot, pos = fk_tensors(sk.parents, as_tensor(sk.offsets), as_tensor(motion.quats), as_tensor(motion.root_pos))
    r, t = skinning_transforms(
        torch.eye(3, dtype=rot.dtype).expand(sk.n_joints, 3, 3), as_tensor(sk.rest_global), rot, pos
    )
    w = as_tensor(anc.skin.matrix)
    a_d = lbs_tensors(as_tensor(anc.rest_positions), w, r, t)
    f_d = deform_frames_tensors(as_tensor(anc.frames), w, r)
    return a_d, f_d, proximity_tables(a_d, f_d, params)


def motion_features(parents, offsets, quats, root_pos, dt):
    """FK plus the derived per-frame quantities used by the reconstruction
    and velocity terms."""
    rot, pos = fk_tensors(parents, offsets, quats, root_pos)
    theta = headings(rot[:, 0])
    p = facing_positions(pos, theta, root_pos)
    _, pdot = velocity_tensors(p, dt)
    return rot, pos, p, pdot, root_movement(theta, root_pos)


def build_scene(source, source_motion, target, reference, alpha=5.0, k=DEFAULT_K,
                pair_cutoff=0.0, adapt_frames=True):
    """Precompute source-side tables, the pair mask and the reference motion.

    ``pair_cutoff`` drops masked pairs whose source weight never exceeds it
    in any frame (0 keeps every masked pair, i.e. the exact objective).
    """
    if source.anchors is None or target.anchors is None:
        raise StructuralError("both characters need extracted anchors")
    ss, ts = source.skeleton, target.skeleton
    if ss.parents != ts.parents:
        diff = [ss.names[j] for j in range(min(ss.n_joints, ts.n_joints)) if ss.parents[j] != ts.parents[j]]
        raise StructuralError(f"skeleton topologies differ (joints: {diff or 'count'})")
    if source.anchors.n_anchors != target.anchors.n_anchors:
        raise StructuralError("source and target anchor counts differ")
    if source_motion.n_frames != reference.n_frames:
        raise StructuralError("source and reference motions differ in length")
    params = ProximityParams.from_height(source.height, alpha)
    src_a, src_f, tab = source_tables(source, source_motion, params)
    mask = body_part_mask(source.anchors.labels)
    keep = mask & (tab.weight > pair_cutoff).any(0) if pair_cutoff > 0 else mask
    pi, pj = torch.nonzero(keep, as_tuple=True)
    # same arithmetic as the target side, so identical geometry gives
    # bit-identical values
    src_dist, src_dir = pair_geometry(src_a, src_f, pi, pj)

    reach = []
    for e in END_EFFECTORS:
        eff = target.anchors.effector_anchors(ts, e)
        limb = target.anchors.limb_anchors(ts, e)
        others = np.setdiff1d(np.arange(target.anchors.n_anchors), limb)
        if len(eff) == 0 or len(others) == 0:
            continue
        # sum over effector anchors i of W(i, j), per frame
        s = tab.weight[:, eff][:, :, others].sum(1)
        reach.append(
            dict(e=e, ball=ts.ball_joints[e], others=torch.as_tensor(others), w=s,
                 ell=limb_length(ts, e), count=len(eff) * len(others))
        )
    if not reach:
        warnings.warn("reachability set is empty for this rig", RuntimeWarning)

    dt = 1.0 / reference.fps
    off = as_tensor(ts.offsets)
    _, _, p, pdot, r = motion_features(ts.parents, off, as_tensor(reference.quats), as_tensor(reference.root_pos), dt)
    return Scene(
        parents=ts.parents,
        offsets=off,
        vertices=as_tensor(target.mesh.vertices),
        vertex_skin=as_tensor(target.skin.matrix),
        vertex_normals=as_tensor(target.mesh.vertex_normals()),
        anchors_rest=as_tensor(target.anchors.rest_positions),
        frames_rest=as_tensor(target.anchors.frames),
        rest_rot=torch.eye(3, dtype=torch.float64).expand(ts.n_joints, 3, 3),
        rest_pos=as_tensor(ts.rest_global),
        pair_i=pi,
        pair_j=pj,
        n_mask=int(mask.sum()),
        src_dist=src_dist,
        src_dir=src_dir,
        src_order=src_dir[2].clone(),
        src_weight=tab.weight[:, pi, pj],
        reach=reach,
        ref_q6=quat_to_6d(as_tensor(reference.quats)),
        ref_p=p.detach(),
        ref_r=r.detach(),
        ref_pdot=pdot.detach(),
        ref_c=as_tensor(reference.contacts.astype(float)),
        ref_quats=as_tensor(reference.quats),
        ref_root=as_tensor(reference.root_pos),
        dt=dt,
        k=k,
        adapt_frames=adapt_frames,
    )


def _sqrt_safe(sq):
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def pair_geometry(anchors, frames, pi, pj):
    """Distances ``(T, P)`` and frame-projected differences ``(3, T, P)`` for
    the pairs ``(pi, pj)``, laid out component-first for speed.

    The projected difference ``F_i^T (a_j - a_i)`` is formed as
    ``F_i^T a_j - F_i^T a_i`` from one batched product per frame column.
    """
    t, n = anchors.shape[0], anchors.shape[1]
    comp = anchors.unbind(-1)
    sq = sum((c[:, pj] - c[:, pi]) ** 2 for c in comp)
    flat = pi * n + pj
    at = anchors.transpose(1, 2)
    ddir = []
    for c in range(3):
        col = frames[..., :, c]  # (T, N, 3)
        g = torch.bmm(col, at).reshape(t, n * n)
        h = (col * anchors).sum(-1)
        ddir.append(g[:, flat] - h[:, pi])
    return _sqrt_safe(sq), torch.stack(ddir)


def cosine_residual_components(u, v, eps=EPS_DIR):
    """:func:`cosine_residual` for component-first ``(3, ...)`` inputs."""
    nu = _sqrt_safe(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    nv = _sqrt_safe(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    valid = (nu > eps) & (nv > eps)
    one = torch.ones_like(nu)
    su, sv = torch.where(valid, nu, one), torch.where(valid, nv, one)
    res = 0.5 * sum((u[c] / su - v[c] / sv) ** 2 for c in range(3))
    return torch.where(valid, res, torch.zeros_like(res)), valid


def adapt_anchors(scene, delta, tau, neighbors=None):
    """Translated anchors soft-projected onto the target rest mesh.

    Returns adapted positions, their blended skin weights and rest frames.
    The frames keep the bone-axis tangent; with ``adapt_frames`` the normal is
    the blended vertex normal of the same neighbourhood.
    """
    moved = scene.anchors_rest + delta
    idx, w = soft_projection_weights(moved, scene.vertices, tau, scene.k, neighbors)
    adapted = (w.unsqueeze(-1) * scene.vertices[idx]).sum(-2)
    skin = (w.unsqueeze(-1) * scene.vertex_skin[idx]).sum(-2)
    if scene.adapt_frames:
        normal = (w.unsqueeze(-1) * scene.vertex_normals[idx]).sum(-2)
        frames = frame_tensors(scene.frames_rest[:, :, 0], normal)
    else:
        frames = scene.frames_rest
    return adapted, skin, frames


def hard_anchors(scene, delta):
    """Nearest-vertex snap of the translated anchors, with that vertex's skin
    weights and (optionally) normal."""
    moved = (scene.anchors_rest + as_tensor(delta)).detach()
    idx = torch.as_tensor(knn(moved.numpy(), scene.vertices.numpy(), 1)[:, 0])
    frames = scene.frames_rest
    if scene.adapt_frames:
        frames = frame_tensors(scene.frames_rest[:, :, 0], scene.vertex_normals[idx])
    return scene.vertices[idx], scene.vertex_skin[idx], frames, idx


def evaluate_terms(scene, delta, tau, quats, root_pos, weights=LossWeights(), neighbors=None,
                   anchors=None):
    """Every loss term as a scalar tensor (differentiable in all inputs).

    ``anchors`` optionally overrides the adapted ``(positions, skin, frames)``.
    """
    if anchors is None:
        adapted, skin, frames_r = adapt_anchors(scene, delta, tau, neighbors)
    else:
        adapted, skin, frames_r = anchors
    rot, pos, p, pdot, r = motion_features(scene.parents, scene.offsets, quats, root_pos, scene.dt)
    sr, st = skinning_transforms(scene.rest_rot, scene.rest_pos, rot, pos)
    a_d = lbs_tensors(adapted, skin, sr, st)  # (T, N, 3)
    f_d = deform_frames_tensors(frames_r, skin, sr)  # (T, N, 3, 3)

    dist, ddir = pair_geometry(a_d, f_d, scene.pair_i, scene.pair_j)
    order = ddir[2]
    w = scene.src_weight
    n = max(scene.n_mask, 1)

    terms = {}
    terms["simp"] = l_simplification(adapted, scene.vertices)
    terms["proj"] = l_projection(tau)
    terms["init"] = l_init(adapted, scene.anchors_rest)

    reach = a_d.new_zeros(scene.n_frames)
    count = sum(item["count"] for item in scene.reach)
    for item in scene.reach:
        pen = reach_penalty(pos[:, item["ball"]], a_d[:, item["others"]], item["ell"])
        reach = reach + (item["w"] * pen).sum(-1)
    terms["reach"] = (reach / count).mean() if count else reach.sum()
    terms["ord"] = ((w * (scene.src_order - order) ** 2).sum(-1) / n).mean()

    q6 = quat_to_6d(quats)
    rec = (
        weights.q * ((scene.ref_q6 - q6) ** 2).sum((-1, -2))
        + weights.p * ((scene.ref_p - p) ** 2).sum((-1, -2))
        + weights.r * ((scene.ref_r - r) ** 2).sum(-1)
    )
    # predicted contact labels are held at the reference labels
    terms["rec"] = rec.mean()
    terms["vel"] = ((scene.ref_pdot - pdot) ** 2).sum((-1, -2)).mean()
    terms["dist"] = ((w * (scene.src_dist - dist) ** 2).sum(-1) / n).mean()
    res, valid = cosine_residual_components(scene.src_dir, ddir)
    terms["dir"] = ((w * res).sum(-1) / n).mean()
    excluded = int((~valid).sum())
    return terms, excluded


def total_anchor_objective(terms, weights=LossWeights()):
    return sum(getattr(weights, k) * terms[k] for k in ANCHOR_TERMS)


def total_retarget_objective(terms, weights=LossWeights()):
    return sum(getattr(weights, k) * terms[k] for k in RETARGET_TERMS)


def report(scene, delta, tau, quats, root_pos, weights=LossWeights(), neighbors=None, anchors=None):
    with torch.no_grad():
        terms, excluded = evaluate_terms(
            scene, as_tensor(delta), as_tensor(tau), as_tensor(quats), as_tensor(root_pos),
            weights, neighbors, anchors,
        )
    return LossReport({k: float(v) for k, v in terms.items()}, weights, excluded)


OBJECTIVES = {
    "anchor": lambda t, w: total_anchor_objective(t, w),
    "retarget": lambda t, w: total_retarget_objective(t, w),
    "total": lambda t, w: total_anchor_objective(t, w) + total_retarget_objective(t, w),
}


def gradient(scene, delta, tau, quats, root_pos, weights=LossWeights(), objective="total",
             wrt=("delta", "tau", "rotation", "root"), neighbors=None, anchors=None):
    value, grads, _ = value_and_gradient(
        scene, delta, tau, quats, root_pos, weights, objective, wrt, neighbors, anchors
    )
    return value, grads


def value_and_gradient(scene, delta, tau, quats, root_pos, weights=LossWeights(), objective="total",
                       wrt=("delta", "tau", "rotation", "root"), neighbors=None, anchors=None):
    """Reverse-mode gradients of an aggregate objective.

    Rotations are differentiated through left-multiplied increments
    ``exp(omega) * q`` evaluated at ``omega = 0``; the returned ``rotation``
    entry is ``dL/domega`` with shape ``(T, J, 3)``. Also returns the
    :class:`LossReport` of the forward pass.
    """
    delta = as_tensor(delta).clone().requires_grad_("delta" in wrt)
    tau = as_tensor(tau).clone().requires_grad_("tau" in wrt)
    quats = as_tensor(quats)
    omega = torch.zeros(quats.shape[:-1] + (3,), dtype=quats.dtype, requires_grad="rotation" in wrt)
    root = as_tensor(root_pos).clone().requires_grad_("root" in wrt)
    q = quat_mul(quat_exp(omega), quats)
    terms, excluded = evaluate_terms(scene, delta, tau, q, root, weights, neighbors, anchors)
    value = OBJECTIVES[objective](terms, weights)
    inputs = {"delta": delta, "tau": tau, "rotation": omega, "root": root}
    chosen = [k for k in ("delta", "tau", "rotation", "root") if k in wrt]
    if not torch.is_tensor(value) or not value.requires_grad:
        grads = [torch.zeros_like(inputs[k]) for k in chosen]
    else:
        grads = torch.autograd.grad(value, [inputs[k] for k in chosen], allow_unused=True)
        grads = [torch.zeros_like(inputs[k]) if g is None else g for k, g in zip(chosen, grads)]
    out = {k: g.detach() for k, g in zip(chosen, grads)}
    for k, g in out.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}; {_blame(terms, weights, inputs[k])}")
    rep = LossReport({k: float(v.detach()) for k, v in terms.items()}, weights, excluded)
    return float(value.detach()) if torch.is_tensor(value) else float(value), out, rep


def _blame(terms, weights, var):
    bad = []
    for name, t in terms.items():
        if not torch.is_tensor(t) or not t.requires_grad:
            continue
        (g,) = torch.autograd.grad(t, [var], retain_graph=True, allow_unused=True)
        if not torch.isfinite(t) or (g is not None and not torch.isfinite(g).all()):
            bad.append(f"L_{name}")
    return "offending term(s): " + (", ".join(bad) or "unknown")


def reach_violations(target, motion, anchors, anchor_skin, weight, w_min=0.1):
    """Per qualifying triple, how far an anchor lies beyond its limb's reach.

    ``weight`` is the ``(T, N, N)`` source weight table. Triples are
    ``(t, e, j)`` with some effector anchor ``i`` of ``e`` having
    ``W[t, i, j] > w_min`` and ``j`` off the limb of ``e``. Returns an array of
    ``max(0, |p_b - a_j| - ell)`` (empty when nothing qualifies).
    """
    sk, anc = target.skeleton, target.anchors
    rot, pos = fk_tensors(sk.parents, as_tensor(sk.offsets), as_tensor(motion.quats), as_tensor(motion.root_pos))
    eye = torch.eye(3, dtype=rot.dtype).expand(sk.n_joints, 3, 3)
    r, t = skinning_transforms(eye, as_tensor(sk.rest_global), rot, pos)
    a_d = lbs_tensors(as_tensor(anchors), as_tensor(anchor_skin), r, t).numpy()
    pos = pos.numpy()
    weight = np.asarray(weight)
    out = []
    for e in END_EFFECTORS:
        eff = anc.effector_anchors(sk, e)
        others = np.setdiff1d(np.arange(anc.n_anchors), anc.limb_anchors(sk, e))
        if len(eff) == 0 or len(others) == 0:
            continue
        hot = (weight[:, eff][:, :, others] > w_min).any(1)  # (T, |others|)
        ft, fj = np.nonzero(hot)
        gap = np.linalg.norm(a_d[ft, others[fj]] - pos[ft, sk.ball_joints[e]], axis=-1) - limb_length(sk, e)
        out.append(np.maximum(gap, 0.0))
    return np.concatenate(out) if out else np.zeros(0)
