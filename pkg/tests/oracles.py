"""Independent reference implementations: explicit loops in numpy/scipy,
sharing no code with the package. Slow on purpose."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy.spatial.transform import Rotation


def quat_wxyz_to_rotation(q):
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def fk(parents, offsets, quats, root_pos):
    """World rotation matrices and joint positions for one frame."""
    n = len(parents)
    rot = [None] * n
    pos = [None] * n
    for j in range(n):
        local = quat_wxyz_to_rotation(quats[j]).as_matrix()
        if parents[j] < 0:
            rot[j] = local
            pos[j] = np.asarray(root_pos, dtype=np.float64)
        else:
            p = parents[j]
            rot[j] = rot[p] @ local
            pos[j] = pos[p] + rot[p] @ offsets[j]
    return np.array(rot), np.array(pos)


def lbs(points, weights, rest_rot, rest_pos, rot, pos):
    out = np.zeros_like(points, dtype=np.float64)
    for v in range(len(points)):
        acc = np.zeros(3)
        for j in range(weights.shape[1]):
            w = weights[v, j]
            if w == 0.0:
                continue
            local = rest_rot[j].T @ (points[v] - rest_pos[j])
            acc += w * (rot[j] @ local + pos[j])
        out[v] = acc
    return out


def distance_matrix(a):
    n = len(a)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = math.sqrt(sum((a[j][c] - a[i][c]) ** 2 for c in range(3)))
    return d


def direction_matrix(a, frames):
    n = len(a)
    out = np.zeros((n, n, 3))
    for i in range(n):
        for j in range(n):
            for r in range(3):
                out[i, j, r] = sum(frames[i][c][r] * (a[j][c] - a[i][c]) for c in range(3))
    return out


def weight_matrix(d, alpha, d_min, d_max):
    n = len(d)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            w[i, j] = math.exp(-alpha * max(d[i][j] - d_min, 0.0) / (d_max - d_min))
    return w


def ordering_matrix(a, normals):
    n = len(a)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = sum(normals[i][c] * (a[j][c] - a[i][c]) for c in range(3))
    return out


def masked_mean(values, mask):
    total, count = 0.0, 0
    n = len(mask)
    for i in range(n):
        for j in range(n):
            if mask[i][j]:
                total += values[i][j]
                count += 1
    return total / count


def l_dist(d_src, d_tgt, w, mask):
    n = len(mask)
    vals = [[w[i][j] * (d_src[i][j] - d_tgt[i][j]) ** 2 for j in range(n)] for i in range(n)]
    return masked_mean(vals, mask)


def one_minus_cos(u, v, eps=1e-8):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu <= eps or nv <= eps:
        return 0.0
    return 1.0 - sum(a * b for a, b in zip(u, v)) / (nu * nv)


def l_dir(dir_src, dir_tgt, w, mask):
    n = len(mask)
    vals = [[w[i][j] * one_minus_cos(dir_src[i][j], dir_tgt[i][j]) for j in range(n)] for i in range(n)]
    return masked_mean(vals, mask)


def l_ord(o_src, o_tgt, w, mask):
    n = len(mask)
    vals = [[w[i][j] * (o_src[i][j] - o_tgt[i][j]) ** 2 for j in range(n)] for i in range(n)]
    return masked_mean(vals, mask)


def _nn_sq(x, y):
    out = []
    for p in x:
        out.append(min(sum((p[c] - q[c]) ** 2 for c in range(3)) for q in y))
    return out


def l_simp(adapted, vertices):
    a = _nn_sq(adapted, vertices)
    b = _nn_sq(vertices, adapted)
    return sum(a) / len(a) + max(a) + sum(b) / len(b)


def l_init(adapted, initial):
    return sum(sum((adapted[i][c] - initial[i][c]) ** 2 for c in range(3)) for i in range(len(adapted))) / len(adapted)


def l_reach(balls, anchors, w, effectors, limbs, ells):
    """Mean over (e, i on e, j off e's limb) of W[i, j] * max(0, |b_e - a_j| - ell_e)^2."""
    total, count = 0.0, 0
    n = len(anchors)
    for e in effectors:
        limb = set(limbs[e])
        for i in effectors[e]:
            for j in range(n):
                if j in limb:
                    continue
                gap = math.sqrt(sum((anchors[j][c] - balls[e][c]) ** 2 for c in range(3))) - ells[e]
                total += w[i][j] * max(gap, 0.0) ** 2
                count += 1
    return total / count


def sixd(q):
    m = quat_wxyz_to_rotation(q).as_matrix()
    return np.concatenate([m[:, 0], m[:, 1]])


def l_rec(pred, ref, lq, lp, lr, lc):
    total = 0.0
    for j in range(len(pred["q"])):
        total += lq * float(np.sum((sixd(pred["q"][j]) - sixd(ref["q"][j])) ** 2))
        total += lp * float(np.sum((np.asarray(pred["p"][j]) - np.asarray(ref["p"][j])) ** 2))
        total += lc * (float(pred["c"][j]) - float(ref["c"][j])) ** 2
    total += lr * float(np.sum((np.asarray(pred["r"]) - np.asarray(ref["r"])) ** 2))
    return total


def l_vel(pred, ref):
    return float(sum(np.sum((np.asarray(ref[j]) - np.asarray(pred[j])) ** 2) for j in range(len(ref))))


def soft_project(point, vertices, tau, k):
    d2 = [sum((point[c] - v[c]) ** 2 for c in range(3)) for v in vertices]
    order = sorted(range(len(vertices)), key=lambda i: (d2[i], i))[:k]
    logits = [-d2[i] / tau**2 for i in order]
    top = max(logits)
    ws = [math.exp(x - top) for x in logits]
    s = sum(ws)
    return np.array([sum(ws[m] / s * vertices[order[m]][c] for m in range(k)) for c in range(3)])


def ray_triangle(origin, direction, a, b, c):
    """Parameter t and barycentrics from a dense 3x3 solve, or None."""
    m = np.column_stack([-np.asarray(direction), np.asarray(b) - a, np.asarray(c) - a])
    if abs(np.linalg.det(m)) < 1e-14:
        return None
    t, u, v = np.linalg.solve(m, np.asarray(origin) - a)
    if u < 0 or v < 0 or u + v > 1 or t <= 0:
        return None
    return t, np.array([1 - u - v, u, v])


def winding_number(point, vertices, faces):
    """Generalized winding number (solid angle sum / 4 pi)."""
    total = 0.0
    for f in faces:
        a, b, c = (np.asarray(vertices[i]) - point for i in f)
        la, lb, lc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
        num = np.dot(a, np.cross(b, c))
        den = la * lb * lc + np.dot(a, b) * lc + np.dot(b, c) * la + np.dot(c, a) * lb
        total += 2.0 * math.atan2(num, den)
    return total / (4.0 * math.pi)


def confusion(source, target):
    tp = fn = fp = tn = 0
    for s_row, t_row in zip(source, target):
        for s, t in zip(s_row, t_row):
            if s and t:
                tp += 1
            elif s:
                fn += 1
            elif t:
                fp += 1
            else:
                tn += 1
    prec = Fraction(tp, tp + fp) if tp + fp else None
    rec = Fraction(tp, tp + fn) if tp + fn else None
    acc = Fraction(tp + tn, tp + tn + fp + fn)
    return (tp, fn, fp, tn), (prec, rec, acc)
