"""Quaternion and rotation-matrix helpers.

Quaternions are stored scalar-first, ``(w, x, y, z)``. All functions operate
on ``torch`` tensors with arbitrary leading batch dimensions so they can sit
inside the differentiable objective.
"""
import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(x, dtype=DTYPE):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def quat_identity(shape=(), dtype=DTYPE):
    q = torch.zeros(*shape, 4, dtype=dtype)
    q[..., 0] = 1.0
    return q


def quat_normalize(q):
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_conjugate(q):
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_mul(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u, v, dim=-1)
    return v + 2.0 * (w * uv + torch.cross(u, uv, dim=-1))


def quat_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        torch.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], dim=-1),
        torch.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], dim=-1),
        torch.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def matrix_to_quat(m):
    """Shepperd's method; returns the representative with ``w >= 0``."""
    m = as_tensor(m)
    batch = m.shape[:-2]
    flat = m.reshape(-1, 3, 3)
    out = torch.empty(flat.shape[0], 4, dtype=m.dtype)
    for n, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = torch.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = torch.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = torch.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = torch.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = torch.stack([torch.as_tensor(c, dtype=m.dtype) for c in q])
        out[n] = q if q[0] >= 0 else -q
    return quat_normalize(out).reshape(*batch, 4)


def quat_exp(omega):
    """Quaternion of the rotation vector ``omega`` (axis * angle).

    Exact-zero input is handled with a Taylor branch so the gradient at the
    origin is finite (it is the identity map onto the vector part / 2).
    """
    theta2 = (omega * omega).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    half = 0.5 * theta
    w = torch.where(small, 1.0 - theta2 / 8.0, torch.cos(half))
    k = torch.where(small, 0.5 - theta2 / 48.0, torch.sin(half) / theta)
    return torch.cat([w, k * omega], dim=-1)


def quat_angle(a, b):
    """Geodesic angle between rotations ``a`` and ``b`` (radians)."""
    d = torch.abs((a * b).sum(-1)).clamp(max=1.0)
    return 2.0 * torch.arccos(d)


def axis_angle_quat(axis, angle):
    axis = as_tensor(axis)
    axis = axis / torch.linalg.norm(axis, dim=-1, keepdim=True)
    angle = as_tensor(angle)[..., None]
    return torch.cat([torch.cos(angle / 2), torch.sin(angle / 2) * axis], dim=-1)


def matrix_to_6d(m):
    """First two columns of the rotation matrix, concatenated."""
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def quat_to_6d(q):
    return matrix_to_6d(quat_to_matrix(q))


def sixd_to_matrix(d6):
    """Gram-Schmidt on the two stored columns, third column by cross product."""
    a1, a2 = d6[..., :3], d6[..., 3:]
    b1 = a1 / torch.linalg.norm(a1, dim=-1, keepdim=True)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = b2 / torch.linalg.norm(b2, dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def sixd_to_quat(d6):
    return matrix_to_quat(sixd_to_matrix(as_tensor(d6)))


def yaw_matrix(theta):
    """Rotation about +y by ``theta``."""
    c, s = torch.cos(theta), torch.sin(theta)
    z, o = torch.zeros_like(theta), torch.ones_like(theta)
    rows = [
        torch.stack([c, z, s], dim=-1),
        torch.stack([z, o, z], dim=-1),
        torch.stack([-s, z, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)
