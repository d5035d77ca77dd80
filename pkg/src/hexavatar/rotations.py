"""Rotation representations and their reverse-mode derivatives.

Everything here is plain numpy on float64. Quaternions are (w, x, y, z),
rotation matrices act on column vectors, axis-angle vectors encode
angle * unit_axis. The *_vjp functions pull an upstream gradient back
through the corresponding forward map; they are the building blocks for
the analytic backward passes in the skinning and rasterization stages.
"""

from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x, batched over leading dims."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of skew for antisymmetric input, batched."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1
    )


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched; safe at the identity."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=-1)
    k = skew(aa)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(
            small, 0.5, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta**2)
        )
    out = eye + a[..., None, None] * k + b[..., None, None] * k2
    return out[0] if single else out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z), batched.

    The quadratic formula is evaluated as-is; callers owning possibly
    unnormalized quaternions must normalize first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out[0] if single else out


def quat_to_matrix_vjp(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to dL/dq through the quadratic map above."""
    q = np.asarray(q, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    d_r = d_r.reshape(q.shape[:-1] + (3, 3))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_r
    dw = 2.0 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2]
        + z * g[..., 1, 0] - x * g[..., 1, 2]
        - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2.0 * (
        y * g[..., 0, 1] + z * g[..., 0, 2]
        + y * g[..., 1, 0] - 2.0 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    out = np.stack([dw, dx, dy, dz], axis=-1)
    return out[0] if single else out


def normalize_quat(q: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """q / |q| with an identity fallback below eps, batched."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    fallback = np.zeros_like(q)
    fallback[..., 0] = 1.0
    out = np.where(n < eps, fallback, q / np.where(n < eps, 1.0, n))
    return out[0] if single else out


def normalize_quat_vjp(q: np.ndarray, d_qn: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """VJP of normalize_quat; zero gradient on the fallback branch."""
    q = np.asarray(q, dtype=np.float64)
    d_qn = np.asarray(d_qn, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    d_qn = d_qn.reshape(q.shape)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    safe_n = np.where(n < eps, 1.0, n)
    qn = q / safe_n
    proj = d_qn - qn * np.sum(qn * d_qn, axis=-1, keepdims=True)
    out = np.where(n < eps, 0.0, proj / safe_n)
    return out[0] if single else out


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix, batched (Shepperd's branching)."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 2
    r = r.reshape((-1, 3, 3))
    q = np.empty((r.shape[0], 4), dtype=np.float64)
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    for i in range(r.shape[0]):
        m = r[i]
        if tr[i] > 0.0:
            s = np.sqrt(tr[i] + 1.0) * 2.0
            q[i] = (
                0.25 * s,
                (m[2, 1] - m[1, 2]) / s,
                (m[0, 2] - m[2, 0]) / s,
                (m[1, 0] - m[0, 1]) / s,
            )
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q[i] = (
                (m[2, 1] - m[1, 2]) / s,
                0.25 * s,
                (m[0, 1] + m[1, 0]) / s,
                (m[0, 2] + m[2, 0]) / s,
            )
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q[i] = (
                (m[0, 2] - m[2, 0]) / s,
                (m[0, 1] + m[1, 0]) / s,
                0.25 * s,
                (m[1, 2] + m[2, 1]) / s,
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q[i] = (
                (m[1, 0] - m[0, 1]) / s,
                (m[0, 2] + m[2, 0]) / s,
                (m[1, 2] + m[2, 1]) / s,
                0.25 * s,
            )
    return q[0] if single else q


def matrix_to_quat_vjp(r: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    """Pull dL/dq back to dL/dR through matrix_to_quat.

    Mirrors the forward branch selection; within a branch every output is
    either s/4 or (linear combination of entries)/s with s = 2*sqrt(u) and
    u an affine function of the diagonal, so the chain rule is explicit.
    """
    r = np.asarray(r, dtype=np.float64)
    d_q = np.asarray(d_q, dtype=np.float64)
    single = r.ndim == 2
    r = r.reshape((-1, 3, 3))
    d_q = d_q.reshape((-1, 4))
    out = np.zeros_like(r)
    # Per-branch: diag_sign gives du/dR_ii, main is the output index equal
    # to s/4, and combos[j] = (sign, (a_idx, b_idx)) lists the off-diagonal
    # pairs feeding output j via (m[a] + sign*m[b]) / s.
    branch_table = (
        ((1.0, 1.0, 1.0), 0, {1: (-1.0, (2, 1), (1, 2)), 2: (-1.0, (0, 2), (2, 0)), 3: (-1.0, (1, 0), (0, 1))}),
        ((1.0, -1.0, -1.0), 1, {0: (-1.0, (2, 1), (1, 2)), 2: (1.0, (0, 1), (1, 0)), 3: (1.0, (0, 2), (2, 0))}),
        ((-1.0, 1.0, -1.0), 2, {0: (-1.0, (0, 2), (2, 0)), 1: (1.0, (0, 1), (1, 0)), 3: (1.0, (1, 2), (2, 1))}),
        ((-1.0, -1.0, 1.0), 3, {0: (-1.0, (1, 0), (0, 1)), 1: (1.0, (0, 2), (2, 0)), 2: (1.0, (1, 2), (2, 1))}),
    )
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    for i in range(r.shape[0]):
        m = r[i]
        if tr[i] > 0.0:
            branch = 0
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            branch = 1
        elif m[1, 1] > m[2, 2]:
            branch = 2
        else:
            branch = 3
        diag_sign, main, combos = branch_table[branch]
        u = 1.0 + diag_sign[0] * m[0, 0] + diag_sign[1] * m[1, 1] + diag_sign[2] * m[2, 2]
        s = 2.0 * np.sqrt(u)
        g = d_q[i]
        ds = 0.25 * g[main]  # from q[main] = s / 4
        for j, (sgn, (a0, a1), (b0, b1)) in combos.items():
            num = m[a0, a1] + sgn * m[b0, b1]
            out[i, a0, a1] += g[j] / s
            out[i, b0, b1] += sgn * g[j] / s
            ds += g[j] * (-num / (s * s))
        du = ds * 2.0 / s  # s = 2 sqrt(u)
        for d in range(3):
            out[i, d, d] += du * diag_sign[d]
    return out[0] if single else out


def polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (det +1 enforced), batched."""
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    m = m.reshape((-1, 3, 3))
    u, _, vt = np.linalg.svd(m)
    d = np.linalg.det(u @ vt)
    u = u.copy()
    u[:, :, 2] *= np.sign(d)[:, None]
    p = u @ vt
    return p[0] if single else p


def polar_rotation_vjp(m: np.ndarray, p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    """Pull dL/dP back to dL/dM for P = polar_rotation(M).

    Writes M = P H with symmetric H and uses
    Omega H + H Omega = [((tr H) I - H) w]x for skew Omega = [w]x, which
    turns the differential into the 3x3 solve below. Requires
    K = (tr H) I - H nonsingular, true away from degenerate M.
    """
    m = np.asarray(m, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    d_p = np.asarray(d_p, dtype=np.float64)
    single = m.ndim == 2
    m = m.reshape((-1, 3, 3))
    p = p.reshape((-1, 3, 3))
    d_p = d_p.reshape((-1, 3, 3))
    pt = np.swapaxes(p, -1, -2)
    h = pt @ m
    trace_h = h[:, 0, 0] + h[:, 1, 1] + h[:, 2, 2]
    k = trace_h[:, None, None] * np.eye(3)[None] - h
    k = 0.5 * (k + np.swapaxes(k, -1, -2))
    g0 = vee(pt @ d_p - np.swapaxes(pt @ d_p, -1, -2))
    g = np.linalg.solve(k, g0[..., None])[..., 0]
    out = p @ skew(g)
    return out[0] if single else out


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle log map of a rotation matrix, batched; angle in [0, pi]."""
    q = matrix_to_quat(r)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(n, q[..., 0])
    small = n < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, n))
    out = v * scale[..., None]
    return out[0] if single else out


def relative_rotation_log(aa_prev: np.ndarray, aa_cur: np.ndarray) -> np.ndarray:
    """log(R(aa_prev)^T R(aa_cur)) per row: the frame-to-frame joint delta."""
    r_prev = axis_angle_to_matrix(aa_prev)
    r_cur = axis_angle_to_matrix(aa_cur)
    rel = np.swapaxes(r_prev, -1, -2) @ r_cur
    return rotation_log(rel)
