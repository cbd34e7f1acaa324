"""Forward kinematics and dual-quaternion skinning with analytic Jacobians.

The pose vector has 36 entries: root rotation (XYZ Euler, indices 0-2), root
translation (3-5), 27 joint angles (6-32) and an auxiliary translation
(33-35) that only enters the 3D detection alignment term. The root rotation
pivots at the pelvis, so pure root translation shifts every joint rigidly.

Skinning blends per-joint unit dual quaternions, sign-corrected against each
vertex's dominant joint, then applies the normalized blend. Derivatives go
through the actual normalization (not the linear-blend shortcut), which is
what makes finite-difference checks of the silhouette Jacobian pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .template import Skeleton, SkinningWeights

N_POSE_PARAMS = 36
ROOT_ROT = slice(0, 3)
ROOT_TRANS = slice(3, 6)
THETA = slice(6, 33)
AUX_TRANS = slice(33, 36)

GIMBAL_EPS = 1e-6
DEGENERATE_BLEND_EPS = 1e-8


@dataclass
class PoseParams:
    root_rotation: np.ndarray
    root_translation: np.ndarray
    theta: np.ndarray
    aux_translation: np.ndarray

    def __post_init__(self):
        self.root_rotation = np.asarray(self.root_rotation, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.aux_translation = np.asarray(self.aux_translation, dtype=np.float64)
        if self.theta.shape != (27,):
            raise ValueError(f"expected 27 joint angles, got {self.theta.shape}")

    @classmethod
    def zero(cls) -> "PoseParams":
        return cls(np.zeros(3), np.zeros(3), np.zeros(27), np.zeros(3))

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "PoseParams":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (N_POSE_PARAMS,):
            raise ValueError(f"pose vector must have {N_POSE_PARAMS} entries")
        return cls(x[ROOT_ROT].copy(), x[ROOT_TRANS].copy(),
                   x[THETA].copy(), x[AUX_TRANS].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.root_rotation, self.root_translation,
                               self.theta, self.aux_translation])

    def copy(self) -> "PoseParams":
        return PoseParams.from_vector(self.to_vector())


def load_pose_trajectory(path) -> list:
    poses = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        poses.append(PoseParams.from_vector(np.array([float(v) for v in line.split()])))
    return poses


def save_pose_trajectory(path, poses) -> None:
    lines = [" ".join(f"{v:.12g}" for v in p.to_vector()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = q[..., 1:]
    w = q[..., 0:1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def pure_quat(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., 1:] = v
    return out


def quat_from_rotmat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, largest-pivot branch per matrix."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    Rb = R[None] if single else R
    n = Rb.shape[0]
    q = np.empty((n, 4))
    for i in range(n):
        m = Rb[i]
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > max(m[0, 0], m[1, 1], m[2, 2]):
            s = np.sqrt(tr + 1.0) * 2.0
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                    (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                    (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                    0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q[0] if single else q


def _quat_left_mat(p: np.ndarray) -> np.ndarray:
    """L with p (x) q = L(p) q; batched (...,4) -> (...,4,4)."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def _quat_right_mat(q: np.ndarray) -> np.ndarray:
    """R with p (x) q = R(q) p; batched (...,4) -> (...,4,4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


# ---------------------------------------------------------------------------
# forward kinematics

def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = axis
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])


@dataclass
class FkResult:
    rotations: np.ndarray         # (J,3,3)
    positions: np.ndarray         # (J,3)
    marker_positions: np.ndarray  # (4,3)
    rot_axes: np.ndarray          # (30,3) world axes: 3 euler then 27 angles
    rot_pivots: np.ndarray        # (30,3)
    joint_dqs: np.ndarray         # (J,8) unit dual quaternions
    gimbal: bool


def euler_xyz(angles: np.ndarray):
    a, b, c = angles
    rx = _axis_rotation(_EX, a)
    ry = _axis_rotation(_EY, b)
    rz = _axis_rotation(_EZ, c)
    return rx @ ry @ rz, rx, ry


def forward_kinematics(skeleton: Skeleton, pose: PoseParams) -> FkResult:
    j = skeleton.n_joints
    rot = np.empty((j, 3, 3))
    pos = np.empty((j, 3))
    axes = np.zeros((30, 3))
    pivots = np.zeros((30, 3))

    r_root, rx, ry = euler_xyz(pose.root_rotation)
    pelvis = pose.root_translation + skeleton.local_offsets[0]
    rot[0] = r_root
    pos[0] = pelvis
    axes[0] = _EX
    axes[1] = rx @ _EY
    axes[2] = rx @ ry @ _EZ
    pivots[0:3] = pelvis
    gimbal = abs(np.cos(pose.root_rotation[1])) < GIMBAL_EPS

    dofs_of = [[] for _ in range(j)]
    for k, jk in enumerate(skeleton.dof_joint):
        dofs_of[jk].append(k)

    for i in range(1, j):
        p = skeleton.parents[i]
        pos[i] = rot[p] @ skeleton.local_offsets[i] + pos[p]
        r = rot[p]
        for k in dofs_of[i]:
            axes[3 + k] = r @ skeleton.dof_axes[k]
            pivots[3 + k] = pos[i]
            r = r @ _axis_rotation(skeleton.dof_axes[k], pose.theta[k])
        rot[i] = r

    head = skeleton.head_index
    markers = skeleton.marker_offsets @ rot[head].T + pos[head]

    # rest -> posed transform per joint: x -> R x + (pos - R rest_pos), so
    # the zero pose is exactly the identity on the rest mesh
    trans = pos - np.einsum("jik,jk->ji", rot, skeleton.rest_positions())
    q_r = quat_from_rotmat(rot)
    q_d = 0.5 * quat_mul(pure_quat(trans), q_r)
    return FkResult(rot, pos, markers, axes, pivots,
                    np.concatenate([q_r, q_d], axis=-1), gimbal)


def joint_position_jacobian(skeleton: Skeleton, fk: FkResult) -> np.ndarray:
    """(J+4, 3, 36) derivative of joint and marker positions."""
    j = skeleton.n_joints
    pts = np.concatenate([fk.positions, fk.marker_positions])  # (J+4,3)
    out = np.zeros((j + 4, 3, N_POSE_PARAMS))

    # rotational params: cross(axis, point - pivot), masked by reach
    lever = pts[None, :, :] - fk.rot_pivots[:, None, :]          # (30,J+4,3)
    spin = np.cross(fk.rot_axes[:, None, :], lever)              # (30,J+4,3)
    moves = np.empty((30, j + 4), dtype=bool)
    moves[0:3] = True  # root rotation reaches every point (pelvis lever is 0)
    moves[3:, :j] = skeleton.dof_moves_position
    moves[3:, j:] = skeleton.dof_moves_frame[:, skeleton.head_index][:, None]
    spin = spin * moves[:, :, None]
    out[:, :, 0:3] = np.moveaxis(spin[0:3], 0, 2)
    out[:, :, 6:33] = np.moveaxis(spin[3:], 0, 2)
    out[:, :, 3:6] = np.eye(3)
    return out


def joint_dq_jacobian(skeleton: Skeleton, fk: FkResult) -> np.ndarray:
    """(J, 8, 36) derivative of per-joint unit dual quaternions."""
    j = skeleton.n_joints
    q_r = fk.joint_dqs[:, :4]
    out = np.zeros((j, 8, N_POSE_PARAMS))

    moves = np.empty((30, j), dtype=bool)
    moves[0:3] = True
    moves[3:] = skeleton.dof_moves_frame
    omega_q = pure_quat(fk.rot_axes)                     # (30,4)
    qr_dot = 0.5 * quat_mul(omega_q[:, None, :], q_r[None, :, :])   # (30,J,4)
    # translation of the rest->posed transform; rotating a frame about a
    # pivot spins this component exactly like a point sitting at it
    trans = fk.positions - np.einsum("jik,jk->ji", fk.rotations,
                                     skeleton.rest_positions())
    lever = trans[None, :, :] - fk.rot_pivots[:, None, :]
    t_dot = np.cross(fk.rot_axes[:, None, :], lever)                # (30,J,3)
    qd_dot = 0.5 * (quat_mul(pure_quat(t_dot), q_r[None, :, :])
                    + quat_mul(pure_quat(trans)[None, :, :], qr_dot))
    qr_dot = qr_dot * moves[:, :, None]
    qd_dot = qd_dot * moves[:, :, None]
    out[:, 0:4, 0:3] = np.moveaxis(qr_dot[0:3], 0, 2)
    out[:, 4:8, 0:3] = np.moveaxis(qd_dot[0:3], 0, 2)
    out[:, 0:4, 6:33] = np.moveaxis(qr_dot[3:], 0, 2)
    out[:, 4:8, 6:33] = np.moveaxis(qd_dot[3:], 0, 2)

    # root translation: q_r fixed, dual part picks up 0.5 (0,e) (x) q_r
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = 1.0
        out[:, 4:8, 3 + axis] = 0.5 * quat_mul(pure_quat(e)[None, :], q_r)
    return out


# ---------------------------------------------------------------------------
# dual-quaternion skinning

@dataclass
class SkinResult:
    positions: np.ndarray           # (M,3)
    rotations: np.ndarray           # (M,4) blended unit rotation quaternions
    jacobian: np.ndarray | None     # (M,3,36) or None
    degenerate: np.ndarray          # (M,) blend fell back to the dominant joint


def _blend(skinning: SkinningWeights, joint_dqs: np.ndarray, subset=None):
    idx = skinning.indices if subset is None else skinning.indices[subset]
    w = skinning.weights if subset is None else skinning.weights[subset]
    dom = skinning.dominant if subset is None else skinning.dominant[subset]
    safe = np.where(idx < 0, 0, idx)
    dqs = joint_dqs[safe]                                   # (M,4,8)
    dots = np.einsum("msk,mk->ms", dqs[:, :, :4], joint_dqs[dom, :4])
    sigma = np.where(dots < 0.0, -1.0, 1.0)
    coef = w * sigma                                        # (M,4)
    b = np.einsum("ms,msk->mk", coef, dqs)                  # (M,8)
    a = np.linalg.norm(b[:, :4], axis=1)
    degenerate = a < DEGENERATE_BLEND_EPS
    if degenerate.any():
        b[degenerate] = joint_dqs[dom[degenerate]]
        a[degenerate] = np.linalg.norm(b[degenerate, :4], axis=1)
    return b, a, coef, safe, dom, degenerate


def _transform_jacobian_wrt_blend(b, a, rest):
    """(M,3,8) derivative of the normalized-DQ point transform in the blend."""
    m = b.shape[0]
    c_r = b[:, :4] / a[:, None]
    c_d = b[:, 4:] / a[:, None]
    w = c_r[:, 0]
    u = c_r[:, 1:]

    # rotation part: d rot(c_r, v) / d c_r, shape (M,3,4)
    uv = np.einsum("mi,mi->m", u, rest)
    drot = np.empty((m, 3, 4))
    drot[:, :, 0] = 2.0 * (w[:, None] * rest + np.cross(u, rest))
    cross_v = np.zeros((m, 3, 3))
    cross_v[:, 0, 1] = -rest[:, 2]
    cross_v[:, 0, 2] = rest[:, 1]
    cross_v[:, 1, 0] = rest[:, 2]
    cross_v[:, 1, 2] = -rest[:, 0]
    cross_v[:, 2, 0] = -rest[:, 1]
    cross_v[:, 2, 1] = rest[:, 0]
    drot[:, :, 1:] = 2.0 * (
        np.einsum("mi,mj->mij", u, rest)
        - np.einsum("mi,mj->mij", rest, u)
        + uv[:, None, None] * np.eye(3)[None]
        - w[:, None, None] * cross_v
    )

    # translation part u_t = 2 vec(c_d (x) conj(c_r))
    conj = np.array([1.0, -1.0, -1.0, -1.0])
    rblk = 2.0 * _quat_right_mat(quat_conj(c_r))[:, 1:, :]          # du_t/dc_d
    lblk = 2.0 * (_quat_left_mat(c_d) * conj[None, None, :])[:, 1:, :]  # du_t/dc_r

    proj = (np.eye(4)[None] - np.einsum("mi,mj->mij", c_r, c_r)) / a[:, None, None]
    dcd_dbr = -np.einsum("mi,mj->mij", c_d, c_r) / a[:, None, None]
    dv_dbr = np.einsum("mij,mjk->mik", drot + lblk, proj) \
        + np.einsum("mij,mjk->mik", rblk, dcd_dbr)
    dv_dbd = rblk / a[:, None, None]
    return np.concatenate([dv_dbr, dv_dbd], axis=2)


def dq_transform_points(b: np.ndarray, a: np.ndarray, rest: np.ndarray) -> np.ndarray:
    c_r = b[:, :4] / a[:, None]
    c_d = b[:, 4:] / a[:, None]
    trans = 2.0 * quat_mul(c_d, quat_conj(c_r))[:, 1:]
    return quat_rotate(c_r, rest), trans


def skin_points(rest_points: np.ndarray, skinning: SkinningWeights,
                joint_dqs: np.ndarray, dq_jacobian: np.ndarray | None = None,
                subset=None) -> SkinResult:
    """Skin rest points; optionally return (M,3,36) pose Jacobians.

    `subset` restricts the computation to the given vertex indices;
    `rest_points` must already be gathered accordingly.
    """
    rest = np.asarray(rest_points, dtype=np.float64)
    b, a, coef, safe, dom, degenerate = _blend(skinning, joint_dqs, subset)
    rotated, trans = dq_transform_points(b, a, rest)
    positions = rotated + trans

    jac = None
    if dq_jacobian is not None:
        db_dp = np.einsum("ms,mskp->mkp", coef, dq_jacobian[safe])
        if degenerate.any():
            db_dp[degenerate] = dq_jacobian[dom[degenerate]]
        dv_db = _transform_jacobian_wrt_blend(b, a, rest)
        jac = np.einsum("mik,mkp->mip", dv_db, db_dp)
    return SkinResult(positions, b[:, :4] / a[:, None], jac, degenerate)


def blend_rotations(skinning: SkinningWeights, joint_dqs: np.ndarray) -> np.ndarray:
    """Per-vertex normalized blended rotation quaternions (N,4)."""
    b, a, _, _, _, _ = _blend(skinning, joint_dqs)
    return b[:, :4] / a[:, None]


def warp_displacements(d_prev: np.ndarray, rot_prev: np.ndarray,
                       rot_cur: np.ndarray) -> np.ndarray:
    """Re-express per-vertex displacement vectors under a new pose.

    Rotation-only: undo the previous pose's blended rotation, then apply the
    current one. Norms are preserved exactly and identical poses return the
    input unchanged.
    """
    d_hat = quat_rotate(quat_conj(rot_prev), d_prev)
    return quat_rotate(rot_cur, d_hat)
