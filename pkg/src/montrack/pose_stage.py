"""Stage I: skeletal pose estimation over the 36-entry pose vector.

Per frame, six Gauss-Newton steps minimize a sum of residual blocks:
2D joint/face-landmark reprojection, 3D joint alignment (with a free
auxiliary translation absorbing the detections' unknown global offset),
dense silhouette alignment of the model's occluding-contour vertices against
a distance transform, temporal joint smoothness and a one-sided joint-limit
barrier. The contour vertex set is extracted once per frame from the
displaced skinned model and kept fixed across the steps; a step that would
increase the energy is halved up to three times, then rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .imageproc import INTERFACE_OFFSET, RAMP_HALF, DistanceField
from .rasterizer import render_depth
from .solvers import DenseNormalSystem, dense_solve
from .skinning import (N_POSE_PARAMS, FkResult, PoseParams, forward_kinematics,
                       joint_dq_jacobian, joint_position_jacobian, skin_points)
from .template import Skeleton, SkinningWeights, TemplateMesh

TEMPORAL_GROUP_WEIGHTS = {
    "torso": 2.5, "head": 2.5, "shoulder": 2.0,
    "elbow": 1.5, "knee": 1.5, "hand": 1.0, "foot": 1.0,
}

VISIBILITY_DEPTH_TOL = 0.01  # fraction of the vertex depth


@dataclass
class PoseHyperparams:
    lambda_2d: float = 460.0
    lambda_3d: float = 28.0
    lambda_sil: float = 200.0
    lambda_temporal: float = 1.5
    lambda_anatomic: float = 1.0e6
    face_weight: float = 0.326
    temporal_group_weights: dict = field(
        default_factory=lambda: dict(TEMPORAL_GROUP_WEIGHTS))
    gn_iterations: int = 6
    max_halvings: int = 3


@dataclass
class FrameDetections:
    joints2d: np.ndarray  # (J+4,2): joints then the 4 face landmarks
    joints3d: np.ndarray  # (J,3) root-relative
    valid2d: np.ndarray   # (J+4,) bool
    valid3d: np.ndarray   # (J,) bool

    def __post_init__(self):
        self.joints2d = np.asarray(self.joints2d, dtype=np.float64)
        self.joints3d = np.asarray(self.joints3d, dtype=np.float64)
        self.valid2d = np.asarray(self.valid2d, dtype=bool)
        self.valid3d = np.asarray(self.valid3d, dtype=bool)
        if self.joints2d.shape[0] != self.joints3d.shape[0] + 4:
            raise ValueError("2D detections must cover the joints plus 4 landmarks")


def load_detections(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(FrameDetections(
            np.array(rec["joints2d"]), np.array(rec["joints3d"]),
            np.array(rec["valid2d"]), np.array(rec["valid3d"])))
    return out


def save_detections(path, detections) -> None:
    lines = []
    for i, d in enumerate(detections):
        lines.append(json.dumps({
            "frame": i,
            "joints2d": d.joints2d.tolist(),
            "joints3d": d.joints3d.tolist(),
            "valid2d": d.valid2d.astype(int).tolist(),
            "valid3d": d.valid3d.astype(int).tolist(),
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def rescale_detections(joints3d: np.ndarray, skeleton: Skeleton,
                       valid3d: np.ndarray | None = None):
    """Rebuild root-relative 3D detections with the skeleton's bone lengths.

    Walks root-outward keeping each detected bone direction but replacing its
    length; zero-length or invalid bones fall back to the rest direction.
    Returns (positions, fallback_joint_indices).
    """
    joints3d = np.asarray(joints3d, dtype=np.float64)
    rest = skeleton.rest_positions()
    lengths = skeleton.bone_lengths()
    out = np.zeros_like(joints3d)
    out[0] = joints3d[0]
    fallback = []
    for i in range(1, skeleton.n_joints):
        p = skeleton.parents[i]
        d = joints3d[i] - joints3d[p]
        n = np.linalg.norm(d)
        usable = n > 1e-9 and (valid3d is None or (valid3d[i] and valid3d[p]))
        if not usable:
            d = rest[i] - rest[p]
            n = np.linalg.norm(d)
            fallback.append(i)
        out[i] = out[p] + lengths[i] * d / n
    return out, fallback


def extrapolate_pose(prev: PoseParams, prev2: PoseParams | None,
                     skeleton: Skeleton) -> PoseParams:
    """Constant-velocity init: prev + (prev - prev2), joint angles clamped."""
    if prev2 is None:
        pose = prev.copy()
    else:
        pose = PoseParams.from_vector(2.0 * prev.to_vector() - prev2.to_vector())
    pose.theta = skeleton.clamp_theta(pose.theta)
    return pose


# ---------------------------------------------------------------------------
# occluding contour

@dataclass
class ContourVertexSet:
    indices: np.ndarray    # (B,)
    normals2d: np.ndarray  # (B,2) outward image-plane normals


def vertex_normals(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (not normalized against zero-area)."""
    p = verts[tris]
    tn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    out = np.zeros_like(verts)
    for k in range(3):
        np.add.at(out, tris[:, k], tn)
    norms = np.linalg.norm(out, axis=1)
    norms[norms < 1e-12] = 1.0
    return out / norms[:, None]


def extract_contour_vertices(verts: np.ndarray, mesh: TemplateMesh,
                             camera: CameraIntrinsics,
                             zbuf: np.ndarray | None = None) -> ContourVertexSet:
    """Visible vertices on front/back facing transitions (or open boundaries).

    Facing uses the geometric triangle normal against the view ray; the
    returned 2D normals are the projections of the vertex normals into the
    image plane.
    """
    tris = mesh.triangles
    p = verts[tris]
    tri_n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    centroid = p.mean(axis=1)
    front = np.einsum("ti,ti->t", tri_n, centroid) < 0.0

    ta, tb = mesh.edge_tris[:, 0], mesh.edge_tris[:, 1]
    boundary = tb < 0
    sil_edge = np.where(boundary, front[ta], front[ta] != front[np.maximum(tb, 0)])
    cand = np.unique(mesh.edges[sil_edge])
    if cand.size == 0:
        return ContourVertexSet(cand, np.zeros((0, 2)))

    if zbuf is None:
        zbuf = render_depth(camera, verts, tris)
    pix, valid = camera.project_points(verts[cand])
    z = verts[cand, 2]
    xi = np.clip(np.round(pix[:, 0]).astype(int), 0, camera.width - 1)
    yi = np.clip(np.round(pix[:, 1]).astype(int), 0, camera.height - 1)
    in_img = ((pix[:, 0] >= -0.5) & (pix[:, 0] <= camera.width - 0.5)
              & (pix[:, 1] >= -0.5) & (pix[:, 1] <= camera.height - 0.5))
    visible = valid & in_img & (z <= zbuf[yi, xi] + VISIBILITY_DEPTH_TOL * z)
    cand = cand[visible]

    n3d = vertex_normals(verts, tris)[cand]
    jac, _ = camera.projection_jacobians(verts[cand])
    n2d = np.einsum("bij,bj->bi", jac, n3d)
    norms = np.linalg.norm(n2d, axis=1)
    safe = norms > 1e-12
    n2d[safe] /= norms[safe, None]
    n2d[~safe] = 0.0
    return ContourVertexSet(cand, n2d)


def directional_weights(normals2d: np.ndarray, dt_grad: np.ndarray) -> np.ndarray:
    """Contour-side sign b per vertex: -1 when the outward normal opposes the
    step direction z = -grad(DT), +1 otherwise."""
    z = -dt_grad
    return np.where(np.einsum("bi,bi->b", normals2d, z) < 0.0, -1.0, 1.0)


def contour_side_signs(dt_field: DistanceField, normals2d: np.ndarray,
                       pix: np.ndarray) -> np.ndarray:
    """Per-row step signs choosing which silhouette side a vertex descends to.

    A vertex outside the mask always walks down the distance field onto the
    nearest contour piece (+1).  Inside the mask the nearest piece can be the
    wrong one: when the vertex normal opposes z, the direction toward that
    piece, the piece faces the opposite way and the row is flipped (-1) so
    the step pushes the vertex away from it rather than onto it.  A normal
    that agrees with z marks the piece as correctly oriented and the vertex
    descends normally.
    """
    z = -dt_field.side_direction(pix)
    signs = directional_weights(normals2d, z)
    return np.where(dt_field.inside(pix), signs, 1.0)


def outer_rim_mask(verts: np.ndarray, indices: np.ndarray,
                   camera: CameraIntrinsics, zbuf: np.ndarray,
                   min_thickness: float = 12.0,
                   max_distance: float = 1.5) -> np.ndarray:
    """True where a contour vertex projects onto the model's own outer
    silhouette (within `max_distance` pixels of it).

    Occluding-contour vertices from self-overlap (an arm crossing the torso)
    lie deep inside the rendered mask; their distance-transform rows would
    chase an unrelated piece of the observed silhouette, so callers zero them.
    The default `max_distance` admits every true rim vertex regardless of how
    the tessellation happens to slice the pixel grid — a tighter cut keeps a
    spatially correlated subset, and a one-sided row sample biases the pose —
    while still rejecting interior contours, which sit several pixels deep.
    Callers that need the surviving rows to read exactly zero on their own
    mask can pass the flat-zone width of the interface ramp instead.

    With `min_thickness` set, rows on structures thinner than that many
    pixels are dropped as well: a vertex on a limb a few pixels wide crosses
    the whole limb under a modest pose error, so its nearest contour piece —
    and with it the sign of its pull — is unstable. Thickness is measured as
    twice the deepest interior distance-transform reading in a pixel disk
    around the vertex (probing along the 2D vertex normal is unreliable: on a
    coarse tessellation the projected normal can run almost tangent to the
    contour, so a walk along it never leaves the rim).
    """
    mask = np.isfinite(zbuf)
    if indices.size == 0 or not mask.any():
        return np.zeros(indices.shape[0], dtype=bool)
    pix, valid = camera.project_points(verts[indices])
    own = DistanceField(mask)
    val, clamped = own.sample_value(pix)
    keep = valid & ~clamped & (val <= max_distance)
    if min_thickness > 0.0 and keep.any():
        # 16 directions keep the worst-case probe misalignment at 11.25 deg;
        # with 8 a vertex on a circle exactly min_thickness wide can read a
        # hair under the cutoff and drop out on angular quantization alone
        rmax = int(np.ceil(min_thickness / 2.0)) + 2
        ang = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
        offs = (np.stack([np.cos(ang), np.sin(ang)], axis=1)[:, None, :]
                * np.arange(1, rmax + 1, dtype=np.float64)[None, :, None])
        probe = (pix[None, None, :, :] + offs[:, :, None, :]).reshape(-1, 2)
        d, _ = own.sample_value(probe)
        inside = own.inside(probe)
        depth = np.where(inside, d, 0.0).reshape(-1, len(pix)).max(axis=0)
        keep &= 2.0 * depth >= min_thickness
    return keep


# ---------------------------------------------------------------------------
# residual assembly

@dataclass
class PoseEval:
    residuals: np.ndarray   # (R,)
    jacobian: np.ndarray | None  # (R,36)
    blocks: dict            # name -> slice into the rows
    energies: dict          # name -> sum of squares
    behind_camera: int
    gimbal: bool

    @property
    def energy(self) -> float:
        return float(np.sum(self.residuals ** 2))


@dataclass
class PoseProblem:
    """Per-frame data for Stage I, fixed across the Gauss-Newton steps."""
    skeleton: Skeleton
    skinning: SkinningWeights
    camera: CameraIntrinsics
    detections: FrameDetections       # joints3d already bone-length rescaled
    dt_field: DistanceField | None
    contour: ContourVertexSet
    contour_rest: np.ndarray          # (B,3) displacement-corrected rest points
    hyper: PoseHyperparams
    prev_positions: np.ndarray | None = None  # (J,3) solved joints at t-1
    directional: bool = True
    contour_enabled: np.ndarray | None = None  # (B,) outer-rim row mask

    def __post_init__(self):
        j = self.skeleton.n_joints
        b = len(self.contour.indices)
        n2 = 2 * (j + 4)
        n3 = 3 * j
        nt = 3 * j if self.prev_positions is not None else 0
        self.blocks = {
            "detection2d": slice(0, n2),
            "detection3d": slice(n2, n2 + n3),
            "silhouette": slice(n2 + n3, n2 + n3 + b),
            "temporal": slice(n2 + n3 + b, n2 + n3 + b + nt),
            "anatomic": slice(n2 + n3 + b + nt, n2 + n3 + b + nt + 27),
        }
        self.n_rows = n2 + n3 + b + nt + 27
        self.temporal_weights = np.array([
            self.hyper.temporal_group_weights[g]
            for g in self.skeleton.temporal_groups])
        self.lambda2d_rows = np.full(j + 4, self.hyper.lambda_2d)
        self.lambda2d_rows[j:] *= self.hyper.face_weight

    def evaluate(self, x: np.ndarray, with_jacobian: bool = True) -> PoseEval:
        sk = self.skeleton
        cam = self.camera
        hp = self.hyper
        j = sk.n_joints
        pose = PoseParams.from_vector(x)
        fk = forward_kinematics(sk, pose)
        jp = joint_position_jacobian(sk, fk) if with_jacobian else None

        F = np.zeros(self.n_rows)
        J = np.zeros((self.n_rows, N_POSE_PARAMS)) if with_jacobian else None
        behind = 0

        pts = np.concatenate([fk.positions, fk.marker_positions])
        pix, valid_z = cam.project_points(pts)
        behind += int(np.sum(~valid_z))
        dpi, _ = cam.projection_jacobians(pts)

        # 2D detections
        s = self.blocks["detection2d"]
        w2 = np.sqrt(self.lambda2d_rows) * self.detections.valid2d * valid_z
        r2 = (pix - self.detections.joints2d) * w2[:, None]
        F[s] = r2.reshape(-1)
        if with_jacobian:
            J[s] = (np.einsum("nij,njp->nip", dpi, jp)
                    * w2[:, None, None]).reshape(-1, N_POSE_PARAMS)

        # 3D detections
        s = self.blocks["detection3d"]
        w3 = np.sqrt(hp.lambda_3d) * self.detections.valid3d
        r3 = (fk.positions - self.detections.joints3d
              - pose.aux_translation) * w3[:, None]
        F[s] = r3.reshape(-1)
        if with_jacobian:
            j3 = jp[:j] - np.pad(np.tile(np.eye(3), (j, 1, 1)),
                                 ((0, 0), (0, 0), (33, 0)))[:, :, :N_POSE_PARAMS]
            J[s] = (j3 * w3[:, None, None]).reshape(-1, N_POSE_PARAMS)

        # silhouette
        s = self.blocks["silhouette"]
        bsz = len(self.contour.indices)
        if bsz and self.dt_field is not None:
            dqj = joint_dq_jacobian(sk, fk) if with_jacobian else None
            skin = skin_points(self.contour_rest, self.skinning, fk.joint_dqs,
                               dqj, subset=self.contour.indices)
            cpix, cvalid = cam.project_points(skin.positions)
            behind += int(np.sum(~cvalid))
            val, grad, clamped = self.dt_field.sample_residual(cpix)
            ok = cvalid & ~clamped
            if self.contour_enabled is not None:
                ok = ok & self.contour_enabled
            wsil = np.sqrt(hp.lambda_sil) * ok
            F[s] = val * wsil
            if with_jacobian:
                cdpi, _ = cam.projection_jacobians(skin.positions)
                rows = np.einsum("bi,bij,bjp->bp", grad, cdpi, skin.jacobian)
                if self.directional:
                    bdir = contour_side_signs(self.dt_field,
                                              self.contour.normals2d, cpix)
                else:
                    bdir = 1.0
                J[s] = rows * (wsil * bdir)[:, None]

        # temporal
        if self.prev_positions is not None:
            s = self.blocks["temporal"]
            wt = np.sqrt(hp.lambda_temporal * self.temporal_weights)
            F[s] = ((fk.positions - self.prev_positions) * wt[:, None]).reshape(-1)
            if with_jacobian:
                J[s] = (jp[:j] * wt[:, None, None]).reshape(-1, N_POSE_PARAMS)

        # anatomic joint-limit barrier, one-sided quadratic
        s = self.blocks["anatomic"]
        theta = pose.theta
        above = theta > sk.theta_max
        below = theta < sk.theta_min
        wa = np.sqrt(hp.lambda_anatomic)
        F[s] = wa * (np.where(above, theta - sk.theta_max, 0.0)
                     + np.where(below, sk.theta_min - theta, 0.0))
        if with_jacobian:
            diag = wa * (above.astype(np.float64) - below.astype(np.float64))
            J[s.start + np.arange(27), 6 + np.arange(27)] = diag

        energies = {name: float(np.sum(F[sl] ** 2))
                    for name, sl in self.blocks.items()}
        return PoseEval(F, J, self.blocks, energies, behind, fk.gimbal)


@dataclass
class PoseIterationLog:
    energy_before: float
    energy_after: float
    terms: dict
    step_norm: float
    halvings: int
    rejected: bool
    damped: bool


@dataclass
class PoseStageReport:
    iterations: list = field(default_factory=list)
    behind_camera: int = 0
    gimbal: bool = False

    @property
    def final_energy(self) -> float:
        return self.iterations[-1].energy_after if self.iterations else float("nan")


def solve_pose(problem: PoseProblem, init: PoseParams):
    """Damped Gauss-Newton with step halving; fixed iteration budget."""
    x = init.to_vector()
    report = PoseStageReport()
    for _ in range(problem.hyper.gn_iterations):
        ev = problem.evaluate(x)
        report.behind_camera += ev.behind_camera
        report.gimbal = report.gimbal or ev.gimbal
        a = ev.jacobian.T @ ev.jacobian
        a = 0.5 * (a + a.T)
        rhs = -(ev.jacobian.T @ ev.residuals)
        delta, dinfo = dense_solve(DenseNormalSystem(a, rhs))
        e0 = ev.energy
        halvings = 0
        rejected = False
        step = delta
        while True:
            e1 = problem.evaluate(x + step, with_jacobian=False).energy
            if e1 <= e0:
                x = x + step
                break
            if halvings >= problem.hyper.max_halvings:
                rejected = True
                e1 = e0
                break
            step = 0.5 * step
            halvings += 1
        report.iterations.append(PoseIterationLog(
            e0, e1, ev.energies, float(np.linalg.norm(step)), halvings,
            rejected, dinfo.damped))
    return PoseParams.from_vector(x), report
