"""Finite-difference validation of every analytic Jacobian block.

Each randomized configuration builds a small scene (posed actor, rendered
mask and color image, noisy detections), then compares the analytic
Jacobians of both solver stages against central differences, block by
block. Directional silhouette weighting is disabled so the compared
function is differentiable; anatomic-limit rows are exercised by pushing a
few joint angles past their bounds, far enough that the finite-difference
step stays on the violated branch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .actors import build_actor, suggest_camera
from .imageproc import DistanceField, gaussian_pyramid
from .nonrigid_stage import (NonrigidHyperparams, NonrigidProblem,
                             dense_jacobian, residual_vector, visible_vertices)
from .pose_stage import (FrameDetections, PoseHyperparams, PoseProblem,
                         extract_contour_vertices)
from .rasterizer import render_attributes, render_depth
from .skinning import PoseParams, forward_kinematics, skin_points


@dataclass
class BlockError:
    stage: str
    block: str
    rel_error: float
    analytic_norm: float
    fd_norm: float


@dataclass
class GradcheckConfig:
    n_configs: int = 25
    step: float = 1e-6
    tolerance: float = 1e-4
    seed: int = 2024
    image_size: int = 128


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)
    elapsed: float = 0.0
    n_configs: int = 0
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((b.rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(b.rel_error <= self.tolerance for b in self.blocks)

    def worst_by_block(self) -> dict:
        out = {}
        for b in self.blocks:
            key = f"{b.stage}/{b.block}"
            if key not in out or b.rel_error > out[key]:
                out[key] = b.rel_error
        return out


def _block_errors(stage, analytic, fd, blocks, out):
    for name, sl in blocks.items():
        ja = analytic[sl]
        jf = fd[sl]
        na, nf = np.linalg.norm(ja), np.linalg.norm(jf)
        denom = max(nf, 1e-12)
        rel = 0.0 if (na < 1e-12 and nf < 1e-12) else np.linalg.norm(ja - jf) / denom
        out.append(BlockError(stage, name, float(rel), float(na), float(nf)))


def _random_pose(skeleton, rng, scale=0.25, margin=0.05):
    lo = skeleton.theta_min + margin
    hi = skeleton.theta_max - margin
    mid = 0.5 * (lo + hi)
    span = 0.5 * (hi - lo)
    theta = mid + span * scale * rng.uniform(-1.0, 1.0, skeleton.n_dofs)
    pose = PoseParams(rng.uniform(-0.25, 0.25, 3), rng.uniform(-0.08, 0.08, 3),
                      theta, rng.uniform(-0.05, 0.05, 3))
    return pose


def _scene(actor, camera, rng):
    """Ground-truth render plus a slightly-off evaluation state."""
    mesh, skeleton, skinning = actor.mesh, actor.skeleton, actor.skinning
    gt_pose = _random_pose(skeleton, rng)
    disp = np.zeros_like(mesh.rest_vertices)
    skirt = mesh.vertex_labels == 1
    disp[skirt] = 0.03 * rng.standard_normal(3)
    fk = forward_kinematics(skeleton, gt_pose)
    gt_verts = skin_points(mesh.rest_vertices + disp, skinning,
                           fk.joint_dqs).positions
    image, zbuf = render_attributes(camera, gt_verts, mesh.triangles,
                                    mesh.vertex_colors, background=0.0)
    mask = np.isfinite(zbuf)
    dt_field = DistanceField(mask) if mask.any() else None

    pts2d = np.vstack([fk.positions, fk.marker_positions])
    pix, valid2d = camera.project_points(pts2d)
    det = FrameDetections(
        pix + rng.normal(0.0, 0.5, pix.shape),
        (fk.positions - fk.positions[0]) + rng.normal(0.0, 0.004,
                                                      fk.positions.shape),
        valid2d, np.ones(len(fk.positions), dtype=bool))
    return gt_pose, disp, gt_verts, image, dt_field, det, fk


def check_pose_stage(actor, camera, rng, cfg, out):
    mesh, skeleton, skinning = actor.mesh, actor.skeleton, actor.skinning
    gt_pose, disp, _, _, dt_field, det, _ = _scene(actor, camera, rng)

    x0 = gt_pose.to_vector() + rng.uniform(-0.08, 0.08, 36)
    # push three joint angles past their limits onto the penalized branch
    push = rng.choice(skeleton.n_dofs, size=3, replace=False)
    for k in push:
        if rng.random() < 0.5:
            x0[6 + k] = skeleton.theta_max[k] + 0.1
        else:
            x0[6 + k] = skeleton.theta_min[k] - 0.1

    displaced = mesh.rest_vertices + disp
    fk0 = forward_kinematics(skeleton, PoseParams.from_vector(x0))
    model = skin_points(displaced, skinning, fk0.joint_dqs).positions
    contour = extract_contour_vertices(model, mesh, camera)
    prev = forward_kinematics(skeleton, _random_pose(skeleton, rng)).positions
    problem = PoseProblem(skeleton, skinning, camera, det, dt_field, contour,
                          displaced[contour.indices], PoseHyperparams(),
                          prev_positions=prev, directional=False)
    ev = problem.evaluate(x0)
    h = cfg.step
    fd = np.zeros_like(ev.jacobian)
    for k in range(36):
        dx = np.zeros(36)
        dx[k] = h
        rp = problem.evaluate(x0 + dx, with_jacobian=False).residuals
        rm = problem.evaluate(x0 - dx, with_jacobian=False).residuals
        fd[:, k] = (rp - rm) / (2.0 * h)
    _block_errors("pose", ev.jacobian, fd, problem.blocks, out)


def check_nonrigid_stage(actor, camera, rng, cfg, out, level):
    mesh, skeleton, skinning = actor.mesh, actor.skeleton, actor.skinning
    gt_pose, disp, gt_verts, image, dt_field, det, _ = _scene(actor, camera, rng)

    pose = PoseParams.from_vector(gt_pose.to_vector() + rng.uniform(-0.04, 0.04, 36))
    fk = forward_kinematics(skeleton, pose)
    skinned = skin_points(mesh.rest_vertices, skinning, fk.joint_dqs).positions
    v0 = skin_points(mesh.rest_vertices + disp, skinning,
                     fk.joint_dqs).positions
    v0 = v0 + 0.002 * rng.standard_normal(v0.shape)

    zbuf = render_depth(camera, v0, mesh.triangles)
    visible = np.flatnonzero(visible_vertices(v0, mesh, camera, zbuf))
    boundary = extract_contour_vertices(v0, mesh, camera, zbuf)
    hyper = NonrigidHyperparams()
    problem = NonrigidProblem(
        mesh, camera, hyper, skinned, gaussian_pyramid(image, hyper.pyramid_kernels),
        dt_field, visible, boundary,
        np.ones(len(boundary.indices), dtype=bool),
        prev=v0 + 0.004 * rng.standard_normal(v0.shape),
        prev2=v0 + 0.006 * rng.standard_normal(v0.shape),
        directional=False)

    ev = problem.evaluate(v0, level)
    analytic = dense_jacobian(problem, ev)
    h = cfg.step
    n = mesh.n_vertices
    fd = np.zeros_like(analytic)
    flat = v0.ravel()
    for k in range(3 * n):
        dx = np.zeros(3 * n)
        dx[k] = h
        rp = residual_vector(problem, problem.evaluate((flat + dx).reshape(n, 3), level))
        rm = residual_vector(problem, problem.evaluate((flat - dx).reshape(n, 3), level))
        fd[:, k] = (rp - rm) / (2.0 * h)

    p = len(visible)
    b = len(boundary.indices)
    m = len(mesh.edge_src)
    blocks = {
        "photometric": slice(0, 3 * p),
        "silhouette": slice(3 * p, 3 * p + b),
        "smooth": slice(3 * p + b, 3 * p + b + 3 * m),
        "edge": slice(3 * p + b + 3 * m, 3 * p + b + 4 * m),
        "velocity": slice(3 * p + b + 4 * m, 3 * p + b + 4 * m + 3 * n),
        "acceleration": slice(3 * p + b + 4 * m + 3 * n,
                              3 * p + b + 4 * m + 6 * n),
    }
    _block_errors("nonrigid", analytic, fd, blocks, out)


def run_gradcheck(cfg: GradcheckConfig | None = None) -> GradcheckReport:
    cfg = cfg or GradcheckConfig()
    t0 = time.perf_counter()
    actor = build_actor("tiny", with_skirt=True, with_limbs=False)
    camera = suggest_camera(cfg.image_size, cfg.image_size)
    report = GradcheckReport(tolerance=cfg.tolerance, n_configs=cfg.n_configs)
    for c in range(cfg.n_configs):
        rng = np.random.default_rng(cfg.seed + c)
        check_pose_stage(actor, camera, rng, cfg, report.blocks)
        check_nonrigid_stage(actor, camera, rng, cfg, report.blocks, level=c % 3)
    report.elapsed = time.perf_counter() - t0
    return report
