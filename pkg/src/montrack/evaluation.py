"""Compare a tracking run against the ground truth of a synthetic sequence."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import aligned_joint_error, iou, sequence_errors
from .pipeline import load_sequence_inputs
from .rasterizer import render_mask
from .skinning import forward_kinematics, load_pose_trajectory
from .synthetic import load_ground_truth


def evaluate_tracking(sequence_dir, result_dir, use_smoothed: bool = True) -> dict:
    gt_verts, gt_joints = load_ground_truth(sequence_dir)
    inputs = load_sequence_inputs(sequence_dir)
    mesh, skeleton = inputs.actor.mesh, inputs.actor.skeleton

    data = np.load(Path(result_dir) / "surfaces.npz")
    pred = data["vertices_smoothed" if use_smoothed else "vertices"]
    pose_file = "poses_smoothed.txt" if use_smoothed else "poses.txt"
    poses = load_pose_trajectory(Path(result_dir) / pose_file)
    f = min(len(pred), len(gt_verts))

    class_indices = {f"class{c}": np.flatnonzero(mesh.vertex_labels == c)
                     for c in np.unique(mesh.vertex_labels)}
    out = sequence_errors(pred[:f], gt_verts[:f], class_indices)

    joint_errs, ious = [], []
    for i in range(f):
        fk = forward_kinematics(skeleton, poses[i])
        joint_errs.append(aligned_joint_error(fk.positions, gt_joints[i]))
        pred_mask = render_mask(inputs.camera, pred[i], mesh.triangles)
        ious.append(iou(pred_mask, inputs.masks[i]))
    out["joint_error"] = float(np.mean(joint_errs))
    out["mean_iou"] = float(np.mean(ious))
    out["n_frames"] = f
    return out
