"""Evaluation metrics: mask overlap, surface error, and aligned joint error."""

from __future__ import annotations

import numpy as np


def iou(mask_a: np.ndarray, mask_b: np.ndarray, return_empty_flag: bool = False):
    """Intersection over union of two boolean masks.

    Two empty masks count as perfect agreement (1.0); the optional flag
    reports that degenerate case.
    """
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    union = np.sum(a | b)
    empty = union == 0
    value = 1.0 if empty else float(np.sum(a & b) / union)
    if return_empty_flag:
        return value, bool(empty)
    return value


def mean_vertex_error(pred: np.ndarray, gt: np.ndarray,
                      indices: np.ndarray | None = None,
                      center: bool = True) -> float:
    """Mean per-vertex distance, after removing each cloud's mean position.

    Centering (on the full clouds, before any index selection) factors out a
    global placement offset so the number reflects surface shape error.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("vertex array shapes differ")
    if center:
        pred = pred - pred.mean(axis=0)
        gt = gt - gt.mean(axis=0)
    if indices is not None:
        pred = pred[indices]
        gt = gt[indices]
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray,
                      with_scaling: bool = True):
    """Least-squares similarity transform: dst ~ scale * R @ src + t.

    Closed-form over the cross-covariance SVD with the determinant-sign
    correction, so R is always a proper rotation. Needs at least 3 points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2:
        raise ValueError("point sets must share shape (N,D)")
    n, d = src.shape
    if n < 3:
        raise ValueError("need at least 3 points to align")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    u, s, vt = np.linalg.svd(cov)
    sign = np.ones(d)
    if np.linalg.det(u @ vt) < 0.0:
        sign[-1] = -1.0
    rot = (u * sign) @ vt
    if with_scaling:
        var_s = np.mean(np.sum(xs ** 2, axis=1))
        scale = float(np.sum(s * sign) / var_s) if var_s > 0.0 else 1.0
    else:
        scale = 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def aligned_joint_error(pred: np.ndarray, gt: np.ndarray,
                        with_scaling: bool = True) -> float:
    """Mean joint distance after a similarity (Procrustes) alignment."""
    scale, rot, t = umeyama_alignment(pred, gt, with_scaling)
    aligned = scale * pred @ rot.T + t
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)))


def max_angle_error(theta_pred: np.ndarray, theta_gt: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(theta_pred) - np.asarray(theta_gt))))


def sequence_errors(pred_vertices: np.ndarray, gt_vertices: np.ndarray,
                    class_indices: dict | None = None) -> dict:
    """Per-sequence mean surface errors: overall plus optional per-class."""
    pred_vertices = np.asarray(pred_vertices)
    gt_vertices = np.asarray(gt_vertices)
    per_frame = [mean_vertex_error(p, g)
                 for p, g in zip(pred_vertices, gt_vertices)]
    out = {"vertex_error": float(np.mean(per_frame)),
           "vertex_error_per_frame": per_frame}
    if class_indices:
        for name, idx in class_indices.items():
            vals = [mean_vertex_error(p, g, indices=idx)
                    for p, g in zip(pred_vertices, gt_vertices)]
            out[f"vertex_error_{name}"] = float(np.mean(vals))
    return out
