"""Pinhole camera model and calibration file I/O.

Camera space and world space coincide: x right, y down, z forward (into the
image). Pixel coordinates are (x, y) with the origin at the center of the
top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def project(self, point) -> np.ndarray:
        """Project a single 3D point to pixel coordinates. Raises on z <= 0."""
        point = np.asarray(point, dtype=np.float64)
        if point[2] <= 0.0:
            raise BehindCameraError(f"point has non-positive depth z={point[2]}")
        return np.array([
            self.fx * point[0] / point[2] + self.cx,
            self.fy * point[1] / point[2] + self.cy,
        ])

    def project_points(self, points: np.ndarray, eps: float = 1e-9):
        """Vectorized projection.

        Returns (pixels (N,2), valid (N,)) where valid is False for points at
        or behind the camera plane; their pixel rows are zeroed.
        """
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        valid = z > eps
        zs = np.where(valid, z, 1.0)
        pix = np.empty(points.shape[:-1] + (2,))
        pix[..., 0] = self.fx * points[..., 0] / zs + self.cx
        pix[..., 1] = self.fy * points[..., 1] / zs + self.cy
        pix[~valid] = 0.0
        return pix, valid

    def projection_jacobian(self, point) -> np.ndarray:
        """2x3 Jacobian of project() at a single point."""
        x, y, z = np.asarray(point, dtype=np.float64)
        if z <= 0.0:
            raise BehindCameraError(f"point has non-positive depth z={z}")
        return np.array([
            [self.fx / z, 0.0, -self.fx * x / (z * z)],
            [0.0, self.fy / z, -self.fy * y / (z * z)],
        ])

    def projection_jacobians(self, points: np.ndarray, eps: float = 1e-9):
        """Vectorized (N,2,3) Jacobians; rows for invalid (z<=eps) points are zero."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        valid = z > eps
        zs = np.where(valid, z, 1.0)
        out = np.zeros(points.shape[:-1] + (2, 3))
        out[..., 0, 0] = self.fx / zs
        out[..., 0, 2] = -self.fx * points[..., 0] / (zs * zs)
        out[..., 1, 1] = self.fy / zs
        out[..., 1, 2] = -self.fy * points[..., 1] / (zs * zs)
        out[~valid] = 0.0
        return out, valid

    def backproject(self, pix, depth: float) -> np.ndarray:
        """Invert project() at a known depth."""
        return np.array([
            (pix[0] - self.cx) * depth / self.fx,
            (pix[1] - self.cy) * depth / self.fy,
            depth,
        ])


def load_calibration(path) -> CameraIntrinsics:
    """Read 'fx fy cx cy width height' from a one-line text file."""
    text = Path(path).read_text().strip()
    fields = text.split()
    if len(fields) != 6:
        raise ValueError(f"calibration file {path} must hold 6 values, got {len(fields)}")
    fx, fy, cx, cy = (float(v) for v in fields[:4])
    width, height = int(fields[4]), int(fields[5])
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def save_calibration(path, cam: CameraIntrinsics) -> None:
    Path(path).write_text(f"{cam.fx} {cam.fy} {cam.cx} {cam.cy} {cam.width} {cam.height}\n")
