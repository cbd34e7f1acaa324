"""Depth-buffered triangle rasterizer used everywhere a model footprint is needed.

Mask rendering, visibility tests, body-part maps, synthetic color frames and
IoU evaluation all share these kernels so their pixel semantics agree. Pixels
are sampled at integer centers; barycentric interpolation is affine in screen
space. Triangles containing a vertex at or behind the camera plane are
skipped.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .camera import CameraIntrinsics


@njit(cache=True)
def _raster_core(pix, depth, tris, attrs, ids, zbuf, abuf, ibuf, mode):
    # mode 0: depth only; 1: also interpolate attrs; 2: also pick id of the
    # max-barycentric vertex (nearest-vertex attribute for label images).
    h, w = zbuf.shape
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        if depth[i0] <= 0.0 or depth[i1] <= 0.0 or depth[i2] <= 0.0:
            continue
        x0, y0 = pix[i0, 0], pix[i0, 1]
        x1, y1 = pix[i1, 0], pix[i1, 1]
        x2, y2 = pix[i2, 0], pix[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area > -1e-12 and area < 1e-12:
            continue
        xmin = int(np.floor(min(x0, min(x1, x2))))
        xmax = int(np.ceil(max(x0, max(x1, x2))))
        ymin = int(np.floor(min(y0, min(y1, y2))))
        ymax = int(np.ceil(max(y0, max(y1, y2))))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > w - 1:
            xmax = w - 1
        if ymax > h - 1:
            ymax = h - 1
        inv = 1.0 / area
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                # signed sub-areas; dividing by the signed total makes the
                # inside test orientation-independent
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv
                w1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    if mode == 1:
                        for k in range(attrs.shape[1]):
                            abuf[py, px, k] = (w0 * attrs[i0, k] + w1 * attrs[i1, k]
                                               + w2 * attrs[i2, k])
                    elif mode == 2:
                        if w0 >= w1 and w0 >= w2:
                            ibuf[py, px] = ids[i0]
                        elif w1 >= w2:
                            ibuf[py, px] = ids[i1]
                        else:
                            ibuf[py, px] = ids[i2]


def _project_for_raster(cam: CameraIntrinsics, verts: np.ndarray):
    pix, valid = cam.project_points(verts)
    depth = np.where(valid, verts[:, 2], -1.0)
    return np.ascontiguousarray(pix), np.ascontiguousarray(depth)


def render_depth(cam: CameraIntrinsics, verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Depth buffer (H,W), np.inf where nothing is drawn."""
    pix, depth = _project_for_raster(cam, verts)
    zbuf = np.full((cam.height, cam.width), np.inf)
    dummy_a = np.zeros((1, 1))
    dummy_i = np.zeros(1, dtype=np.int64)
    dummy_ib = np.zeros((1, 1), dtype=np.int64)
    _raster_core(pix, depth, np.ascontiguousarray(tris, dtype=np.int64),
                 dummy_a, dummy_i, zbuf, np.zeros((1, 1, 1)), dummy_ib, 0)
    return zbuf


def render_mask(cam: CameraIntrinsics, verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Boolean coverage mask (H,W)."""
    return np.isfinite(render_depth(cam, verts, tris))


def render_attributes(cam: CameraIntrinsics, verts: np.ndarray, tris: np.ndarray,
                      attrs: np.ndarray, background: float = 0.0):
    """Barycentric-interpolated per-vertex attributes. Returns (image (H,W,K), zbuf)."""
    pix, depth = _project_for_raster(cam, verts)
    attrs = np.ascontiguousarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    zbuf = np.full((cam.height, cam.width), np.inf)
    abuf = np.full((cam.height, cam.width, attrs.shape[1]), background)
    dummy_i = np.zeros(1, dtype=np.int64)
    dummy_ib = np.zeros((1, 1), dtype=np.int64)
    _raster_core(pix, depth, np.ascontiguousarray(tris, dtype=np.int64),
                 attrs, dummy_i, zbuf, abuf, dummy_ib, 1)
    return abuf, zbuf


def render_vertex_ids(cam: CameraIntrinsics, verts: np.ndarray, tris: np.ndarray,
                      ids: np.ndarray, background: int = -1):
    """Nearest-vertex id image (integer labels, e.g. body parts). Returns (ids, zbuf)."""
    pix, depth = _project_for_raster(cam, verts)
    zbuf = np.full((cam.height, cam.width), np.inf)
    ibuf = np.full((cam.height, cam.width), background, dtype=np.int64)
    dummy_a = np.zeros((1, 1))
    _raster_core(pix, depth, np.ascontiguousarray(tris, dtype=np.int64),
                 dummy_a, np.ascontiguousarray(ids, dtype=np.int64),
                 zbuf, np.zeros((1, 1, 1)), ibuf, 2)
    return ibuf, zbuf
