"""Masks, distance transforms, distance-field sampling and blur pyramids.

The silhouette terms all run through `DistanceField`. Off the pixel grid it
evaluates the continuous distance to the nearest contour pixel center (via
a nearest-neighbor index) rather than bilinearly blending the distance
image: the blend rounds off the kink the distance function has at the
contour and bends gradient directions within a pixel of it, exactly where
registration happens. The continuous form keeps the analytic gradient equal
to the unit vector away from the nearest contour pixel, so silhouette
Jacobians agree with finite differences of the sampled residual.

Residual sampling subtracts half a pixel: the distance image measures
distance to the centers of the innermost foreground pixels while the actual
silhouette interface lies about half a pixel outside them. Without the
correction a model resting exactly on the true silhouette would still read
a spurious sub-pixel distance everywhere along its boundary.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from PIL import Image
from scipy.ndimage import convolve1d

# distance from innermost-foreground pixel centers to the mask interface
INTERFACE_OFFSET = 0.5
# half-width of the quadratic blend that makes the solver residual C^1
RAMP_HALF = 0.15

_BIG = 1e18


def contour_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    Pixels outside the image count as background, so foreground touching the
    border is contour.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def contour_pixels(mask: np.ndarray) -> np.ndarray:
    """(K,2) array of (row, col) contour coordinates."""
    return np.argwhere(contour_mask(mask))


@njit(cache=True)
def _edt_squared(feature):
    # Exact squared EDT: per-column sweep for vertical distances, then a
    # per-row lower envelope of parabolas (Felzenszwalb-Huttenlocher).
    h, w = feature.shape
    g = np.full((h, w), _BIG)
    for x in range(w):
        dist = _BIG
        for y in range(h):
            if feature[y, x]:
                dist = 0.0
            elif dist < _BIG:
                dist += 1.0
            g[y, x] = dist
        dist = _BIG
        for y in range(h - 1, -1, -1):
            if feature[y, x]:
                dist = 0.0
            elif dist < _BIG:
                dist += 1.0
            if dist < g[y, x]:
                g[y, x] = dist
    for x in range(w):
        for y in range(h):
            if g[y, x] < _BIG:
                g[y, x] = g[y, x] * g[y, x]
    out = np.empty((h, w))
    v = np.empty(w, dtype=np.int64)
    z = np.empty(w + 1)
    f = np.empty(w)
    for y in range(h):
        for x in range(w):
            f[x] = g[y, x]
        k = -1
        for q in range(w):
            if f[q] >= _BIG:
                continue
            if k >= 0:
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
                while k >= 0 and s <= z[k]:
                    k -= 1
                    if k >= 0:
                        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -_BIG
                z[1] = _BIG
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = _BIG
        if k < 0:
            for x in range(w):
                out[y, x] = _BIG
            continue
        j = 0
        for x in range(w):
            while z[j + 1] < x:
                j += 1
            dx = x - v[j]
            out[y, x] = dx * dx + f[v[j]]
    return out


def euclidean_dt(mask: np.ndarray) -> np.ndarray:
    """Unsigned distance (in pixels) to the nearest contour pixel center."""
    mask = np.asarray(mask, dtype=bool)
    contour = contour_mask(mask)
    if not contour.any():
        raise ValueError("mask has no foreground, distance transform undefined")
    return np.sqrt(_edt_squared(contour))


def _bilinear_setup(shape, pos):
    h, w = shape[0], shape[1]
    pos = np.asarray(pos, dtype=np.float64)
    x = pos[..., 0]
    y = pos[..., 1]
    clamped = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2)
    fx = xc - x0
    fy = yc - y0
    return x0, y0, fx, fy, xc, yc, clamped


def sample_bilinear(image: np.ndarray, pos: np.ndarray):
    """Bilinear sample with the analytic gradient of the sampled surface.

    image: (H,W) or (H,W,C); pos: (...,2) as (x, y) pixel coordinates.
    Returns (values (...,C), gradients (...,C,2), clamped (...,)). Positions
    outside the image are clamped and flagged; their gradient is zero in the
    clamped direction since the clamped surface is constant there.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    x0, y0, fx, fy, xc, yc, clamped = _bilinear_setup(image.shape, pos)
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    fx_ = fx[..., None]
    fy_ = fy[..., None]
    top = v00 * (1 - fx_) + v01 * fx_
    bot = v10 * (1 - fx_) + v11 * fx_
    val = top * (1 - fy_) + bot * fy_
    gx = (v01 - v00) * (1 - fy_) + (v11 - v10) * fy_
    gy = bot - top
    pos = np.asarray(pos, dtype=np.float64)
    inside_x = (pos[..., 0] >= 0) & (pos[..., 0] <= image.shape[1] - 1)
    inside_y = (pos[..., 1] >= 0) & (pos[..., 1] <= image.shape[0] - 1)
    gx = gx * inside_x[..., None]
    gy = gy * inside_y[..., None]
    grad = np.stack([gx, gy], axis=-1)
    if squeeze:
        return val[..., 0], grad[..., 0, :], clamped
    return val, grad, clamped


class DistanceField:
    """Distance transform of a mask plus its sampling conventions."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        self.dt = euclidean_dt(self.mask)
        self.shape = self.dt.shape
        self._tree = None

    @property
    def contour_tree(self):
        """Nearest-neighbor index over contour pixel centers, as (x, y)."""
        if self._tree is None:
            from scipy.spatial import cKDTree
            pts = np.argwhere(contour_mask(self.mask))[:, ::-1].astype(np.float64)
            self._tree = cKDTree(pts)
        return self._tree

    def _nearest(self, pos: np.ndarray):
        """Continuous distance to, and unit direction from, the contour.

        Exact at any position in the plane, on or off the image, so a vertex
        that strays past the border keeps feeling a pull back toward the
        silhouette instead of silently dropping out of the energy. Returns a
        `clamped` flag for positions that are not finite (those are given
        zero value and gradient and should be gated out by the caller).
        """
        pos = np.asarray(pos, dtype=np.float64)
        finite = np.isfinite(pos).all(axis=-1)
        query = np.where(finite[..., None], pos, 0.0)
        dist, idx = self.contour_tree.query(query)
        feat = self.contour_tree.data[idx]
        safe = np.maximum(dist, 1e-12)
        vec = (query - feat) / safe[..., None]
        vec = vec * ((dist > 1e-12) & finite)[..., None]
        dist = dist * finite
        return dist, vec, ~finite

    def sample_value(self, pos: np.ndarray):
        """Raw continuous distance values (no interface correction)."""
        dist, _, clamped = self._nearest(pos)
        return dist, clamped

    def sample_interface(self, pos: np.ndarray):
        """Interface-corrected distance: max(distance - 0.5, 0)."""
        val, clamped = self.sample_value(pos)
        return np.maximum(val - INTERFACE_OFFSET, 0.0), clamped

    def sample_residual(self, pos: np.ndarray):
        """Interface-corrected value and its analytic spatial gradient.

        The hard hinge max(d - 0.5, 0) is replaced by its C^1 relaxation: zero
        below the interface band, a quadratic blend across it, and exactly
        d - 0.5 beyond. A kinked residual lets the solver freeze at the band
        edge, where one-sided steps raise the energy that the linear model
        predicted would fall; the blend keeps every Gauss-Newton direction a
        true descent direction.
        """
        dist, vec, clamped = self._nearest(pos)
        lo = INTERFACE_OFFSET - RAMP_HALF
        hi = INTERFACE_OFFSET + RAMP_HALF
        t = np.clip(dist - lo, 0.0, hi - lo)
        res = np.where(dist >= hi, dist - INTERFACE_OFFSET,
                       t * t / (4.0 * RAMP_HALF))
        slope = np.where(dist >= hi, 1.0, t / (2.0 * RAMP_HALF))
        grad = vec * slope[..., None]
        return res, grad, clamped

    def sample_gradient(self, pos: np.ndarray):
        """Distance-field gradient: unit vector away from the contour."""
        _, vec, clamped = self._nearest(pos)
        return vec, clamped

    def side_direction(self, pos: np.ndarray) -> np.ndarray:
        """Unit direction away from the nearest contour pixel."""
        return self._nearest(pos)[1]

    def inside(self, pos: np.ndarray) -> np.ndarray:
        """Nearest-pixel foreground test; off-image positions are outside."""
        pos = np.asarray(pos, dtype=np.float64)
        h, w = self.shape
        xi = np.round(pos[..., 0]).astype(np.int64)
        yi = np.round(pos[..., 1]).astype(np.int64)
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        return ok & self.mask[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]


def gaussian_kernel(size: int) -> np.ndarray:
    """Normalized Gaussian taps of odd length `size`, sigma = (size-1)/6."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if size == 1:
        return np.ones(1)
    sigma = (size - 1) / 6.0
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_pyramid(image: np.ndarray, kernel_sizes=(15, 9, 3)):
    """Blur stack at full resolution, coarsest (largest kernel) first."""
    image = np.asarray(image, dtype=np.float64)
    levels = []
    for size in kernel_sizes:
        k = gaussian_kernel(size)
        out = convolve1d(image, k, axis=0, mode="nearest")
        out = convolve1d(out, k, axis=1, mode="nearest")
        levels.append(out)
    return levels


def load_mask(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    return img >= 128


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_color(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_color(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)
