"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``TRIPLANE_SSC_PURE_PYTHON=1`` is set. Signatures match ``_kernels.pyx``.
"""
import numpy as np

BACKEND = "numpy"


def _corners(points, height, width):
    # coordinates beyond one cell outside the plane contribute nothing either way
    r = np.clip(points[:, 0], -2.0, height + 1.0)
    c = np.clip(points[:, 1], -2.0, width + 1.0)
    r0f = np.floor(r)
    c0f = np.floor(c)
    wr = r - r0f
    wc = c - c0f
    r0 = r0f.astype(np.int64)
    c0 = c0f.astype(np.int64)
    out = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        flat = np.where(valid, rr * width + cc, 0)
        out.append((flat, valid))
    return out, wr, wc


def bilinear_forward(plane_hwc, points):
    """Sample a channel-last plane ``[H, W, C]`` at fractional ``(row, col)`` points."""
    height, width, channels = plane_hwc.shape
    flat_plane = plane_hwc.reshape(height * width, channels)
    corners, wr, wc = _corners(points, height, width)
    weights = ((1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc)
    out = np.zeros((points.shape[0], channels))
    for (flat, valid), w in zip(corners, weights):
        out += (w * valid)[:, None] * flat_plane[flat]
    return out


def bilinear_backward(plane_hwc, points, grad_out):
    """Return ``(grad_plane_hwc, grad_points)`` for :func:`bilinear_forward`."""
    height, width, channels = plane_hwc.shape
    flat_plane = plane_hwc.reshape(height * width, channels)
    corners, wr, wc = _corners(points, height, width)
    weights = ((1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc)
    n_cells = height * width
    chan = np.arange(channels)
    grad_plane = np.zeros(n_cells * channels)
    vals = []
    for (flat, valid), w in zip(corners, weights):
        contrib = (w * valid)[:, None] * grad_out
        idx = (flat[:, None] * channels + chan).ravel()
        grad_plane += np.bincount(idx, weights=contrib.ravel(), minlength=n_cells * channels)
        vals.append(np.where(valid[:, None], flat_plane[flat], 0.0))
    v00, v01, v10, v11 = vals
    d_r = (1 - wc)[:, None] * (v10 - v00) + wc[:, None] * (v11 - v01)
    d_c = (1 - wr)[:, None] * (v01 - v00) + wr[:, None] * (v11 - v10)
    grad_points = np.stack([(d_r * grad_out).sum(axis=1), (d_c * grad_out).sum(axis=1)], axis=1)
    # clipped coordinates sit in the flat zero region
    r = points[:, 0]
    c = points[:, 1]
    outside = (r < -2.0) | (r > height + 1.0) | (c < -2.0) | (c > width + 1.0)
    grad_points[outside] = 0.0
    return grad_plane.reshape(height, width, channels), grad_points


def index_add_rows(index, src, n_rows):
    """``out[index[i]] += src[i]`` accumulated in ascending ``i``."""
    width = src.shape[1]
    if index.size == 0:
        return np.zeros((n_rows, width))
    idx = (index[:, None] * width + np.arange(width)).ravel()
    return np.bincount(idx, weights=src.ravel(), minlength=n_rows * width).reshape(n_rows, width)
