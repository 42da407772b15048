"""Differentiable building blocks with fused backward passes."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import Tensor, as_tensor, matmul


def linear(x, weight, bias=None):
    """``y = x @ W.T + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != layer input dim {weight.shape[1]}")
    y = matmul(x, weight.T)
    return y + bias if bias is not None else y


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x [C_in, H, W]`` with ``weight [C_out, C_in, kh, kw]``."""
    x = as_tensor(x)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    _, h, w = x.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    # rows = output pixels, cols = (c_in, kh, kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.T.reshape(c_out, ho, wo)

    def backward(g):
        gmat = g.reshape(c_out, ho * wo).T
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(ho, wo, c_in, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        gx = gxp[:, ph : ph + h, pw : pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def bilinear_sample(plane, points):
    """Sample ``plane [C, H, W]`` at fractional ``(row, col)`` points ``[N, 2]`` -> ``[N, C]``.

    Integer coordinates hit cell values exactly; corners outside the plane count
    as zero. Differentiable in both the plane values and the coordinates.
    """
    plane, points = as_tensor(plane), as_tensor(points)
    hwc = np.ascontiguousarray(plane.data.transpose(1, 2, 0))
    pts = points.data.reshape(-1, 2)
    out = kernels.bilinear_forward(hwc, pts)

    def backward(g):
        gplane, gpts = kernels.bilinear_backward(hwc, pts, g)
        return gplane.transpose(2, 0, 1), gpts.reshape(points.shape)

    return Tensor._make(out, (plane, points), backward)


def upsample_nearest3d(grid, factor):
    """Replicate every voxel of ``grid [C, L, V, D]`` ``factor**3`` times."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    grid = as_tensor(grid)
    if factor == 1:
        return grid
    c, l, v, d = grid.shape
    out = grid.data
    for axis in (1, 2, 3):
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        return (g.reshape(c, l, factor, v, factor, d, factor).sum(axis=(2, 4, 6)),)

    return Tensor._make(out, (grid,), backward)


def take_rows(x, index):
    """``x[index]`` along axis 0 with a scatter-add backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = x.shape[0]
    tail = x.shape[1:]

    def backward(g):
        width = int(np.prod(tail)) if tail else 1
        return (kernels.index_add_rows(index.ravel(), g.reshape(-1, width), rows).reshape(x.shape),)

    return Tensor._make(x.data[index], (x,), backward)


def index_add(index, src, n_rows):
    """Scatter rows of ``src [N, D]`` into ``n_rows`` accumulators, ascending in ``N``."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    out = kernels.index_add_rows(index, src.data, n_rows)
    return Tensor._make(out, (src,), lambda g: (g[index],))
