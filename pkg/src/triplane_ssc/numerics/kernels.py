"""Kernel backend selection.

The compiled extension is preferred; set ``TRIPLANE_SSC_PURE_PYTHON=1`` to force
the numpy fallback (used by the cross-backend tests and the benchmark).
"""
import logging
import os

import numpy as np

from . import _kernels_py

logger = logging.getLogger(__name__)


def _load():
    if os.environ.get("TRIPLANE_SSC_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    try:
        from . import _kernels
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        return _kernels_py
    return _kernels


_impl = _load()
BACKEND = _impl.BACKEND


def backends():
    """All importable backends, keyed by name."""
    found = {"numpy": _kernels_py}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found


def bilinear_forward(plane_hwc, points):
    return _impl.bilinear_forward(
        np.ascontiguousarray(plane_hwc, dtype=np.float64),
        np.ascontiguousarray(points, dtype=np.float64),
    )


def bilinear_backward(plane_hwc, points, grad_out):
    return _impl.bilinear_backward(
        np.ascontiguousarray(plane_hwc, dtype=np.float64),
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(grad_out, dtype=np.float64),
    )


def index_add_rows(index, src, n_rows):
    return _impl.index_add_rows(
        np.ascontiguousarray(index, dtype=np.int64),
        np.ascontiguousarray(src, dtype=np.float64),
        int(n_rows),
    )
