# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: bilinear sampling (forward/backward) and row scatter-add.

Accumulation runs in ascending point/row order so results are bit-deterministic.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

BACKEND = "cython"


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def bilinear_forward(const double[:, :, ::1] plane, const double[:, ::1] points):
    cdef Py_ssize_t H = plane.shape[0], W = plane.shape[1], C = plane.shape[2]
    cdef Py_ssize_t N = points.shape[0]
    out_arr = np.zeros((N, C), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, ch, r0, c0, rr, cc, k
    cdef double r, c, wr, wc, w
    with nogil:
        for n in range(N):
            r = _clip(points[n, 0], -2.0, H + 1.0)
            c = _clip(points[n, 1], -2.0, W + 1.0)
            r0 = <Py_ssize_t>floor(r)
            c0 = <Py_ssize_t>floor(c)
            wr = r - r0
            wc = c - c0
            for k in range(4):
                rr = r0 + (k >> 1)
                cc = c0 + (k & 1)
                if rr < 0 or rr >= H or cc < 0 or cc >= W:
                    continue
                w = (wr if (k >> 1) else 1.0 - wr) * (wc if (k & 1) else 1.0 - wc)
                for ch in range(C):
                    out[n, ch] += w * plane[rr, cc, ch]
    return out_arr


def bilinear_backward(const double[:, :, ::1] plane, const double[:, ::1] points,
                      const double[:, ::1] grad_out):
    cdef Py_ssize_t H = plane.shape[0], W = plane.shape[1], C = plane.shape[2]
    cdef Py_ssize_t N = points.shape[0]
    gplane_arr = np.zeros((H, W, C), dtype=np.float64)
    gpts_arr = np.zeros((N, 2), dtype=np.float64)
    cdef double[:, :, ::1] gplane = gplane_arr
    cdef double[:, ::1] gpts = gpts_arr
    cdef Py_ssize_t n, ch, r0, c0, rr, cc, k
    cdef double r, c, wr, wc, w, g, v, dr_w, dc_w, acc_r, acc_c
    cdef bint outside
    with nogil:
        for n in range(N):
            outside = (points[n, 0] < -2.0 or points[n, 0] > H + 1.0
                       or points[n, 1] < -2.0 or points[n, 1] > W + 1.0)
            r = _clip(points[n, 0], -2.0, H + 1.0)
            c = _clip(points[n, 1], -2.0, W + 1.0)
            r0 = <Py_ssize_t>floor(r)
            c0 = <Py_ssize_t>floor(c)
            wr = r - r0
            wc = c - c0
            acc_r = 0.0
            acc_c = 0.0
            for k in range(4):
                rr = r0 + (k >> 1)
                cc = c0 + (k & 1)
                if rr < 0 or rr >= H or cc < 0 or cc >= W:
                    continue
                w = (wr if (k >> 1) else 1.0 - wr) * (wc if (k & 1) else 1.0 - wc)
                # d w / d r and d w / d c for this corner
                dr_w = (1.0 if (k >> 1) else -1.0) * (wc if (k & 1) else 1.0 - wc)
                dc_w = (1.0 if (k & 1) else -1.0) * (wr if (k >> 1) else 1.0 - wr)
                for ch in range(C):
                    g = grad_out[n, ch]
                    v = plane[rr, cc, ch]
                    gplane[rr, cc, ch] += w * g
                    acc_r += dr_w * v * g
                    acc_c += dc_w * v * g
            if not outside:
                gpts[n, 0] = acc_r
                gpts[n, 1] = acc_c
    return gplane_arr, gpts_arr


def index_add_rows(const cnp.int64_t[::1] index, const double[:, ::1] src, Py_ssize_t n_rows):
    cdef Py_ssize_t N = src.shape[0], D = src.shape[1]
    out_arr = np.zeros((n_rows, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, row
    with nogil:
        for i in range(N):
            row = index[i]
            for j in range(D):
                out[row, j] += src[i, j]
    return out_arr
