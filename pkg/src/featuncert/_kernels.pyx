# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: bilinear sampling, batched patch RMSE, fit objective.

Mirrors ``_kernels_py`` exactly; keep the two implementations in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor, sqrt

cnp.import_array()

BACKEND = "cython"


cdef inline double _bilinear(const double[:, ::1] img, Py_ssize_t h, Py_ssize_t w,
                             double x, double y) nogil:
    cdef double fx0 = floor(x)
    cdef double fy0 = floor(y)
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0
    cdef Py_ssize_t y0 = <Py_ssize_t>fy0
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    cdef double fx = x - x0
    cdef double fy = y - y0
    return (1.0 - fy) * ((1.0 - fx) * img[y0, x0] + fx * img[y0, x0 + 1]) + \
           fy * ((1.0 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1])


def bilinear_many(const double[:, ::1] img, const double[::1] xs, const double[::1] ys):
    """Bilinear samples of img (indexed [y, x]) at coordinates (xs, ys)."""
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t n = xs.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = _bilinear(img, h, w, xs[i], ys[i])
    return out_arr


def patch_rmse_from_ref(const double[:, ::1] tgt, const double[::1] ref_patch,
                        const double[:, ::1] centers, const double[:, ::1] offsets):
    """RMSE between a precomputed reference patch and target patches.

    Returns NaN where the target patch leaves the image.
    """
    cdef Py_ssize_t h = tgt.shape[0]
    cdef Py_ssize_t w = tgt.shape[1]
    cdef Py_ssize_t n = centers.shape[0]
    cdef Py_ssize_t m = offsets.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double cx, cy, x, y, d, acc
    cdef bint ok
    cdef double nan = float("nan")
    with nogil:
        for i in range(n):
            cx = centers[i, 0]
            cy = centers[i, 1]
            ok = True
            for j in range(m):
                x = cx + offsets[j, 0]
                y = cy + offsets[j, 1]
                if x < 0.0 or x > w - 1.0 or y < 0.0 or y > h - 1.0:
                    ok = False
                    break
            if not ok:
                out[i] = nan
                continue
            acc = 0.0
            for j in range(m):
                x = cx + offsets[j, 0]
                y = cy + offsets[j, 1]
                d = _bilinear(tgt, h, w, x, y) - ref_patch[j]
                acc += d * d
            out[i] = sqrt(acc / m)
    return out_arr


def kl_objective(const double[::1] delta, const double[::1] u, double alpha, double k):
    """Pseudo-KL objective (up to the positive factor q(x_v)) at scale k."""
    cdef Py_ssize_t n = delta.shape[0]
    cdef double acc = 0.0
    cdef double e
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            e = -k * delta[i]
            if e > 700.0:
                e = 700.0
            acc += exp(e) * (alpha * u[i] - k * delta[i])
    return acc
