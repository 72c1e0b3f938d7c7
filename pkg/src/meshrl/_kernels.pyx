# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled geometry hot kernels.

Same contract as meshrl._kernels_py; see that module for documentation.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

IMPLEMENTATION = "compiled"


def pair_contains(
    const double[::1] px, const double[::1] py,
    const double[::1] ax, const double[::1] ay,
    const double[::1] bx, const double[::1] by,
    const double[::1] cx, const double[::1] cy,
    double tol,
):
    cdef Py_ssize_t n = px.shape[0]
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.uint8_t[::1] ov = out.view(np.uint8)
    cdef Py_ssize_t i
    cdef double d0, d1, d2, total, cut
    for i in range(n):
        d0 = (bx[i] - ax[i]) * (py[i] - ay[i]) - (by[i] - ay[i]) * (px[i] - ax[i])
        d1 = (cx[i] - bx[i]) * (py[i] - by[i]) - (cy[i] - by[i]) * (px[i] - bx[i])
        d2 = (ax[i] - cx[i]) * (py[i] - cy[i]) - (ay[i] - cy[i]) * (px[i] - cx[i])
        total = (bx[i] - ax[i]) * (cy[i] - ay[i]) - (by[i] - ay[i]) * (cx[i] - ax[i])
        cut = -tol * total
        ov[i] = d0 >= cut and d1 >= cut and d2 >= cut
    return out


def pair_interpolate(
    const double[::1] px, const double[::1] py,
    const double[::1] ax, const double[::1] ay,
    const double[::1] bx, const double[::1] by,
    const double[::1] cx, const double[::1] cy,
    const double[::1] va, const double[::1] vb, const double[::1] vc,
):
    cdef Py_ssize_t n = px.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double total, wa, wb, wc
    for i in range(n):
        total = (bx[i] - ax[i]) * (cy[i] - ay[i]) - (by[i] - ay[i]) * (cx[i] - ax[i])
        wc = ((bx[i] - ax[i]) * (py[i] - ay[i]) - (by[i] - ay[i]) * (px[i] - ax[i])) / total
        wa = ((cx[i] - bx[i]) * (py[i] - by[i]) - (cy[i] - by[i]) * (px[i] - bx[i])) / total
        wb = 1.0 - wa - wc
        ov[i] = wa * va[i] + wb * vb[i] + wc * vc[i]
    return out


def element_error_reduce(
    Py_ssize_t n_elements,
    const cnp.int64_t[::1] pair_elem,
    const double[::1] pair_weight,
    const double[::1] pair_absdiff,
    const double[::1] pair_volume,
):
    cdef Py_ssize_t n = pair_elem.shape[0]
    max_err = np.zeros(n_elements, dtype=np.float64)
    integrated = np.zeros(n_elements, dtype=np.float64)
    cdef double[::1] mv = max_err
    cdef double[::1] iv = integrated
    cdef Py_ssize_t i, e
    cdef double w
    for i in range(n):
        e = pair_elem[i]
        w = pair_weight[i] * pair_absdiff[i]
        if w > mv[e]:
            mv[e] = w
        iv[e] += w * pair_volume[i]
    return max_err, integrated
