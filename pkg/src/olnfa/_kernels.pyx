# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: log-domain binomial tails and bilinear ROI pooling.

Mirrors :mod:`olnfa._fallback` function for function. Both must agree to
rounding; ``tests/test_backends.py`` holds them to that.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport lgamma, log, log1p, exp, floor, INFINITY

cnp.import_array()


cdef double _log_pmf_sum(long lo, long hi, long nu, double log_p, double log_q) noexcept nogil:
    cdef double ratio = log_p - log_q
    cdef double first, term, top, acc
    cdef long i
    first = (lgamma(nu + 1.0) - lgamma(lo + 1.0) - lgamma(nu - lo + 1.0)
             + lo * log_p + (nu - lo) * log_q)
    # first pass: largest term, so the exp() sums never overflow
    top = first
    acc = first
    for i in range(lo, hi):
        acc = acc + log((nu - i) / (i + 1.0)) + ratio
        if acc > top:
            top = acc
    acc = 0.0
    term = first
    for i in range(lo, hi + 1):
        acc += exp(term - top)
        if i < hi:
            term = term + log((nu - i) / (i + 1.0)) + ratio
    return top + log(acc)


cdef double _log_tail(long kappa, long nu, double p) noexcept nogil:
    cdef double log_p = log(p)
    cdef double log_q = log1p(-p)
    cdef double out
    if kappa <= 0:
        return 0.0
    if kappa <= nu * p:
        # tail near 1: subtract the short lower sum instead of rounding the long one
        out = _log_pmf_sum(0, kappa - 1, nu, log_p, log_q)
        if out >= 0.0:
            return -INFINITY
        return log1p(-exp(out))
    out = _log_pmf_sum(kappa, nu, nu, log_p, log_q)
    return out if out < 0.0 else 0.0


def log_binomial_tail(long kappa, long nu, double p):
    return _log_tail(kappa, nu, p)


def log_binomial_tail_table(long nu, double p):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nu + 1, dtype=np.float64)
    cdef long k
    for k in range(nu + 1):
        out[k] = _log_tail(k, nu, p)
    return out


cdef inline double _at(const double[:, :, ::1] m, Py_ssize_t b, long i, long j,
                       long h, long w) noexcept nogil:
    if i < 0 or j < 0 or i >= h or j >= w:
        return 0.0
    return m[b, i, j]


def roi_align_forward(const double[:, :, ::1] maps, const double[:, ::1] corners,
                      const cnp.intp_t[::1] bidx, int R):
    cdef Py_ssize_t n = corners.shape[0]
    cdef long h = maps.shape[1], w = maps.shape[2]
    out_arr = np.zeros((n, R, R), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, a, c, b
    cdef double x1, y1, bw, bh, x, y, u, v, lx, ly
    cdef long i0, j0
    with nogil:
        for r in range(n):
            b = bidx[r]
            x1 = corners[r, 0]
            y1 = corners[r, 1]
            bw = (corners[r, 2] - x1) / R
            bh = (corners[r, 3] - y1) / R
            for a in range(R):
                y = y1 + (a + 0.5) * bh
                v = y - 0.5
                i0 = <long>floor(v)
                ly = v - i0
                for c in range(R):
                    x = x1 + (c + 0.5) * bw
                    u = x - 0.5
                    j0 = <long>floor(u)
                    lx = u - j0
                    out[r, a, c] = (
                        (1 - ly) * ((1 - lx) * _at(maps, b, i0, j0, h, w)
                                    + lx * _at(maps, b, i0, j0 + 1, h, w))
                        + ly * ((1 - lx) * _at(maps, b, i0 + 1, j0, h, w)
                                + lx * _at(maps, b, i0 + 1, j0 + 1, h, w)))
    return out_arr


cdef inline void _scatter(double* g, long i, long j, long h, long w, double val) noexcept nogil:
    if i < 0 or j < 0 or i >= h or j >= w:
        return
    g[i * w + j] += val


cdef inline double _read(const double* m, long i, long j, long h, long w) noexcept nogil:
    if i < 0 or j < 0 or i >= h or j >= w:
        return 0.0
    return m[i * w + j]


def roi_align_backward(const double[:, :, ::1] maps, const double[:, ::1] corners,
                       const cnp.intp_t[::1] bidx, int R,
                       const double[:, :, ::1] upstream):
    cdef Py_ssize_t n = corners.shape[0]
    cdef long h = maps.shape[1], w = maps.shape[2]
    gmap_arr = np.zeros((maps.shape[0], h, w), dtype=np.float64)
    gbox_arr = np.zeros((n, 4), dtype=np.float64)
    cdef double[:, :, ::1] gmap = gmap_arr
    cdef double[:, ::1] gbox = gbox_arr
    cdef Py_ssize_t r, a, c, b
    cdef double x1, y1, bw, bh, x, y, u, v, lx, ly, g, fy, fx
    cdef double v00, v01, v10, v11, dvdx, dvdy, sx1, sx2, sy1, sy2
    cdef long i0, j0
    cdef double* gm
    cdef const double* mp
    if n == 0:
        return gmap_arr, gbox_arr
    with nogil:
        for r in range(n):
            b = bidx[r]
            gm = &gmap[b, 0, 0]
            mp = &maps[b, 0, 0]
            x1 = corners[r, 0]
            y1 = corners[r, 1]
            bw = (corners[r, 2] - x1) / R
            bh = (corners[r, 3] - y1) / R
            sx1 = 0.0
            sx2 = 0.0
            sy1 = 0.0
            sy2 = 0.0
            for a in range(R):
                fy = (a + 0.5) / R
                y = y1 + (a + 0.5) * bh
                v = y - 0.5
                i0 = <long>floor(v)
                ly = v - i0
                for c in range(R):
                    g = upstream[r, a, c]
                    if g == 0.0:
                        continue
                    fx = (c + 0.5) / R
                    x = x1 + (c + 0.5) * bw
                    u = x - 0.5
                    j0 = <long>floor(u)
                    lx = u - j0
                    _scatter(gm, i0, j0, h, w, g * (1 - ly) * (1 - lx))
                    _scatter(gm, i0, j0 + 1, h, w, g * (1 - ly) * lx)
                    _scatter(gm, i0 + 1, j0, h, w, g * ly * (1 - lx))
                    _scatter(gm, i0 + 1, j0 + 1, h, w, g * ly * lx)
                    v00 = _read(mp, i0, j0, h, w)
                    v01 = _read(mp, i0, j0 + 1, h, w)
                    v10 = _read(mp, i0 + 1, j0, h, w)
                    v11 = _read(mp, i0 + 1, j0 + 1, h, w)
                    dvdx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)
                    dvdy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
                    sx1 += g * dvdx * (1 - fx)
                    sx2 += g * dvdx * fx
                    sy1 += g * dvdy * (1 - fy)
                    sy2 += g * dvdy * fy
            gbox[r, 0] = sx1
            gbox[r, 1] = sy1
            gbox[r, 2] = sx2
            gbox[r, 3] = sy2
    return gmap_arr, gbox_arr
