# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel stain kernels; see _kernels_py for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def nnls2(od, S):
    cdef double[:, ::1] v = np.ascontiguousarray(od, dtype=np.float64)
    cdef double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i
    out_arr = np.empty((n, 2))
    cdef double[:, ::1] out = out_arr
    cdef double g00 = s[0, 0] * s[0, 0] + s[1, 0] * s[1, 0] + s[2, 0] * s[2, 0]
    cdef double g01 = s[0, 0] * s[0, 1] + s[1, 0] * s[1, 1] + s[2, 0] * s[2, 1]
    cdef double g11 = s[0, 1] * s[0, 1] + s[1, 1] * s[1, 1] + s[2, 1] * s[2, 1]
    cdef double det = g00 * g11 - g01 * g01
    cdef double b0, b1, c0, c1, a, b, fa, fb
    with nogil:
        for i in range(n):
            b0 = s[0, 0] * v[i, 0] + s[1, 0] * v[i, 1] + s[2, 0] * v[i, 2]
            b1 = s[0, 1] * v[i, 0] + s[1, 1] * v[i, 1] + s[2, 1] * v[i, 2]
            c0 = (g11 * b0 - g01 * b1) / det
            c1 = (g00 * b1 - g01 * b0) / det
            if c0 >= 0.0 and c1 >= 0.0:
                out[i, 0] = c0
                out[i, 1] = c1
                continue
            a = b0 / g00
            if not a > 0.0:
                a = 0.0
            b = b1 / g11
            if not b > 0.0:
                b = 0.0
            fa = g00 * a * a - 2.0 * b0 * a
            fb = g11 * b * b - 2.0 * b1 * b
            if fa <= fb:
                out[i, 0] = a
                out[i, 1] = 0.0
            else:
                out[i, 0] = 0.0
                out[i, 1] = b
    return out_arr


cdef enum:
    BLOCK = 64


def lasso_cd(od, W, H0, double lam, int n_iter):
    cdef double[:, ::1] v = np.ascontiguousarray(od, dtype=np.float64)
    cdef double[:, ::1] s = np.ascontiguousarray(W, dtype=np.float64)
    out_arr = np.array(H0, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] h = out_arr
    cdef Py_ssize_t n = v.shape[0], i, j, start, stop
    cdef int it
    cdef double g00 = s[0, 0] * s[0, 0] + s[1, 0] * s[1, 0] + s[2, 0] * s[2, 0]
    cdef double g01 = s[0, 0] * s[0, 1] + s[1, 0] * s[1, 1] + s[2, 0] * s[2, 1]
    cdef double g11 = s[0, 1] * s[0, 1] + s[1, 1] * s[1, 1] + s[2, 1] * s[2, 1]
    cdef double half = 0.5 * lam
    cdef double x
    # pixels are independent; sweeping a block per iteration keeps several
    # divisions in flight instead of one dependent chain per pixel
    cdef double b0[BLOCK]
    cdef double b1[BLOCK]
    cdef double h0[BLOCK]
    cdef double h1[BLOCK]
    cdef Py_ssize_t n_blocks = (n + BLOCK - 1) // BLOCK, k
    with nogil:
        for k in range(n_blocks):
            start = k * BLOCK
            stop = min(start + BLOCK, n)
            for j in range(stop - start):
                i = start + j
                b0[j] = s[0, 0] * v[i, 0] + s[1, 0] * v[i, 1] + s[2, 0] * v[i, 2]
                b1[j] = s[0, 1] * v[i, 0] + s[1, 1] * v[i, 1] + s[2, 1] * v[i, 2]
                h0[j] = h[i, 0]
                h1[j] = h[i, 1]
            for it in range(n_iter):
                for j in range(stop - start):
                    if g00 > 0.0:
                        x = (b0[j] - g01 * h1[j] - half) / g00
                        h0[j] = x if x > 0.0 else 0.0
                    else:
                        h0[j] = 0.0
                    if g11 > 0.0:
                        x = (b1[j] - g01 * h0[j] - half) / g11
                        h1[j] = x if x > 0.0 else 0.0
                    else:
                        h1[j] = 0.0
            for j in range(stop - start):
                h[start + j, 0] = h0[j]
                h[start + j, 1] = h1[j]
    return out_arr
