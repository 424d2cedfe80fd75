# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled edge kernels: scatter-add and per-segment softmax.

Semantics mirror ``numpy_ref`` exactly, including accumulation order
(edge index order), so results are bitwise-comparable between backends
for a fixed input.
"""

import numpy as np

cimport cython
from libc.math cimport exp, expf, INFINITY

ctypedef fused real:
    float
    double


def scatter_add_rows(real[:, ::1] out, const long long[::1] idx, real[:, ::1] src):
    cdef Py_ssize_t e, j, n = idx.shape[0], d = src.shape[1]
    cdef long long row
    for e in range(n):
        row = idx[e]
        for j in range(d):
            out[row, j] += src[e, j]


def scatter_add_1d(real[::1] out, const long long[::1] idx, real[::1] src):
    cdef Py_ssize_t e, n = idx.shape[0]
    for e in range(n):
        out[idx[e]] += src[e]


def segment_softmax(real[::1] scores, const long long[::1] seg, Py_ssize_t n_segments):
    cdef Py_ssize_t e, n = scores.shape[0]
    dtype = np.float32 if real is float else np.float64
    mx_arr = np.full(n_segments, -INFINITY, dtype=dtype)
    denom_arr = np.zeros(n_segments, dtype=dtype)
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] mx = mx_arr
    cdef real[::1] denom = denom_arr
    cdef real[::1] out = out_arr
    for e in range(n):
        if scores[e] > mx[seg[e]]:
            mx[seg[e]] = scores[e]
    if real is float:
        for e in range(n):
            out[e] = expf(scores[e] - mx[seg[e]])
            denom[seg[e]] += out[e]
    else:
        for e in range(n):
            out[e] = exp(scores[e] - mx[seg[e]])
            denom[seg[e]] += out[e]
    for e in range(n):
        out[e] /= denom[seg[e]]
    return out_arr


def segment_softmax_grad(real[::1] alpha, real[::1] grad, const long long[::1] seg, Py_ssize_t n_segments):
    cdef Py_ssize_t e, n = alpha.shape[0]
    dtype = np.float32 if real is float else np.float64
    dot_arr = np.zeros(n_segments, dtype=dtype)
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] dot = dot_arr
    cdef real[::1] out = out_arr
    for e in range(n):
        dot[seg[e]] += alpha[e] * grad[e]
    for e in range(n):
        out[e] = alpha[e] * (grad[e] - dot[seg[e]])
    return out_arr
