# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled encoder kernels: embedding-bag and segment-mean forward/backward.

Element order of every accumulation matches the numpy fallback in
_pykernels.py so the two backends produce interchangeable float64 results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def embedding_bag_forward(double[:, ::1] table, cnp.int32_t[:, ::1] ids, int pad_id=0):
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t t = ids.shape[1]
    cdef Py_ssize_t d = table.shape[1]
    out_arr = np.zeros((m, d), dtype=np.float64)
    counts_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] counts = counts_arr
    cdef Py_ssize_t i, j, k
    cdef cnp.int32_t tok
    cdef double cnt
    for i in range(m):
        cnt = 0.0
        for j in range(t):
            tok = ids[i, j]
            if tok == pad_id:
                continue
            cnt += 1.0
            for k in range(d):
                out[i, k] += table[tok, k]
        counts[i] = cnt
        if cnt > 1.0:
            for k in range(d):
                out[i, k] /= cnt
    return out_arr, counts_arr


def embedding_bag_backward(double[:, ::1] grad_out, cnp.int32_t[:, ::1] ids,
                           double[::1] counts, Py_ssize_t vocab_size,
                           int pad_id=0):
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t t = ids.shape[1]
    cdef Py_ssize_t d = grad_out.shape[1]
    grad_arr = np.zeros((vocab_size, d), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, j, k
    cdef cnp.int32_t tok
    cdef double inv
    for i in range(m):
        inv = 1.0 / counts[i] if counts[i] > 1.0 else 1.0
        for j in range(t):
            tok = ids[i, j]
            if tok == pad_id:
                continue
            for k in range(d):
                grad[tok, k] += grad_out[i, k] * inv
    return grad_arr


def segment_mean_forward(double[:, ::1] x, cnp.int64_t[::1] offsets):
    cdef Py_ssize_t b = offsets.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.zeros((b, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, r, k
    cdef double cnt
    for s in range(b):
        cnt = <double>(offsets[s + 1] - offsets[s])
        for r in range(offsets[s], offsets[s + 1]):
            for k in range(d):
                out[s, k] += x[r, k]
        if cnt > 1.0:
            for k in range(d):
                out[s, k] /= cnt
    return out_arr


def segment_mean_backward(double[:, ::1] grad_out, cnp.int64_t[::1] offsets,
                          Py_ssize_t n_rows):
    cdef Py_ssize_t b = offsets.shape[0] - 1
    cdef Py_ssize_t d = grad_out.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, r, k
    cdef double inv
    for s in range(b):
        inv = 1.0 / <double>(offsets[s + 1] - offsets[s])
        for r in range(offsets[s], offsets[s + 1]):
            for k in range(d):
                out[r, k] = grad_out[s, k] * inv
    return out_arr
