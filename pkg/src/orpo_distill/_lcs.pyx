# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled longest-common-subsequence kernels."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef Py_ssize_t _lcs(const long long[:] a, const long long[:] b, long long[:] row) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t i, j
    cdef long long prev, tmp, ai
    for j in range(m + 1):
        row[j] = 0
    for i in range(n):
        prev = 0
        ai = a[i]
        for j in range(m):
            tmp = row[j + 1]
            if ai == b[j]:
                row[j + 1] = prev + 1
            elif row[j] > row[j + 1]:
                row[j + 1] = row[j]
            prev = tmp
    return row[m]


def lcs_length(a, b):
    cdef const long long[:] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef const long long[:] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef long long[:] row = np.zeros(bv.shape[0] + 1, dtype=np.int64)
    return int(_lcs(av, bv, row))


def rouge_matrix(seqs):
    """Symmetric matrix of ROUGE-L F1 scores for a list of id sequences."""
    cdef Py_ssize_t n = len(seqs)
    cdef Py_ssize_t i, j, la, lb, L
    cdef double prec, rec
    arrays = [np.ascontiguousarray(s, dtype=np.int64) for s in seqs]
    cdef Py_ssize_t longest = max([a.shape[0] for a in arrays] + [0])
    cdef long long[:] row = np.zeros(longest + 1, dtype=np.int64)
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, :] ov = out
    cdef const long long[:] av
    cdef const long long[:] bv
    for i in range(n):
        av = arrays[i]
        la = av.shape[0]
        if la > 0:
            ov[i, i] = 1.0
        for j in range(i + 1, n):
            bv = arrays[j]
            lb = bv.shape[0]
            if la == 0 or lb == 0:
                continue
            L = _lcs(av, bv, row)
            if L > 0:
                prec = <double>L / la
                rec = <double>L / lb
                ov[i, j] = 2.0 * prec * rec / (prec + rec)
                ov[j, i] = ov[i, j]
    return out
