# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled edit-distance kernels (token sequences of Python ints)."""

from libc.stdlib cimport malloc, free


cdef Py_ssize_t _levenshtein(long *a, Py_ssize_t m, long *b, Py_ssize_t n, Py_ssize_t *row) nogil:
    cdef Py_ssize_t i, j, prev_diag, tmp, best
    for j in range(n + 1):
        row[j] = j
    for i in range(1, m + 1):
        prev_diag = row[0]
        row[0] = i
        for j in range(1, n + 1):
            tmp = row[j]
            if a[i - 1] == b[j - 1]:
                best = prev_diag
            else:
                best = prev_diag + 1
                if row[j] + 1 < best:
                    best = row[j] + 1
                if row[j - 1] + 1 < best:
                    best = row[j - 1] + 1
            row[j] = best
            prev_diag = tmp
    return row[n]


def edit_distance(a, b):
    """Unit-cost Levenshtein distance between two integer sequences."""
    cdef Py_ssize_t m = len(a), n = len(b), i, out
    cdef long *ca = <long *> malloc((m + 1) * sizeof(long))
    cdef long *cb = <long *> malloc((n + 1) * sizeof(long))
    cdef Py_ssize_t *row = <Py_ssize_t *> malloc((n + 1) * sizeof(Py_ssize_t))
    if ca == NULL or cb == NULL or row == NULL:
        free(ca); free(cb); free(row)
        raise MemoryError()
    try:
        for i in range(m):
            ca[i] = a[i]
        for i in range(n):
            cb[i] = b[i]
        with nogil:
            out = _levenshtein(ca, m, cb, n, row)
    finally:
        free(ca); free(cb); free(row)
    return out


def edit_distance_batch(refs, hyps):
    """Edit distance for each aligned (ref, hyp) pair."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    return [edit_distance(r, h) for r, h in zip(refs, hyps)]
