# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ranking and sampling kernels; see ``_kernels_py`` for the reference."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def target_ranks(const double[:, ::1] scores, const long long[::1] targets,
                 const long long[::1] key_rank, const unsigned char[:, ::1] exclude=None):
    cdef Py_ssize_t n_users = scores.shape[0], n_items = scores.shape[1]
    cdef Py_ssize_t u, j, t
    cdef double s_t, s
    cdef long long k_t, count
    cdef bint use_ex = exclude is not None
    out = np.empty(n_users, dtype=np.int64)
    cdef long long[::1] res = out
    with nogil:
        for u in range(n_users):
            t = targets[u]
            s_t = scores[u, t]
            k_t = key_rank[t]
            count = 1
            # branch-free bodies so the compiler can vectorize the scan
            if use_ex:
                for j in range(n_items):
                    s = scores[u, j]
                    count += ((s > s_t) | ((s == s_t) & (key_rank[j] < k_t))) & (exclude[u, j] == 0)
            else:
                for j in range(n_items):
                    s = scores[u, j]
                    count += (s > s_t) | ((s == s_t) & (key_rank[j] < k_t))
            res[u] = count
    return out


cdef inline bint _better(double sa, long long ka, double sb, long long kb) nogil:
    return sa > sb or (sa == sb and ka < kb)


def topk(const double[:, ::1] scores, Py_ssize_t k, const long long[::1] key_rank,
         const unsigned char[:, ::1] exclude=None):
    cdef Py_ssize_t n_users = scores.shape[0], n_items = scores.shape[1]
    cdef Py_ssize_t u, j, filled, pos
    cdef double s
    cdef bint use_ex = exclude is not None
    out = np.full((n_users, k), -1, dtype=np.int64)
    cdef long long[:, ::1] res = out
    buf_s = np.empty(k, dtype=np.float64)
    cdef double[::1] bs = buf_s
    with nogil:
        for u in range(n_users):
            filled = 0
            for j in range(n_items):
                if use_ex and exclude[u, j]:
                    continue
                s = scores[u, j]
                if filled == k and not _better(s, key_rank[j], bs[k - 1], key_rank[res[u, k - 1]]):
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and _better(s, key_rank[j], bs[pos - 1], key_rank[res[u, pos - 1]]):
                    bs[pos] = bs[pos - 1]
                    res[u, pos] = res[u, pos - 1]
                    pos -= 1
                bs[pos] = s
                res[u, pos] = j
                if filled < k:
                    filled += 1
    return out


def window_pool(const long long[::1] event_items, const long long[::1] event_users,
                Py_ssize_t lo, Py_ssize_t hi, long long user,
                const unsigned char[::1] exclude):
    cdef Py_ssize_t n_items = exclude.shape[0], e, j, n = 0
    mark = np.zeros(n_items, dtype=np.uint8)
    cdef unsigned char[::1] m = mark
    cdef long long it
    with nogil:
        for e in range(lo, hi):
            if event_users[e] == user:
                continue
            it = event_items[e]
            if not exclude[it] and not m[it]:
                m[it] = 1
                n += 1
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] res = out
    n = 0
    for j in range(n_items):
        if m[j]:
            res[n] = j
            n += 1
    return out
