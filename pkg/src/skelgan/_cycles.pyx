# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-node simple-cycle counting; same contract as ``_cycles_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def count_cycles_csr(indptr_in, indices_in, Py_ssize_t n, int max_len):
    cdef cnp.int64_t[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef cnp.int64_t[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int64)
    counts_arr = np.zeros((n, max_len + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef cnp.int64_t[::1] path = np.zeros(max_len + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cursor = np.zeros(max_len + 1, dtype=np.int64)
    cdef cnp.uint8_t[::1] on_path = np.zeros(max(n, 1), dtype=np.uint8)
    cdef Py_ssize_t s, depth, v, w, k

    if n == 0:
        return counts_arr
    for s in range(n):
        # iterative DFS; path[0..depth-1] is the current simple path from s
        path[0] = s
        on_path[s] = 1
        cursor[0] = indptr[s]
        depth = 1
        while depth > 0:
            v = path[depth - 1]
            if cursor[depth - 1] >= indptr[v + 1]:
                depth -= 1
                on_path[v] = 0
                continue
            w = indices[cursor[depth - 1]]
            cursor[depth - 1] += 1
            if w == s:
                if depth >= 3 and path[1] < path[depth - 1]:
                    for k in range(depth):
                        counts[path[k], depth] += 1
            elif w > s and not on_path[w] and depth < max_len:
                on_path[w] = 1
                path[depth] = w
                cursor[depth] = indptr[w]
                depth += 1
    return counts_arr
