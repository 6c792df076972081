"""Pure-Python per-node simple-cycle counting (fallback for ``_cycles``)."""

import numpy as np


def count_cycles_csr(indptr, indices, n, max_len):
    """Return an ``(n, max_len + 1)`` int64 array; column ``k`` counts the
    distinct simple cycles of length ``k`` through each node.

    Each cycle is enumerated once: rooted at its smallest node ``s``, walked
    only through nodes ``> s``, and kept only when its second node is smaller
    than its last (which drops the reversed traversal).
    """
    counts = np.zeros((n, max_len + 1), dtype=np.int64)
    indptr = [int(x) for x in indptr]
    indices = [int(x) for x in indices]
    adj = [indices[indptr[v]:indptr[v + 1]] for v in range(n)]
    on_path = [False] * n
    path = []

    def extend(s, v):
        depth = len(path)
        for w in adj[v]:
            if w == s:
                if depth >= 3 and path[1] < path[-1]:
                    for u in path:
                        counts[u, depth] += 1
            elif w > s and not on_path[w] and depth < max_len:
                on_path[w] = True
                path.append(w)
                extend(s, w)
                path.pop()
                on_path[w] = False

    for s in range(n):
        on_path[s] = True
        path.append(s)
        extend(s, s)
        path.pop()
        on_path[s] = False
    return counts
