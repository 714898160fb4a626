# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loop kernels for superpixels and pseudo-label voting.

Arithmetic matches ``_kernels_py`` operation for operation so both backends
produce identical labels.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor, INFINITY

cnp.import_array()


def slic_assign(const double[:, :, ::1] lab, const double[:, ::1] centers, double S, double m,
                long long[:, ::1] labels, double[:, ::1] dist):
    cdef Py_ssize_t H = lab.shape[0], W = lab.shape[1], n = centers.shape[0]
    cdef Py_ssize_t c, y, x, r0, r1, c0, c1
    cdef double y0, x0, L, A, B, dl, da, db, dy, dx, d, w
    w = (m / S) * (m / S)
    for y in range(H):
        for x in range(W):
            dist[y, x] = INFINITY
    for c in range(n):
        L = centers[c, 0]
        A = centers[c, 1]
        B = centers[c, 2]
        y0 = centers[c, 3]
        x0 = centers[c, 4]
        r0 = <Py_ssize_t>ceil(y0 - S)
        r1 = <Py_ssize_t>floor(y0 + S)
        c0 = <Py_ssize_t>ceil(x0 - S)
        c1 = <Py_ssize_t>floor(x0 + S)
        if r0 < 0:
            r0 = 0
        if c0 < 0:
            c0 = 0
        if r1 > H - 1:
            r1 = H - 1
        if c1 > W - 1:
            c1 = W - 1
        for y in range(r0, r1 + 1):
            dy = y - y0
            for x in range(c0, c1 + 1):
                dx = x - x0
                dl = lab[y, x, 0] - L
                da = lab[y, x, 1] - A
                db = lab[y, x, 2] - B
                d = (dl * dl + da * da + db * db) + (dy * dy + dx * dx) * w
                if d < dist[y, x]:
                    dist[y, x] = d
                    labels[y, x] = c


def connected_components(const long long[:, ::1] labels):
    """4-connected components numbered in raster order of their first pixel."""
    cdef Py_ssize_t H = labels.shape[0], W = labels.shape[1]
    comp_np = np.full((H, W), -1, dtype=np.int64)
    cdef long long[:, ::1] comp = comp_np
    queue_np = np.empty(H * W, dtype=np.int64)
    cdef long long[::1] queue = queue_np
    cdef Py_ssize_t y, x, head, tail, cy, cx, ny, nx, k
    cdef long long cur = 0, lab, p
    cdef int dyv[4]
    cdef int dxv[4]
    dyv[0] = -1; dyv[1] = 1; dyv[2] = 0; dyv[3] = 0
    dxv[0] = 0; dxv[1] = 0; dxv[2] = -1; dxv[3] = 1
    for y in range(H):
        for x in range(W):
            if comp[y, x] >= 0:
                continue
            lab = labels[y, x]
            comp[y, x] = cur
            head = 0
            tail = 1
            queue[0] = y * W + x
            while head < tail:
                p = queue[head]
                head += 1
                cy = p // W
                cx = p % W
                for k in range(4):
                    ny = cy + dyv[k]
                    nx = cx + dxv[k]
                    if ny < 0 or ny >= H or nx < 0 or nx >= W:
                        continue
                    if comp[ny, nx] >= 0 or labels[ny, nx] != lab:
                        continue
                    comp[ny, nx] = cur
                    queue[tail] = ny * W + nx
                    tail += 1
            cur += 1
    return comp_np, int(cur)


def refine_votes(const unsigned char[:, ::1] v, const long long[:, ::1] yhat,
                 const long long[:, ::1] sp, int K, bint inplace):
    """Eight-neighbourhood superpixel voting on selection weights.

    ``inplace=False`` counts against the frozen input mask; ``inplace=True``
    reads the mask as it is being rewritten in raster order.
    """
    cdef Py_ssize_t H = v.shape[0], W = v.shape[1]
    out_np = np.array(v, dtype=np.uint8, copy=True)
    cdef unsigned char[:, ::1] out = out_np
    counts_np = np.zeros(max(K, 1), dtype=np.int64)
    cdef long long[::1] counts = counts_np
    cdef Py_ssize_t h, w, a, b, k, best
    cdef long long lab, cls
    cdef unsigned char q
    for h in range(H):
        for w in range(W):
            if (out[h, w] if inplace else v[h, w]) != 0:
                continue
            for k in range(K):
                counts[k] = 0
            lab = sp[h, w]
            for a in range(h - 1, h + 2):
                if a < 0 or a >= H:
                    continue
                for b in range(w - 1, w + 2):
                    if b < 0 or b >= W:
                        continue
                    q = out[a, b] if inplace else v[a, b]
                    if q != 1 or sp[a, b] != lab:
                        continue
                    cls = yhat[a, b]
                    if 0 <= cls < K:
                        counts[cls] += 1
            best = 0
            for k in range(1, K):
                if counts[k] > counts[best]:
                    best = k
            if K > 0 and counts[best] > 4:
                out[h, w] = 1
    return out_np
