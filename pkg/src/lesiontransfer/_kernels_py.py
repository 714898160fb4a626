"""Pure-numpy fallbacks for the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

_FOUR = ndimage.generate_binary_structure(2, 1)


def slic_assign(lab, centers, S, m, labels, dist):
    H, W = lab.shape[:2]
    w = (m / S) * (m / S)
    dist[...] = np.inf
    for c in range(centers.shape[0]):
        L, A, B, y0, x0 = (float(v) for v in centers[c])
        r0 = max(int(math.ceil(y0 - S)), 0)
        r1 = min(int(math.floor(y0 + S)), H - 1)
        c0 = max(int(math.ceil(x0 - S)), 0)
        c1 = min(int(math.floor(x0 + S)), W - 1)
        if r1 < r0 or c1 < c0:
            continue
        dy = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] - y0
        dx = np.arange(c0, c1 + 1, dtype=np.float64)[None, :] - x0
        win = lab[r0:r1 + 1, c0:c1 + 1]
        dl = win[..., 0] - L
        da = win[..., 1] - A
        db = win[..., 2] - B
        d = (dl * dl + da * da + db * db) + (dy * dy + dx * dx) * w
        cur = dist[r0:r1 + 1, c0:c1 + 1]
        better = d < cur
        cur[better] = d[better]
        labels[r0:r1 + 1, c0:c1 + 1][better] = c


def connected_components(labels):
    H, W = labels.shape
    comp = np.full((H, W), -1, dtype=np.int64)
    nxt = 0
    for value in np.unique(labels):
        lab, n = ndimage.label(labels == value, structure=_FOUR)
        sel = lab > 0
        comp[sel] = lab[sel] - 1 + nxt
        nxt += n
    # renumber by raster order of first pixel
    flat = comp.reshape(-1)
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(nxt, dtype=np.int64)
    remap[order] = np.arange(nxt)
    return remap[comp], int(nxt)


def _shifted(arr, dy, dx, fill):
    H, W = arr.shape
    out = np.full((H, W), fill, dtype=arr.dtype)
    ys = slice(max(dy, 0), H + min(dy, 0))
    yd = slice(max(-dy, 0), H + min(-dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    xd = slice(max(-dx, 0), W + min(-dx, 0))
    out[yd, xd] = arr[ys, xs]
    return out


def refine_votes(v, yhat, sp, K, inplace):
    if inplace:
        return _refine_inplace(v, yhat, sp, K)
    counts = np.zeros((max(K, 1),) + v.shape, dtype=np.int64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            vs = _shifted(v, dy, dx, 0)
            ss = _shifted(sp, dy, dx, -1)
            ys = _shifted(yhat, dy, dx, -1)
            ok = (vs == 1) & (ss == sp)
            for k in range(K):
                counts[k] += ok & (ys == k)
    best = counts.max(axis=0) if K > 0 else np.zeros(v.shape, np.int64)
    out = v.copy()
    out[(v == 0) & (best > 4)] = 1
    return out


def _refine_inplace(v, yhat, sp, K):
    out = v.copy()
    H, W = v.shape
    for h in range(H):
        for w in range(W):
            if out[h, w] != 0:
                continue
            counts = [0] * K
            for a in range(max(h - 1, 0), min(h + 2, H)):
                for b in range(max(w - 1, 0), min(w + 2, W)):
                    if out[a, b] == 1 and sp[a, b] == sp[h, w] and 0 <= yhat[a, b] < K:
                        counts[yhat[a, b]] += 1
            if K and max(counts) > 4:
                out[h, w] = 1
    return out
