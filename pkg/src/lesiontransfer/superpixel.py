"""SLIC superpixels and superpixel-guided refinement of pseudo-label weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage.color import rgb2lab

from .kernels import get_backend


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int64 in [0, count)
    count: int
    k_sp: int
    compactness: float
    iters: int


def _grid(H: int, W: int, k_sp: int) -> tuple[int, int]:
    ny = max(1, min(H, int(math.floor(math.sqrt(k_sp * H / W) + 0.5))))
    nx = max(1, min(W, int(math.floor(k_sp / ny + 0.5))))
    return ny, nx


def _initial_centers(lab: np.ndarray, k_sp: int) -> np.ndarray:
    H, W = lab.shape[:2]
    ny, nx = _grid(H, W, k_sp)
    centers = np.empty((ny * nx, 5))
    c = 0
    for i in range(ny):
        y = (i + 0.5) * H / ny - 0.5
        for j in range(nx):
            x = (j + 0.5) * W / nx - 0.5
            py = min(int(math.floor(y + 0.5)), H - 1)
            px = min(int(math.floor(x + 0.5)), W - 1)
            centers[c, :3] = lab[py, px]
            centers[c, 3], centers[c, 4] = y, x
            c += 1
    return centers


def _update_centers(lab: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    H, W = labels.shape
    n = centers.shape[0]
    flat = labels.reshape(-1)
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    feats = [lab[..., 0], lab[..., 1], lab[..., 2], yy, xx]
    new = centers.copy()
    live = counts > 0
    for d, f in enumerate(feats):
        sums = np.bincount(flat, weights=f.reshape(-1), minlength=n)
        new[live, d] = sums[live] / counts[live]
    return new


def _merge_orphans(labels: np.ndarray, kern) -> tuple[np.ndarray, int]:
    """Make every label a single 4-connected region.

    For each label the largest component is kept; every other component is
    merged into the neighbouring region it shares the longest border with.
    """
    comp, ncomp = kern.connected_components(np.ascontiguousarray(labels, dtype=np.int64))
    flat_comp = comp.reshape(-1)
    sizes = np.bincount(flat_comp, minlength=ncomp)
    comp_label = np.empty(ncomp, dtype=np.int64)
    comp_label[flat_comp] = labels.reshape(-1)

    keep = np.zeros(ncomp, dtype=bool)
    best: dict[int, int] = {}
    for c in range(ncomp):
        lab = int(comp_label[c])
        if lab not in best or sizes[c] > sizes[best[lab]]:
            best[lab] = c
    keep[list(best.values())] = True

    # border lengths between adjacent components, kept per merged group
    adj: list[dict[int, int]] = [dict() for _ in range(ncomp)]
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs, counts = np.unique(np.stack([a[diff], b[diff]], axis=1), axis=0, return_counts=True)
        for (x, y), n in zip(pairs.tolist(), counts.tolist()):
            adj[x][y] = adj[x].get(y, 0) + n
            adj[y][x] = adj[y].get(x, 0) + n

    parent = np.arange(ncomp)

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    orphans = sorted(np.flatnonzero(~keep).tolist(), key=lambda c: (sizes[c], c))
    for o in orphans:
        root = find(o)
        if not adj[root]:
            continue
        # longest shared border; ties go to the lowest group id
        target = min(adj[root].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        for nb, n in adj[root].items():
            del adj[nb][root]
            if nb != target:
                adj[target][nb] = adj[target].get(nb, 0) + n
                adj[nb][target] = adj[nb].get(target, 0) + n
        adj[root] = {}
        parent[root] = target

    roots = np.array([find(c) for c in range(ncomp)])
    merged = roots[comp]
    _, first = np.unique(merged.reshape(-1), return_index=True)
    order = merged.reshape(-1)[np.sort(first)]
    remap = np.full(ncomp, -1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[merged], int(order.size)


def slic(image: np.ndarray, k_sp: int = 64, compactness: float = 10.0, iters: int = 10,
         backend: str | None = None) -> SuperpixelMap:
    """SLIC over an ``H x W x 3`` RGB image in [0, 1].

    Distances combine CIELAB colour and pixel position scaled by
    ``compactness / S`` with ``S = sqrt(H*W / k_sp)``; each centre only competes
    for pixels inside its ``2S x 2S`` window. A final pass relabels orphan
    fragments so that every superpixel is 4-connected.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    H, W = image.shape[:2]
    if k_sp < 1 or iters < 1:
        raise ValueError("k_sp and iters must be >= 1")
    if k_sp > H * W:
        raise ValueError(f"k_sp={k_sp} exceeds pixel count {H * W}")
    kern = get_backend(backend)
    lab = np.ascontiguousarray(rgb2lab(np.clip(image, 0.0, 1.0)), dtype=np.float64)
    S = math.sqrt(H * W / k_sp)
    centers = _initial_centers(lab, k_sp)
    labels = np.zeros((H, W), dtype=np.int64)
    dist = np.empty((H, W), dtype=np.float64)
    yy, xx = np.mgrid[0:H, 0:W]
    # seed with the spatial Voronoi partition so no pixel starts unassigned
    d0 = (yy[None] - centers[:, 3, None, None]) ** 2 + (xx[None] - centers[:, 4, None, None]) ** 2
    labels[...] = np.argmin(d0, axis=0)
    for _ in range(iters):
        kern.slic_assign(lab, np.ascontiguousarray(centers), float(S), float(compactness), labels, dist)
        centers = _update_centers(lab, labels, centers)
    merged, count = _merge_orphans(labels, kern)
    return SuperpixelMap(merged, count, k_sp, compactness, iters)


def refine_weights(v: np.ndarray, yhat: np.ndarray, sp, K: int, inplace: bool = False,
                   backend: str | None = None) -> np.ndarray:
    """Switch on unselected pixels backed by more than four same-superpixel,
    same-class, already-selected pixels in their clipped 3x3 neighbourhood.

    The count is taken for every class and compared at the argmax class;
    ``yhat`` is never modified. With ``inplace=False`` all counts read the
    input mask, so the result does not depend on scan order.
    """
    labels = sp.labels if isinstance(sp, SuperpixelMap) else sp
    v = np.ascontiguousarray(v, dtype=np.uint8)
    yhat = np.ascontiguousarray(yhat, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if not (v.shape == yhat.shape == labels.shape):
        raise ValueError(f"extent mismatch: v {v.shape}, yhat {yhat.shape}, sp {labels.shape}")
    return get_backend(backend).refine_votes(v, yhat, labels, int(K), bool(inplace))
