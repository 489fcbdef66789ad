"""SLIC superpixels: localized k-means in CIELAB + image-plane coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import Rng, SuperpixelMap, as_image

# D65 reference white, XYZ scaled so that Y_n = 1
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_DELTA = 6.0 / 29.0


@dataclass(frozen=True)
class SlicParams:
    q_requested: int
    compactness: float = 10.0
    iterations: int = 10
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.q_requested < 1:
            raise ValueError("q_requested must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.min_region_fraction < 0:
            raise ValueError("min_region_fraction must be non-negative")


def rgb_to_lab(image) -> np.ndarray:
    """Convert an sRGB image in [0, 1] to CIE L*a*b* (D65)."""
    rgb = as_image(image)
    if rgb.shape[2] != 3:
        raise ValueError("rgb_to_lab needs a 3-channel image")
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T / _WHITE_D65
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _features(image: np.ndarray) -> np.ndarray:
    if image.shape[2] == 3:
        return rgb_to_lab(image)
    # grayscale: lightness channel only
    return rgb_to_lab(np.repeat(image, 3, axis=2))[..., :1].copy()


def grid_shape(q: int, height: int, width: int) -> tuple[int, int]:
    """Rows and columns of the initial center grid for ``q`` requested clusters."""
    ny = max(1, min(height, int(round(math.sqrt(q * height / width)))))
    nx = max(1, min(width, int(round(q / ny))))
    return ny, nx


@numba.njit(cache=True, nogil=True)
def _slic_kernel(feat, centers, labels, step, compactness, iterations):
    h, w, c = feat.shape
    k = centers.shape[0]
    ratio = compactness / step
    dist = np.empty((h, w))
    sums = np.zeros((k, 2 + c))
    counts = np.zeros(k)
    for _ in range(iterations):
        dist[:, :] = np.inf
        for ci in range(k):
            cy = centers[ci, 0]
            cx = centers[ci, 1]
            y0 = max(0, int(math.floor(cy - step)))
            y1 = min(h - 1, int(math.ceil(cy + step)))
            x0 = max(0, int(math.floor(cx - step)))
            x1 = min(w - 1, int(math.ceil(cx + step)))
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    dc = 0.0
                    for ch in range(c):
                        diff = feat[y, x, ch] - centers[ci, 2 + ch]
                        dc += diff * diff
                    dy = y - cy
                    dx = x - cx
                    d = math.sqrt(dc) + ratio * math.sqrt(dy * dy + dx * dx)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = ci
        sums[:, :] = 0.0
        counts[:] = 0.0
        for y in range(h):
            for x in range(w):
                ci = labels[y, x]
                counts[ci] += 1.0
                sums[ci, 0] += y
                sums[ci, 1] += x
                for ch in range(c):
                    sums[ci, 2 + ch] += feat[y, x, ch]
        for ci in range(k):
            if counts[ci] > 0:
                for j in range(2 + c):
                    centers[ci, j] = sums[ci, j] / counts[ci]
    return labels


@numba.njit(cache=True, nogil=True)
def _components(labels):
    """4-connected components of equal-label pixels, numbered in raster order."""
    h, w = labels.shape
    comp = -np.ones((h, w), dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    raw = np.zeros(h * w, dtype=np.int64)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            lab = labels[sy, sx]
            comp[sy, sx] = n
            top = 0
            stack[top] = sy * w + sx
            top += 1
            size = 0
            while top > 0:
                top -= 1
                p = stack[top]
                y = p // w
                x = p % w
                size += 1
                if y > 0 and comp[y - 1, x] < 0 and labels[y - 1, x] == lab:
                    comp[y - 1, x] = n
                    stack[top] = p - w
                    top += 1
                if y < h - 1 and comp[y + 1, x] < 0 and labels[y + 1, x] == lab:
                    comp[y + 1, x] = n
                    stack[top] = p + w
                    top += 1
                if x > 0 and comp[y, x - 1] < 0 and labels[y, x - 1] == lab:
                    comp[y, x - 1] = n
                    stack[top] = p - 1
                    top += 1
                if x < w - 1 and comp[y, x + 1] < 0 and labels[y, x + 1] == lab:
                    comp[y, x + 1] = n
                    stack[top] = p + 1
                    top += 1
            sizes[n] = size
            raw[n] = lab
            n += 1
    return comp, sizes[:n].copy(), raw[:n].copy()


@numba.njit(cache=True, nogil=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True, nogil=True)
def _merge_small(comp, sizes, threshold):
    """Union small components into their largest 4-adjacent neighbour.

    Returns the root component of every component.
    """
    h, w = comp.shape
    n = sizes.shape[0]
    parent = np.arange(n)
    size = sizes.copy()
    # member pixels of each group as linked lists: head/tail per root, next per pixel
    head = -np.ones(n, dtype=np.int64)
    tail = -np.ones(n, dtype=np.int64)
    nxt = -np.ones(h * w, dtype=np.int64)
    for p in range(h * w):
        c = comp[p // w, p % w]
        if head[c] < 0:
            head[c] = p
        else:
            nxt[tail[c]] = p
        tail[c] = p
    order = np.argsort(sizes, kind="mergesort")
    changed = True
    while changed:
        changed = False
        for c in order:
            if parent[c] != c or size[c] >= threshold:
                continue
            best = -1
            p = head[c]
            while p >= 0:
                y = p // w
                x = p % w
                for k in range(4):
                    if k == 0:
                        if y == 0:
                            continue
                        q = comp[y - 1, x]
                    elif k == 1:
                        if y == h - 1:
                            continue
                        q = comp[y + 1, x]
                    elif k == 2:
                        if x == 0:
                            continue
                        q = comp[y, x - 1]
                    else:
                        if x == w - 1:
                            continue
                        q = comp[y, x + 1]
                    t = _find(parent, q)
                    if t == c:
                        continue
                    if best < 0 or size[t] > size[best] or (size[t] == size[best] and t < best):
                        best = t
                p = nxt[p]
            if best < 0:
                continue
            parent[c] = best
            size[best] += size[c]
            nxt[tail[best]] = head[c]
            tail[best] = tail[c]
            changed = True
    roots = np.empty(n, dtype=np.int64)
    for i in range(n):
        roots[i] = _find(parent, i)
    return roots


def enforce_connectivity(labels, min_region_fraction: float = 0.25) -> SuperpixelMap:
    """Split labels into 4-connected regions and absorb the small ones.

    A region smaller than ``min_region_fraction * H*W / L`` (``L`` = number of
    distinct input labels) is merged into its largest adjacent region. Output
    IDs are ordered by (input label, raster position) so a labeling that is
    already connected and contiguous comes back unchanged.
    """
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    if lab.ndim != 2 or lab.size == 0:
        raise ValueError("labels must be a non-empty 2-D grid")
    comp, sizes, raw = _components(lab)
    threshold = min_region_fraction * lab.size / len(np.unique(raw))
    roots = _merge_small(comp, sizes, float(threshold))
    # components are numbered in raster order, so a root's index is its first-pixel rank
    unique_roots = np.unique(roots)
    order = np.lexsort((unique_roots, raw[unique_roots]))
    new_id = np.empty(len(sizes), dtype=np.int64)
    new_id[unique_roots[order]] = np.arange(len(unique_roots))
    return SuperpixelMap(new_id[roots][comp])


def slic_segment(image, params: SlicParams, rng: Rng | None = None) -> SuperpixelMap:
    """Segment ``image`` into roughly ``params.q_requested`` superpixels.

    Centers start on a regular grid, so ``rng`` is unused by this variant;
    the output is a pure function of image and parameters.
    """
    img = as_image(image)
    h, w = img.shape[:2]
    q = params.q_requested
    if q > h * w:
        raise ValueError(f"q_requested={q} exceeds pixel count {h * w}")
    feat = np.ascontiguousarray(_features(img))
    step = math.sqrt(h * w / q)
    ny, nx = grid_shape(q, h, w)

    cy = (np.arange(ny) + 0.5) * h / ny - 0.5
    cx = (np.arange(nx) + 0.5) * w / nx - 0.5
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    iy = np.clip(np.rint(gy).astype(int), 0, h - 1)
    ix = np.clip(np.rint(gx).astype(int), 0, w - 1)
    centers = np.concatenate(
        [gy.reshape(-1, 1), gx.reshape(-1, 1), feat[iy, ix].reshape(ny * nx, -1)], axis=1
    )
    # initial assignment: the grid cell each pixel falls in
    row_cell = np.minimum(np.arange(h) * ny // h, ny - 1)
    col_cell = np.minimum(np.arange(w) * nx // w, nx - 1)
    labels = (row_cell[:, None] * nx + col_cell[None, :]).astype(np.int64)

    labels = _slic_kernel(feat, centers, labels, step, float(params.compactness), params.iterations)
    return enforce_connectivity(labels, params.min_region_fraction)
