"""Pseudo semantic labels from token features, no annotation required.

Per image: split tokens into foreground/background by clustering their L2
norms, cluster the foreground token vectors into N parts, then number the
parts 1..N top to bottom (label 1 is the topmost part, background is N+1).
One part per image can be masked out of the pixels for the re-feed path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .backbone import FeatureMap

BACKGROUND_OFFSET = 1  # background label = part_count + 1

# overlay palette: upper, lower, shoes, background (RGB in [0,1])
_PALETTE = np.array([
    [0.90, 0.25, 0.25],
    [0.25, 0.60, 0.90],
    [0.95, 0.80, 0.25],
    [0.35, 0.35, 0.35],
])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ starting centers."""
    m = points.shape[0]
    centers = [points[int(rng.integers(m))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.stack(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(m))])
            continue
        centers.append(points[int(rng.choice(m, p=d2 / total))])
    return np.stack(centers)


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int, tol: float) -> KMeansResult:
    centers = _plus_plus_seed(points, k, rng)
    history = []
    assign = np.zeros(points.shape[0], dtype=np.int64)
    for it in range(1, max_iter + 1):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        inertia = float(d2[np.arange(points.shape[0]), assign].sum())
        history.append(inertia)
        new_centers = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster from the point farthest from its center
                far = int(d2[np.arange(points.shape[0]), assign].argmax())
                new_centers[j] = points[far]
        moved = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if moved < tol:
            break
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(points.shape[0]), assign].sum())
    history.append(inertia)
    return KMeansResult(assign, centers, inertia, it, history)


def _exact_1d(points: np.ndarray, k: int) -> KMeansResult:
    """Optimal 1-D clustering by dynamic programming over the sorted order.

    Lloyd restarts can sit in a local minimum on a line; the DP cannot.
    Segment costs come from prefix sums, O(k n^2) overall.
    """
    flat = points[:, 0]
    order = np.argsort(flat, kind="stable")
    x = flat[order]
    n = len(x)
    pre = np.concatenate([[0.0], np.cumsum(x)])
    pre2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def seg(i, j):
        s = pre[j] - pre[i]
        return max(0.0, pre2[j] - pre2[i] - s * s / (j - i))

    best = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            for i in range(m - 1, j):
                cost = best[m - 1, i] + seg(i, j)
                if cost < best[m, j]:
                    best[m, j] = cost
                    split[m, j] = i
    assign_sorted = np.zeros(n, dtype=np.int64)
    j = n
    for m in range(k, 0, -1):
        i = split[m, j]
        assign_sorted[i:j] = m - 1
        j = i
    assign = np.zeros(n, dtype=np.int64)
    assign[order] = assign_sorted
    centers = np.stack([points[assign == c].mean(axis=0) for c in range(k)])
    inertia = float(best[k, n])
    return KMeansResult(assign, centers, inertia, 1, [inertia])


def kmeans(points, k: int, seed=0, max_iter: int = 100, tol: float = 1e-8,
           n_init: int = 8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of n_init restarts.

    One-dimensional input takes the exact dynamic-programming route instead.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if points.shape[0] < k:
        raise ValueError(f"fewer points ({points.shape[0]}) than clusters ({k})")
    if points.shape[1] == 1:
        return _exact_1d(points, k)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    # integer-derived restart seeds keep the parent's serialized state authoritative
    for restart_seed in rng.integers(0, 2 ** 63 - 1, size=n_init):
        res = _lloyd(points, k, np.random.default_rng(int(restart_seed)), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


@dataclass
class ForegroundMask:
    """Boolean (n, h, w) foreground grid plus per-image degeneracy flags."""

    masks: np.ndarray
    degenerate: np.ndarray


@dataclass
class SemanticLabelMap:
    """Integer (n, h, w) labels in {1..N+1}; background is N+1."""

    labels: np.ndarray
    part_count: int
    degenerate: np.ndarray

    @property
    def background_label(self) -> int:
        return self.part_count + BACKGROUND_OFFSET


def _token_grid(fm) -> np.ndarray:
    """Detached (n, h, w, c) array from a FeatureMap or raw (n, c, h, w) array."""
    tokens = fm.tokens.numpy() if isinstance(fm, FeatureMap) else np.asarray(fm)
    return np.transpose(tokens, (0, 2, 3, 1))


def split_foreground(fm_t, seed=0, tol: float = 1e-6) -> ForegroundMask:
    """Per-image 2-way k-means on token norms; larger-mean cluster wins."""
    grid = _token_grid(fm_t)
    n, h, w, _ = grid.shape
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masks = np.zeros((n, h, w), dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    image_seeds = rng.integers(0, 2 ** 63 - 1, size=n)
    for i in range(n):
        norms = np.linalg.norm(grid[i].reshape(h * w, -1), axis=1)
        if norms.max() - norms.min() < tol:
            degenerate[i] = True
            continue
        res = kmeans(norms, k=2, seed=int(image_seeds[i]), n_init=4)
        means = [norms[res.assignments == j].mean() if (res.assignments == j).any() else -np.inf
                 for j in (0, 1)]
        fg = int(np.argmax(means))
        mask = (res.assignments == fg).reshape(h, w)
        if mask.all() or not mask.any():
            degenerate[i] = True
            continue
        masks[i] = mask
    return ForegroundMask(masks, degenerate)


def assign_part_order(cluster_ids: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                      k: int) -> list:
    """Cluster ids sorted by mean row, then mean column, then id."""
    keys = []
    for j in range(k):
        members = cluster_ids == j
        if not members.any():
            raise ValueError(f"cluster {j} is empty")
        keys.append((float(rows[members].mean()), float(cols[members].mean()), j))
    return [j for _, _, j in sorted(keys)]


def cluster_parts(fm_t, fg: ForegroundMask, n_parts: int, seed=0) -> SemanticLabelMap:
    """K-means over foreground token vectors, then top-to-bottom renumbering."""
    grid = _token_grid(fm_t)
    n, h, w, c = grid.shape
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    background = n_parts + BACKGROUND_OFFSET
    labels = np.full((n, h, w), background, dtype=np.int32)
    degenerate = fg.degenerate.copy()
    uu, vv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    image_seeds = rng.integers(0, 2 ** 63 - 1, size=n)
    for i in range(n):
        if degenerate[i]:
            continue
        mask = fg.masks[i]
        count = int(mask.sum())
        if count < n_parts:
            degenerate[i] = True
            continue
        vectors = grid[i][mask].reshape(count, c)
        res = kmeans(vectors, k=n_parts, seed=int(image_seeds[i]), n_init=4)
        order = assign_part_order(res.assignments, uu[mask], vv[mask], n_parts)
        relabel = np.empty(n_parts, dtype=np.int32)
        for rank, cid in enumerate(order):
            relabel[cid] = rank + 1
        img_labels = labels[i]
        img_labels[mask] = relabel[res.assignments]
    return SemanticLabelMap(labels, n_parts, degenerate)


def make_labels(fm_t, n_parts: int, seed=0) -> SemanticLabelMap:
    """Foreground split followed by part clustering, one seed stream each."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fg_seed, part_seed = (int(s) for s in rng.integers(0, 2 ** 63 - 1, size=2))
    fg = split_foreground(fm_t, seed=fg_seed)
    return cluster_parts(fm_t, fg, n_parts, seed=part_seed)


def mask_part(images: np.ndarray, label_map: SemanticLabelMap, rng: np.random.Generator,
              patch_px: int) -> tuple:
    """Zero the pixels of one uniformly chosen part per image.

    Zero is the normalized dataset mean. Degenerate images pass through
    unmasked with chosen part 0.
    """
    n = images.shape[0]
    masked = images.copy()
    chosen = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if label_map.degenerate[i]:
            continue
        part = int(rng.integers(1, label_map.part_count + 1))
        chosen[i] = part
        cells = label_map.labels[i] == part
        pix = np.kron(cells, np.ones((patch_px, patch_px), dtype=bool))
        masked[i][:, pix] = 0.0
    return masked, chosen


# -- exports -------------------------------------------------------------------


def label_overlay_png(pixels01: np.ndarray, labels: np.ndarray, path: str,
                      alpha: float = 0.55) -> None:
    """Blend per-class colors over one (3, H, W) image in [0,1] and save."""
    _, h, w = pixels01.shape
    gh, gw = labels.shape
    up = np.kron(labels, np.ones((h // gh, w // gw), dtype=labels.dtype))
    color = _PALETTE[np.clip(up - 1, 0, len(_PALETTE) - 1)].transpose(2, 0, 1)
    blended = (1 - alpha) * pixels01 + alpha * color
    arr = np.round(np.clip(blended, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def save_label_grids(label_map: SemanticLabelMap, path: str) -> None:
    """Flat little-endian binary: u32 n, h, w, part_count then int32 labels."""
    n, h, w = label_map.labels.shape
    with open(path, "wb") as fh:
        header = np.asarray([n, h, w, label_map.part_count], dtype="<u4")
        fh.write(header.tobytes())
        fh.write(label_map.labels.astype("<i4").tobytes())
        fh.write(label_map.degenerate.astype("<u1").tobytes())


def load_label_grids(path: str) -> SemanticLabelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    n, h, w, parts = np.frombuffer(raw[:16], dtype="<u4")
    body = n * h * w * 4
    labels = np.frombuffer(raw[16:16 + body], dtype="<i4").reshape(n, h, w)
    degenerate = np.frombuffer(raw[16 + body:16 + body + n], dtype="<u1").astype(bool)
    return SemanticLabelMap(labels.copy(), int(parts), degenerate.copy())


def export_overlays(images: np.ndarray, label_map: SemanticLabelMap, out_dir: str,
                    denorm) -> list:
    """PNG overlay per image; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(images.shape[0]):
        path = os.path.join(out_dir, f"labels_{i:05d}.png")
        label_overlay_png(denorm(images[i]), label_map.labels[i], path)
        paths.append(path)
    return paths
