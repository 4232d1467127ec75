"""Non-learned comparison features: VLAD over k-means clusters and
SeqSLAM-style SAD image descriptors."""

from __future__ import annotations

import numpy as np

from .errors import DataError

__all__ = ["kmeans_fit", "vlad_encode", "sad_descriptor", "sad_distance",
           "image_local_descriptors", "rgb_to_gray"]


def kmeans_fit(points: np.ndarray, k: int, seed: int,
               max_iters: int = 100) -> np.ndarray:
    """Lloyd iterations with greedy distance-weighted seeding.

    Runs until the assignment reaches a fixpoint or max_iters; empty
    clusters are re-seeded to the point farthest from its center, which
    keeps the objective non-increasing. Deterministic given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise DataError(f"kmeans_fit: need 1 <= K <= #points, got K={k}, n={n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[np.searchsorted(np.cumsum(d2 / total),
                                                rng.random(), side="right").clip(0, n - 1)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iters):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                far = dist.min(axis=1).argmax()
                centers[j] = points[far]
    return centers.astype(np.float32)


def _assignments(points: np.ndarray, centers: np.ndarray, soft: bool) -> np.ndarray:
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    if soft:
        z = -dist
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    q = np.zeros_like(dist)
    q[np.arange(len(points)), dist.argmin(axis=1)] = 1.0
    return q


def vlad_encode(points: np.ndarray, centers: np.ndarray,
                soft: bool = False) -> np.ndarray:
    """Residual aggregation: v_k = sum_i q_ik (x_i - mu_k), concatenated
    over clusters and L2-normalized."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DataError(f"vlad_encode: need a non-empty (N, D) array, got {points.shape}")
    if points.shape[1] != centers.shape[1]:
        raise DataError(f"vlad_encode: feature dim {points.shape[1]} != "
                        f"codebook dim {centers.shape[1]}")
    q = _assignments(points, centers, soft)
    # v[k] = sum_i q[i,k] * (x[i] - mu[k])
    v = q.T @ points - q.sum(axis=0)[:, None] * centers
    flat = v.reshape(-1)
    norm = np.linalg.norm(flat)
    if norm > 0:
        flat = flat / norm
    return flat.astype(np.float32)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance-weighted grayscale in [0,1] from uint8 or float RGB."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    if img.ndim == 3:
        return (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)).astype(np.float32)
    return img.astype(np.float32)


def _block_mean(gray: np.ndarray, down: int) -> np.ndarray:
    h, w = gray.shape
    if h == down and w == down:
        return gray
    if h % down or w % down:
        raise DataError(f"sad_descriptor: {h}x{w} not divisible into {down}x{down}")
    fh, fw = h // down, w // down
    return gray.reshape(down, fh, down, fw).mean(axis=(1, 3))


def sad_descriptor(image: np.ndarray, down: int = 32, patch: int = 8) -> np.ndarray:
    """Grayscale, block-averaged, patch-standardized image vector.

    patch=0 disables the per-patch normalization (raw intensities).
    """
    g = _block_mean(rgb_to_gray(image), down)
    if patch:
        if down % patch:
            raise DataError(f"sad_descriptor: patch {patch} does not tile {down}")
        t = down // patch
        blocks = g.reshape(t, patch, t, patch).transpose(0, 2, 1, 3)
        mu = blocks.mean(axis=(2, 3), keepdims=True)
        sd = blocks.std(axis=(2, 3), keepdims=True)
        sd = np.where(sd < 1e-12, 1.0, sd)
        blocks = (blocks - mu) / sd
        g = blocks.transpose(0, 2, 1, 3).reshape(down, down)
    return g.reshape(-1).astype(np.float32)


def sad_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"sad_distance: shapes differ {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def image_local_descriptors(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """Tile the grayscale image into grid x grid patches, one flattened
    descriptor per patch (the local-feature source for the VLAD baseline)."""
    g = rgb_to_gray(image)
    h, w = g.shape
    if h % grid or w % grid:
        raise DataError(f"image_local_descriptors: {h}x{w} not divisible by {grid}")
    ph, pw = h // grid, w // grid
    patches = g.reshape(grid, ph, grid, pw).transpose(0, 2, 1, 3)
    return patches.reshape(grid * grid, ph * pw).astype(np.float32)
