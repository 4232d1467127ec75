"""Sequence matching over per-frame features.

Pipeline: pairwise difference matrix -> per-column local contrast
enhancement -> constant-velocity line search of length d_s around each
query frame -> ratio-test acceptance against the best competitor outside
an exclusion window. Correctness tolerates a bounded frame offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["MatchResult", "difference_matrix", "contrast_enhance",
           "velocity_grid", "sequence_score", "match", "is_correct"]


@dataclass
class MatchResult:
    query_index: int
    ref_index: int
    seq_score: float     # best line mean over the shifted enhanced matrix
    ratio: float         # acceptance statistic: best / best-outside-window
    accepted: bool


def difference_matrix(query: np.ndarray, ref: np.ndarray,
                      metric: str = "l2") -> np.ndarray:
    """D[i, j] = distance between query frame i and reference frame j.

    Feature rows are flattened; 'l2' is Euclidean, 'sad' is mean absolute
    difference. Exact elementwise evaluation keeps D[i,j] == 0 whenever
    the two rows are identical.
    """
    if len(query) == 0 or len(ref) == 0:
        raise DataError("difference_matrix: empty trajectory")
    q = np.asarray(query, dtype=np.float64).reshape(len(query), -1)
    r = np.asarray(ref, dtype=np.float64).reshape(len(ref), -1)
    if q.shape[1] != r.shape[1]:
        raise DataError(f"difference_matrix: feature dims differ "
                        f"{q.shape[1]} vs {r.shape[1]}")
    diff = q[:, None, :] - r[None, :, :]
    if metric == "l2":
        return np.sqrt((diff * diff).sum(axis=2))
    if metric == "sad":
        return np.abs(diff).mean(axis=2)
    raise DataError(f"difference_matrix: unknown metric {metric!r}")


def contrast_enhance(d: np.ndarray, window: int) -> np.ndarray:
    """Standardize each entry by the mean/std of its column neighborhood.

    The window of `window` rows is shifted to stay inside the column
    (clamped near the edges), so interior and border entries are both
    normalized over the same count. Population std; a window with
    std < 1e-12 uses 1 instead.
    """
    if window < 1:
        raise DataError(f"contrast_enhance: window must be >= 1, got {window}")
    d = np.asarray(d, dtype=np.float64)
    q, r = d.shape
    w = min(window, q)
    lo = np.clip(np.arange(q) - w // 2, 0, q - w)
    hi = lo + w
    # center each column first so the cumulative-sum variance below does
    # not lose precision to cancellation (constant columns come out 0)
    c = d - d.mean(axis=0, keepdims=True)
    zeros = np.zeros((1, r))
    cs = np.vstack([zeros, np.cumsum(c, axis=0)])
    cs2 = np.vstack([zeros, np.cumsum(c * c, axis=0)])
    mean = (cs[hi] - cs[lo]) / w
    var = np.maximum((cs2[hi] - cs2[lo]) / w - mean * mean, 0.0)
    std = np.sqrt(var)
    std = np.where(std < 1e-12, 1.0, std)
    return (c - mean) / std


def velocity_grid(v_min: float, v_max: float, v_step: float) -> np.ndarray:
    """Velocities at integer multiples of v_step inside [v_min, v_max]."""
    k0 = math.ceil(v_min / v_step - 1e-9)
    k1 = math.floor(v_max / v_step + 1e-9)
    if k1 < k0:
        raise DataError(f"velocity_grid: empty range [{v_min}, {v_max}] "
                        f"step {v_step}")
    return np.arange(k0, k1 + 1) * v_step


def _anchor_rows(i: int, q: int, d_s: int) -> np.ndarray:
    """d_s consecutive query rows containing i, centered with clamping."""
    i0 = int(np.clip(i - d_s // 2, 0, q - d_s))
    return np.arange(i0, i0 + d_s)


def sequence_score(d_hat: np.ndarray, i: int, j: int, d_s: int,
                   velocities: np.ndarray) -> float:
    """Min over velocities of the mean of d_hat along the line through
    (i, j): row q maps to column nearest to j + v*(q - i). Velocities
    whose line leaves the matrix do not count; +inf if none fits.
    """
    q, r = d_hat.shape
    if d_s > q:
        raise DataError(f"sequence_score: d_s={d_s} exceeds {q} query frames")
    rows = _anchor_rows(i, q, d_s)
    best = math.inf
    for v in velocities:
        cols = np.rint(j + v * (rows - i)).astype(np.int64)
        if cols.min() < 0 or cols.max() >= r:
            continue
        best = min(best, float(d_hat[rows, cols].mean()))
    return best


def _scores_for_query(s: np.ndarray, i: int, d_s: int,
                      velocities: np.ndarray) -> np.ndarray:
    """sequence_score(s, i, j) for every j at once (offsets are shared)."""
    q, r = s.shape
    rows = _anchor_rows(i, q, d_s)
    out = np.full(r, np.inf)
    for v in velocities:
        offs = np.rint(v * (rows - i)).astype(np.int64)
        j_lo = max(0, -int(offs.min()))
        j_hi = min(r, r - int(offs.max()))
        if j_lo >= j_hi:
            continue
        acc = np.zeros(j_hi - j_lo)
        for t, off in zip(rows, offs):
            acc += s[t, j_lo + off:j_hi + off]
        np.minimum(out[j_lo:j_hi], acc / d_s, out=out[j_lo:j_hi])
    return out


def match(query_feats: np.ndarray, ref_feats: np.ndarray, *, d_s: int = 10,
          v_min: float = 0.8, v_max: float = 1.25, v_step: float = 0.125,
          window: int = 10, exclusion: int = 20, mu: float = 0.9,
          metric: str = "l2") -> list[MatchResult]:
    """Best reference frame per query frame plus ratio-test acceptance.

    The enhanced matrix is shifted to strictly positive values before
    scoring so the best/best-outside ratio lands in (0, 1]; mu = 0 then
    accepts nothing. A query with no competitor outside the exclusion
    window gets ratio 1 (no distinctiveness evidence).
    """
    nq, nr = len(query_feats), len(ref_feats)
    if nq < d_s or nr < d_s:
        raise DataError(f"match: need at least d_s={d_s} frames, "
                        f"got query={nq}, ref={nr}")
    d = difference_matrix(query_feats, ref_feats, metric)
    d_hat = contrast_enhance(d, window)
    s = d_hat - d_hat.min() + 1.0
    velocities = velocity_grid(v_min, v_max, v_step)

    results = []
    for i in range(nq):
        scores = _scores_for_query(s, i, d_s, velocities)
        j = int(scores.argmin())
        best = float(scores[j])
        outside = np.abs(np.arange(nr) - j) > exclusion
        ratio = 1.0
        if outside.any():
            competitor = float(scores[outside].min())
            if math.isfinite(competitor):
                ratio = best / competitor
        accepted = ratio <= mu
        results.append(MatchResult(i, j, best, ratio, accepted))
    return results


def is_correct(matched_index: int, truth_index: int, tolerance: int = 10) -> bool:
    """Within `tolerance` frames, boundary inclusive."""
    return abs(int(matched_index) - int(truth_index)) <= tolerance
