"""Binary file formats and atomic write helpers.

All formats are little-endian with an 8-byte ASCII magic prefix:

  weights   "MDFLW001": repeated records of (u32 name_len, name bytes,
            u32 rank, rank*u32 dims, float32 payload) until EOF
  features  "MDFLF001": u32 header (frame_count, K, D_feature, D_C),
            then per frame K*D_feature + D_C float32 values
  codebook  "MDFLC001": u32 (K, D), then K*D float32 centers
  dataset   "MDFLD001": u32 header (n_frames, C, height, width, channels),
            then per frame u32 condition_id, u32 frame_index, raw RGB bytes

Writes go through a temp file and os.replace so a crashed run never
leaves a partial file under the final name.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import DataError

MAGIC_WEIGHTS = b"MDFLW001"
MAGIC_FEATURES = b"MDFLF001"
MAGIC_CODEBOOK = b"MDFLC001"
MAGIC_DATASET = b"MDFLD001"

__all__ = [
    "atomic_write", "save_weights", "load_weights",
    "save_features", "load_features", "save_codebook", "load_codebook",
    "save_dataset_file", "load_dataset_file",
]


class atomic_write:
    """Context manager yielding a file that replaces `path` on success."""

    def __init__(self, path: str, binary: bool = True):
        self.path = path
        self.tmp = path + ".tmp"
        self.binary = binary

    def __enter__(self) -> BinaryIO:
        if self.binary:
            self._fh = open(self.tmp, "wb")
        else:
            self._fh = open(self.tmp, "w", encoding="utf-8")
        return self._fh

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            try:
                os.unlink(self.tmp)
            except OSError:
                pass
        return False


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated file at byte {fh.tell() - len(buf)}: "
                        f"needed {n} bytes for {what}")
    return buf


def _check_magic(fh: BinaryIO, magic: bytes, path: str) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise DataError(f"{path}: bad magic at byte 0: "
                        f"expected {magic!r}, got {got!r}")


def _write_u32s(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def _read_u32s(fh: BinaryIO, count: int, what: str) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", _read_exact(fh, 4 * count, what))


# ------------------------------------------------------------------ weights

def save_weights(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays, sorted by name for stable hashes."""
    with atomic_write(path) as fh:
        fh.write(MAGIC_WEIGHTS)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            _write_u32s(fh, len(nb))
            fh.write(nb)
            _write_u32s(fh, arr.ndim, *arr.shape)
            fh.write(arr.tobytes())


def load_weights(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_WEIGHTS, path)
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"{path}: truncated record header at byte {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = _read_u32s(fh, 1, f"rank of {name}")
            dims = _read_u32s(fh, rank, f"dims of {name}") if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return out


# ----------------------------------------------------------------- features

def save_features(path: str, feats: np.ndarray, cond: np.ndarray | None = None) -> None:
    """feats is (n_frames, K, D_feature); cond is (n_frames, D_C) or None."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 3:
        raise DataError(f"features must be 3-D (frames, K, D), got {feats.shape}")
    n, k, d = feats.shape
    if cond is None:
        cond = np.zeros((n, 0), dtype="<f4")
    cond = np.ascontiguousarray(cond, dtype="<f4")
    if cond.shape[0] != n:
        raise DataError(f"condition rows {cond.shape[0]} != frame count {n}")
    dc = cond.shape[1]
    with atomic_write(path) as fh:
        fh.write(MAGIC_FEATURES)
        _write_u32s(fh, n, k, d, dc)
        for i in range(n):
            fh.write(feats[i].tobytes())
            if dc:
                fh.write(cond[i].tobytes())


def load_features(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_FEATURES, path)
        n, k, d, dc = _read_u32s(fh, 4, "feature header")
        per = k * d + dc
        raw = _read_exact(fh, 4 * per * n, "feature rows")
        rows = np.frombuffer(raw, dtype="<f4").reshape(n, per)
        feats = rows[:, :k * d].reshape(n, k, d).astype(np.float32)
        cond = rows[:, k * d:].astype(np.float32)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {n} frames")
    return feats, cond


# ----------------------------------------------------------------- codebook

def save_codebook(path: str, centers: np.ndarray) -> None:
    centers = np.ascontiguousarray(centers, dtype="<f4")
    if centers.ndim != 2:
        raise DataError(f"codebook must be 2-D (K, D), got {centers.shape}")
    with atomic_write(path) as fh:
        fh.write(MAGIC_CODEBOOK)
        _write_u32s(fh, centers.shape[0], centers.shape[1])
        fh.write(centers.tobytes())


def load_codebook(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_CODEBOOK, path)
        k, d = _read_u32s(fh, 2, "codebook header")
        raw = _read_exact(fh, 4 * k * d, "codebook centers")
        return np.frombuffer(raw, dtype="<f4").reshape(k, d).astype(np.float32)


# ------------------------------------------------------------------ dataset

def save_dataset_file(path: str, frames: np.ndarray, condition_ids: np.ndarray,
                      frame_indices: np.ndarray, condition_count: int) -> None:
    """frames is (n, H, W, 3) uint8; companion manifest CSV written beside."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3 or frames.dtype != np.uint8:
        raise DataError(f"frames must be (n, H, W, 3) uint8, got "
                        f"{frames.shape} {frames.dtype}")
    n, h, w, c = frames.shape
    condition_ids = np.asarray(condition_ids, dtype=np.uint32)
    frame_indices = np.asarray(frame_indices, dtype=np.uint32)
    if len(condition_ids) != n or len(frame_indices) != n:
        raise DataError("labels must match frame count")
    with atomic_write(path) as fh:
        fh.write(MAGIC_DATASET)
        _write_u32s(fh, n, condition_count, h, w, c)
        for i in range(n):
            _write_u32s(fh, int(condition_ids[i]), int(frame_indices[i]))
            fh.write(frames[i].tobytes())
    manifest = path + ".manifest.csv"
    with atomic_write(manifest) as fh:
        fh.write(b"record_no,condition_id,frame_index\n")
        for i in range(n):
            fh.write(f"{i},{condition_ids[i]},{frame_indices[i]}\n".encode())


def load_dataset_file(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_DATASET, path)
        n, ccount, h, w, c = _read_u32s(fh, 5, "dataset header")
        if (h, w, c) != (64, 64, 3):
            raise DataError(f"{path}: unsupported frame dims {h}x{w}x{c}")
        frames = np.empty((n, h, w, c), dtype=np.uint8)
        cond = np.empty(n, dtype=np.uint32)
        fidx = np.empty(n, dtype=np.uint32)
        frame_bytes = h * w * c
        for i in range(n):
            cond[i], fidx[i] = _read_u32s(fh, 2, f"labels of frame {i}")
            raw = _read_exact(fh, frame_bytes, f"pixels of frame {i}")
            frames[i] = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {n} frames")
    if n and cond.max() >= ccount:
        raise DataError(f"{path}: condition_id {cond.max()} out of range (C={ccount})")
    return frames, cond, fidx, int(ccount)
