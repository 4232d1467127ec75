"""Deterministic synthetic multi-condition trajectory generator.

A seeded world strip of colored rectangles and circles is rendered once;
a 64x64 camera window slides along it two pixels per frame. Every
condition re-renders the same geometry through a pixel-local transform
(hue rotation, brightness gain, fog blend toward mid-gray, additive
noise), so frames with equal frame_index depict identical scenes under
different appearances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .errors import ConfigError, DataError

__all__ = ["ConditionSpec", "TrajectoryDataset", "generate", "generate_raw",
           "split", "default_condition_specs", "parse_condition_specs",
           "rgb_to_hsv", "hsv_to_rgb"]

FRAME_SIZE = 64
CAMERA_STEP = 2
FOG_GRAY = 0.5


@dataclass(frozen=True)
class ConditionSpec:
    hue_deg: float = 0.0
    brightness: float = 1.0
    fog: float = 0.0
    noise: float = 0.0

    def is_identity(self) -> bool:
        return (self.hue_deg == 0.0 and self.brightness == 1.0
                and self.fog == 0.0 and self.noise == 0.0)


# Hue shifts climb in 35-degree steps while brightness and fog alternate
# around the sides of the clean anchor; brightness stays at or below 1.12
# so highlights never clip hard, and fog tops out at 0.28 so geometry
# survives in every condition.
_DEFAULT_TABLE = (
    ConditionSpec(0.0, 1.0, 0.08, 0.05),
    ConditionSpec(35.0, 0.8, 0.28, 0.08),
    ConditionSpec(70.0, 1.12, 0.20, 0.07),
    ConditionSpec(105.0, 0.9, 0.12, 0.06),
    ConditionSpec(140.0, 1.05, 0.24, 0.05),
    ConditionSpec(175.0, 0.85, 0.16, 0.07),
)


def default_condition_specs(count: int) -> list[ConditionSpec]:
    return [_DEFAULT_TABLE[i % len(_DEFAULT_TABLE)] for i in range(count)]


def parse_condition_specs(raw: str) -> list[ConditionSpec]:
    """Parse 'hue:brightness:fog:noise;...' into specs."""
    specs = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 4:
            raise ConfigError(f"condition spec needs 4 fields, got {part!r}")
        try:
            h, b, f, n = (float(x) for x in fields)
        except ValueError as e:
            raise ConfigError(f"non-numeric condition spec {part!r}") from e
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"fog alpha must be in [0,1], got {f}")
        specs.append(ConditionSpec(h, b, f, n))
    return specs


# ------------------------------------------------------------ color space

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV, all components in [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    c = maxc - minc
    safe_max = np.where(maxc == 0, 1.0, maxc)
    s = np.where(maxc == 0, 0.0, c / safe_max)
    safe_c = np.where(c == 0, 1.0, c)
    rc = (maxc - r) / safe_c
    gc = (maxc - g) / safe_c
    bc = (maxc - b) / safe_c
    h = np.select([r == maxc, g == maxc], [bc - gc, 2.0 + rc - bc], 4.0 + gc - rc)
    h = np.where(c == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------- dataset

@dataclass
class TrajectoryDataset:
    frames: np.ndarray          # (n, 64, 64, 3) uint8
    condition_ids: np.ndarray   # (n,) uint32
    frame_indices: np.ndarray   # (n,) uint32
    condition_count: int

    def __len__(self) -> int:
        return len(self.frames)

    def frames_of(self, condition: int) -> tuple[np.ndarray, np.ndarray]:
        """Frames of one condition ordered by frame_index."""
        mask = self.condition_ids == condition
        idx = self.frame_indices[mask]
        order = np.argsort(idx, kind="stable")
        return self.frames[mask][order], idx[order]

    def save(self, path: str) -> None:
        fileio.save_dataset_file(path, self.frames, self.condition_ids,
                                 self.frame_indices, self.condition_count)

    @staticmethod
    def load(path: str) -> "TrajectoryDataset":
        frames, cond, fidx, count = fileio.load_dataset_file(path)
        return TrajectoryDataset(frames, cond, fidx, count)


def _render_strip(rng: np.random.Generator, length: int, n_objects: int) -> np.ndarray:
    """Seeded world strip (64, length, 3) in [0,1]."""
    h = FRAME_SIZE
    strip = np.empty((h, length, 3), dtype=np.float64)
    rows = np.linspace(0.18, 0.42, h)[:, None]
    wave = 0.06 * np.sin(np.arange(length) * (2.0 * np.pi / 170.0))[None, :]
    base = rows + wave
    strip[..., 0] = base * 0.95
    strip[..., 1] = base
    strip[..., 2] = base * 1.1

    for _ in range(n_objects):
        kind = rng.random() < 0.5
        color = hsv_to_rgb(np.array([rng.random(),
                                     0.6 + 0.4 * rng.random(),
                                     0.45 + 0.5 * rng.random()]))
        if kind:
            w = int(rng.integers(6, 22))
            hh = int(rng.integers(6, 22))
            x0 = int(rng.integers(0, max(1, length - w)))
            y0 = int(rng.integers(0, h - hh))
            strip[y0:y0 + hh, x0:x0 + w] = color
        else:
            r = int(rng.integers(4, 12))
            cx = int(rng.integers(r, length - r))
            cy = int(rng.integers(r, h - r))
            yy, xx = np.ogrid[:h, :length]
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            strip[mask] = color
    return np.clip(strip, 0.0, 1.0)


def generate_raw(seed: int, n_frames: int, n_objects: int = 140,
                 world_length: int = 1400) -> np.ndarray:
    """Pre-transform float renders (n_frames, 64, 64, 3); the debug hook
    for checking cross-condition geometry alignment."""
    if n_frames < 1:
        raise DataError(f"n_frames must be >= 1, got {n_frames}")
    needed = FRAME_SIZE + CAMERA_STEP * (n_frames - 1)
    length = max(world_length, needed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    strip = _render_strip(rng, length, n_objects)
    frames = np.empty((n_frames, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.float64)
    for t in range(n_frames):
        pos = t * CAMERA_STEP
        frames[t] = strip[:, pos:pos + FRAME_SIZE]
    return frames


def _apply_condition(frame: np.ndarray, spec: ConditionSpec,
                     noise_rng: np.random.Generator) -> np.ndarray:
    img = frame
    if spec.hue_deg != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + spec.hue_deg / 360.0) % 1.0
        img = hsv_to_rgb(hsv)
    if spec.brightness != 1.0:
        img = img * spec.brightness
    if spec.fog != 0.0:
        img = (1.0 - spec.fog) * img + spec.fog * FOG_GRAY
    if spec.noise != 0.0:
        img = img + noise_rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(seed: int, n_frames: int, specs: list[ConditionSpec],
             n_objects: int = 140, world_length: int = 1400) -> TrajectoryDataset:
    if len(specs) < 2:
        raise DataError(f"need at least 2 conditions, got {len(specs)}")
    raw = generate_raw(seed, n_frames, n_objects, world_length)
    c = len(specs)
    n_total = c * n_frames
    frames = np.empty((n_total, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    cond_ids = np.empty(n_total, dtype=np.uint32)
    fidx = np.empty(n_total, dtype=np.uint32)
    rec = 0
    for ci, spec in enumerate(specs):
        noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 211, ci]))
        for t in range(n_frames):
            img = _apply_condition(raw[t], spec, noise_rng)
            frames[rec] = np.rint(img * 255.0).astype(np.uint8)
            cond_ids[rec] = ci
            fidx[rec] = t
            rec += 1
    return TrajectoryDataset(frames, cond_ids, fidx, c)


def split(ds: TrajectoryDataset, test_fraction: float
          ) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Tail split per condition: the final ceil(n*fraction) frame indices
    of every condition sequence go to test."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0,1), got {test_fraction}")
    n_per = int(ds.frame_indices.max()) + 1
    n_test = int(np.ceil(n_per * test_fraction))
    if n_test == 0 or n_test >= n_per:
        raise DataError(f"split leaves an empty side: n={n_per}, "
                        f"fraction={test_fraction}")
    cut = n_per - n_test
    test_mask = ds.frame_indices >= cut

    def _take(mask):
        return TrajectoryDataset(ds.frames[mask], ds.condition_ids[mask],
                                 ds.frame_indices[mask], ds.condition_count)

    return _take(~test_mask), _take(test_mask)
