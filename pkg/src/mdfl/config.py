"""Run configuration: one flat key=value namespace covering every tunable.

Config files are plain text, one `key = value` per line, '#' comments.
Unknown keys are rejected so typos fail loudly. Every run writes the
fully resolved config beside its outputs for reproducibility.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError

__all__ = ["RunConfig", "parse_config_text", "load_config", "resolve_config",
           "write_resolved", "parse_int_list", "paper_scale_overrides"]


@dataclass
class RunConfig:
    # global
    seed: int = 18

    # synthetic dataset
    n_frames: int = 600
    condition_count: int = 3
    test_fraction: float = 0.2
    # per-condition "hue:brightness:fog:noise" joined with ';'
    # empty string selects built-in defaults for condition_count
    condition_specs: str = ""
    world_objects: int = 140
    world_length: int = 1400

    # encoder
    enc_conv: str = "16,32,64"
    enc_kernel: int = 5
    pcaps_maps: int = 8
    pcaps_dim: int = 8
    pcaps_kernel: int = 5
    n_capsules: int = 16          # K
    d_feature: int = 16
    d_condition: int = 3          # D_C
    routing_iters: int = 3
    residual_norm_literal: bool = False   # True: divide residual mean by N

    # decoder
    dec_fc: str = "128,256"
    dec_base_ch: int = 128
    dec_deconv: str = "64,32,16"
    dec_kernel: int = 4

    # discriminator
    disc_conv: str = "16,32,64,128"
    disc_fc: str = "128,256"
    disc_kernel: int = 5

    # training
    steps: int = 500
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 100
    w_feature: float = 1.0
    w_gan: float = 1.0
    w_cond: float = 1.0
    w_image: float = 1.0
    image_loss_l2: bool = False   # True: literal L2 norm instead of MSE
    mi_bins: int = 16

    # baselines
    vlad_k: int = 8
    vlad_soft: bool = False
    sad_down: int = 32
    sad_patch: int = 8

    # matcher
    d_s: int = 10
    v_min: float = 0.8
    v_max: float = 1.25
    v_step: float = 0.125
    enhance_window: int = 10
    exclusion_window: int = 20
    ratio_mu: float = 0.9
    match_metric: str = "l2"
    frame_tolerance: int = 10

    def validate(self) -> "RunConfig":
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0,1), got {self.test_fraction}")
        if self.condition_count < 2:
            raise ConfigError("condition_count must be >= 2")
        if not 1 <= self.d_condition < self.d_feature:
            raise ConfigError(f"d_condition must satisfy 1 <= D_C < D_feature, "
                              f"got {self.d_condition} vs {self.d_feature}")
        if self.routing_iters < 1:
            raise ConfigError("routing_iters must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if min(self.w_feature, self.w_gan, self.w_cond, self.w_image) < 0:
            raise ConfigError("loss weights must be non-negative")
        if max(self.w_feature, self.w_gan, self.w_cond, self.w_image) == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.match_metric not in ("l2", "sad"):
            raise ConfigError(f"match_metric must be l2 or sad, got {self.match_metric}")
        if self.d_s < 1:
            raise ConfigError("d_s must be >= 1")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected boolean, got {raw!r}")
    if ftype == "int":
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{name}: expected integer, got {raw!r}") from e
    if ftype == "float":
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{name}: expected number, got {raw!r}") from e
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(pairs: dict[str, str]) -> RunConfig:
    unknown = sorted(set(pairs) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in pairs.items()}
    return RunConfig(**kwargs).validate()


def load_config(path: Optional[str], overrides: Optional[dict[str, str]] = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                pairs.update(parse_config_text(fh.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        pairs.update({k: str(v) for k, v in overrides.items()})
    return resolve_config(pairs)


def write_resolved(cfg: RunConfig, path: str) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(RunConfig)]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    import os
    os.replace(tmp, path)


def parse_int_list(raw: str, name: str) -> list[int]:
    try:
        return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError as e:
        raise ConfigError(f"{name}: expected comma-separated integers, got {raw!r}") from e


def paper_scale_overrides() -> dict[str, str]:
    """Full-width layer sizes (the published architecture scale)."""
    return {
        "enc_conv": "64,128,256", "enc_kernel": "5",
        "pcaps_maps": "32", "pcaps_dim": "8", "pcaps_kernel": "9",
        "n_capsules": "64", "d_feature": "16", "d_condition": "4",
        "dec_fc": "512,1024", "dec_base_ch": "512", "dec_deconv": "256,128,64",
        "disc_conv": "64,128,256,512", "disc_fc": "512,1024",
    }
