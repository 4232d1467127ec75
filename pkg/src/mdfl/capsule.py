"""Capsule place-feature encoder.

A convolutional stack produces a grid of primary capsules (local feature
vectors). Each local vector is mapped into every output cluster by a
per-position, per-cluster linear map; the cluster-mean is subtracted so
the residuals sum to zero across clusters. Iterative routing then soft-
assigns residuals to clusters by agreement, aggregates them, and bounds
each cluster vector with the squash nonlinearity.

The resulting place feature is a K x D_feature matrix whose last D_C
columns (per capsule) carry environmental-condition information and
whose remaining columns carry geometry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, parse_int_list
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, Conv2d, Module, glorot_uniform

__all__ = ["CapsuleEncoder", "dynamic_routing", "residual_votes",
           "split_condition", "condition_logits"]

IMAGE_SIZE = 64


def residual_votes(votes: Tensor, literal_n: bool = False) -> Tensor:
    """Subtract the cluster-mean prediction so residuals sum to zero over k.

    votes is (B, N, K, D). literal_n divides the cluster sum by N instead
    of K (an alternative reading of the normalizer; breaks the zero-sum
    property whenever N != K).
    """
    b, n, k, d = votes.shape
    denom = float(n if literal_n else k)
    total = ad.reduce_sum(votes, axis=2, keepdims=True)
    mean = ad.mul(total, 1.0 / denom)
    return ad.sub(votes, ad.broadcast_to(mean, votes.shape))


def dynamic_routing(residuals: Tensor, iters: int, trace: bool = False):
    """Agreement-based soft clustering of residual votes.

    residuals is (B, N, K, D). Routing logits start at zero (uniform
    assignment); each iteration recomputes assignments, aggregates,
    squashes, and reinforces logits by the residual/output agreement.
    Returns the final squashed capsules (B, K, D); with trace=True also
    the per-iteration logit arrays.
    """
    if iters < 1:
        raise ValueError(f"dynamic_routing: iters must be >= 1, got {iters}")
    b, n, k, d = residuals.shape
    logits = Tensor(np.zeros((b, n, k), dtype=residuals.dtype))
    v = None
    logit_trace = []
    for _ in range(iters):
        q = ad.softmax(logits, axis=2)
        s = ad.einsum2("bnk,bnkd->bkd", q, residuals)
        v = ad.squash(s)
        agreement = ad.einsum2("bnkd,bkd->bnk", residuals, v)
        logits = ad.add(logits, agreement)
        if trace:
            logit_trace.append(logits.data.copy())
    return (v, logit_trace) if trace else v


def split_condition(v: Tensor, d_c: int) -> tuple[Tensor, Tensor]:
    """Partition capsule columns into (geometry z_G, condition z_C)."""
    d = v.shape[-1]
    if not 1 <= d_c < d:
        raise ConfigError(f"split_condition: need 1 <= D_C < {d}, got {d_c}")
    axis = v.data.ndim - 1
    z_g = ad.slice_axis(v, axis, 0, d - d_c)
    z_c = ad.slice_axis(v, axis, d - d_c, d)
    return z_g, z_c


def condition_logits(z_c: Tensor) -> Tensor:
    """Parameter-free classification head: mean of z_C over capsules."""
    return ad.reduce_mean(z_c, axis=1)


class CapsuleEncoder(Module):
    """conv stack -> primary capsule grid -> routed place feature."""

    def __init__(self, rng: np.random.Generator, cfg: RunConfig):
        super().__init__()
        chans = parse_int_list(cfg.enc_conv, "enc_conv")
        if len(chans) != 3:
            raise ConfigError(f"enc_conv needs 3 widths, got {cfg.enc_conv!r}")
        c1, c2, c3 = chans
        k = cfg.enc_kernel
        self.conv1 = self.add_child("conv1", Conv2d(rng, 3, c1, k, stride=2))
        self.bn1 = self.add_child("bn1", BatchNorm(c1))
        self.conv2 = self.add_child("conv2", Conv2d(rng, c1, c2, k, stride=2))
        self.bn2 = self.add_child("bn2", BatchNorm(c2))
        self.conv3 = self.add_child("conv3", Conv2d(rng, c2, c3, k, stride=1))
        self.bn3 = self.add_child("bn3", BatchNorm(c3))

        self.maps = cfg.pcaps_maps
        self.dp = cfg.pcaps_dim
        pc = self.maps * self.dp
        self.pconv = self.add_child("pconv", Conv2d(rng, c3, pc, cfg.pcaps_kernel, stride=2))
        self.pbn = self.add_child("pbn", BatchNorm(pc))

        # three stride-2 stages: 64 -> 32 -> 16 -> (stride 1) -> 8
        self.spatial = IMAGE_SIZE // 8
        self.n_local = self.maps * self.spatial * self.spatial
        self.k = cfg.n_capsules
        self.d_feature = cfg.d_feature
        self.d_condition = cfg.d_condition
        self.routing_iters = cfg.routing_iters
        self.literal_n = cfg.residual_norm_literal

        self.w_caps = self.add_param("caps_w", glorot_uniform(
            rng, (self.n_local, self.k, self.d_feature, self.dp),
            self.dp, self.d_feature))
        self.b_caps = self.add_param("caps_b",
                                     np.zeros((self.k, self.d_feature), dtype=np.float32))

    def primary_capsules(self, images: Tensor, training: bool = False,
                         update_running: bool = False) -> Tensor:
        if images.data.ndim != 4 or images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError("encode", images.shape, (-1, 3, IMAGE_SIZE, IMAGE_SIZE),
                             "expected NCHW images")
        h = ad.leaky_relu(self.bn1(self.conv1(images), training, update_running))
        h = ad.leaky_relu(self.bn2(self.conv2(h), training, update_running))
        h = ad.leaky_relu(self.bn3(self.conv3(h), training, update_running))
        h = ad.leaky_relu(self.pbn(self.pconv(h), training, update_running))
        b = images.shape[0]
        s = self.spatial
        h = ad.reshape(h, (b, self.maps, self.dp, s * s))
        h = ad.transpose(h, (0, 1, 3, 2))
        return ad.reshape(h, (b, self.n_local, self.dp))

    def __call__(self, images: Tensor, training: bool = False,
                 update_running: bool = False) -> Tensor:
        x = self.primary_capsules(images, training, update_running)
        votes = ad.einsum2("nkdp,bnp->bnkd", self.w_caps, x)
        bias = ad.reshape(self.b_caps, (1, 1, self.k, self.d_feature))
        votes = ad.add(votes, ad.broadcast_to(bias, votes.shape))
        r = residual_votes(votes, literal_n=self.literal_n)
        return dynamic_routing(r, self.routing_iters)

    def split(self, v: Tensor) -> tuple[Tensor, Tensor]:
        return split_condition(v, self.d_condition)
