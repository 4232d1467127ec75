"""Feature separation training stack.

The encoder's capsule feature is pushed through three pressures at once:
a decoder reconstructs the image (plus a re-encoding feature loss with
the shared encoder), a discriminator adversarially sharpens the
reconstructions, and a softmax head supervises the condition block with
the only label the pipeline uses. A histogram mutual-information
diagnostic tracks how much condition information remains in the
geometry block.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .capsule import CapsuleEncoder, condition_logits
from .config import RunConfig, parse_int_list
from .errors import ConfigError, DataError, NumericError, ShapeError
from .fileio import load_weights, save_weights
from .layers import BatchNorm, Conv2d, ConvTranspose2d, Dense, Module

__all__ = ["Decoder", "Discriminator", "loss_image", "loss_feature",
           "loss_cond", "loss_gan", "loss_joint", "mutual_information",
           "mi_from_joint", "Trainer"]

GAN_EPS = 1e-7
IMG = 64


class Decoder(Module):
    """Flattened place feature -> 64x64x3 image in (0,1)."""

    def __init__(self, rng: np.random.Generator, cfg: RunConfig):
        super().__init__()
        fcs = parse_int_list(cfg.dec_fc, "dec_fc")
        deconvs = parse_int_list(cfg.dec_deconv, "dec_deconv")
        if len(fcs) != 2 or len(deconvs) != 3:
            raise ConfigError("dec_fc needs 2 widths and dec_deconv needs 3")
        self.in_dim = cfg.n_capsules * cfg.d_feature
        self.base_ch = cfg.dec_base_ch
        k = cfg.dec_kernel
        f1, f2 = fcs
        d1, d2, d3 = deconvs
        self.fc1 = self.add_child("fc1", Dense(rng, self.in_dim, f1))
        self.fbn1 = self.add_child("fbn1", BatchNorm(f1))
        self.fc2 = self.add_child("fc2", Dense(rng, f1, f2))
        self.fbn2 = self.add_child("fbn2", BatchNorm(f2))
        self.fc3 = self.add_child("fc3", Dense(rng, f2, self.base_ch * 16))
        self.fbn3 = self.add_child("fbn3", BatchNorm(self.base_ch * 16))
        self.de1 = self.add_child("de1", ConvTranspose2d(rng, self.base_ch, d1, k))
        self.bn1 = self.add_child("bn1", BatchNorm(d1))
        self.de2 = self.add_child("de2", ConvTranspose2d(rng, d1, d2, k))
        self.bn2 = self.add_child("bn2", BatchNorm(d2))
        self.de3 = self.add_child("de3", ConvTranspose2d(rng, d2, d3, k))
        self.bn3 = self.add_child("bn3", BatchNorm(d3))
        self.de4 = self.add_child("de4", ConvTranspose2d(rng, d3, 3, k))

    def __call__(self, z: Tensor, training: bool = False,
                 update_running: bool = False) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.in_dim:
            raise ShapeError("decode", z.shape, (-1, self.in_dim))
        h = ad.leaky_relu(self.fbn1(self.fc1(z), training, update_running))
        h = ad.leaky_relu(self.fbn2(self.fc2(h), training, update_running))
        h = ad.leaky_relu(self.fbn3(self.fc3(h), training, update_running))
        h = ad.reshape(h, (z.shape[0], self.base_ch, 4, 4))
        h = ad.leaky_relu(self.bn1(self.de1(h), training, update_running))
        h = ad.leaky_relu(self.bn2(self.de2(h), training, update_running))
        h = ad.leaky_relu(self.bn3(self.de3(h), training, update_running))
        return ad.sigmoid(self.de4(h))


class Discriminator(Module):
    """Image -> probability of being a real frame."""

    def __init__(self, rng: np.random.Generator, cfg: RunConfig):
        super().__init__()
        convs = parse_int_list(cfg.disc_conv, "disc_conv")
        fcs = parse_int_list(cfg.disc_fc, "disc_fc")
        if len(convs) != 4 or len(fcs) != 2:
            raise ConfigError("disc_conv needs 4 widths and disc_fc needs 2")
        k = cfg.disc_kernel
        chans = [3] + convs
        for idx in range(4):
            conv = Conv2d(rng, chans[idx], chans[idx + 1], k, stride=2)
            self.add_child(f"conv{idx + 1}", conv)
            self.add_child(f"bn{idx + 1}", BatchNorm(chans[idx + 1]))
        self.flat_dim = convs[-1] * 4 * 4
        self.fc1 = self.add_child("fc1", Dense(rng, self.flat_dim, fcs[0]))
        self.fbn1 = self.add_child("fbn1", BatchNorm(fcs[0]))
        self.fc2 = self.add_child("fc2", Dense(rng, fcs[0], fcs[1]))
        self.fbn2 = self.add_child("fbn2", BatchNorm(fcs[1]))
        self.fc3 = self.add_child("fc3", Dense(rng, fcs[1], 1))

    def __call__(self, x: Tensor, training: bool = False,
                 update_running: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1:] != (3, IMG, IMG):
            raise ShapeError("discriminate", x.shape, (-1, 3, IMG, IMG))
        h = x
        for idx in range(4):
            conv = self._children[f"conv{idx + 1}"]
            bn = self._children[f"bn{idx + 1}"]
            h = ad.leaky_relu(bn(conv(h), training, update_running))
        h = ad.reshape(h, (x.shape[0], self.flat_dim))
        h = ad.leaky_relu(self.fbn1(self.fc1(h), training, update_running))
        h = ad.leaky_relu(self.fbn2(self.fc2(h), training, update_running))
        return ad.sigmoid(self.fc3(h))


# ------------------------------------------------------------------- losses

def loss_image(x: Tensor, x_hat: Tensor, literal_l2: bool = False) -> Tensor:
    """Reconstruction penalty; mean squared error by default, the literal
    Euclidean norm when literal_l2 is set."""
    diff = ad.sub(x, x_hat)
    if literal_l2:
        return ad.sqrt_sum_squares(diff)
    return ad.reduce_mean(ad.mul(diff, diff))


def loss_feature(z: Tensor, z_hat: Tensor) -> Tensor:
    """MSE between a feature and the re-encoded reconstruction's feature."""
    diff = ad.sub(z, z_hat)
    return ad.reduce_mean(ad.mul(diff, diff))


def loss_cond(z_c: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of the condition label under the mean-of-z_C head."""
    return ad.cross_entropy_logits(condition_logits(z_c), labels)


def loss_gan(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, non-saturating generator loss).

    Probabilities are clamped to [eps, 1-eps] so the logs stay finite.
    """
    dr = ad.clip(d_real, GAN_EPS, 1.0 - GAN_EPS)
    df = ad.clip(d_fake, GAN_EPS, 1.0 - GAN_EPS)
    disc = ad.add(ad.neg(ad.reduce_mean(ad.log(dr))),
                  ad.neg(ad.reduce_mean(ad.log(ad.sub(1.0, df)))))
    gen = ad.neg(ad.reduce_mean(ad.log(df)))
    return disc, gen


def loss_joint(l_feature: Tensor, l_gan_gen: Tensor, l_cond: Tensor,
               l_image: Tensor, cfg: RunConfig) -> Tensor:
    for name, t in (("feature", l_feature), ("gan", l_gan_gen),
                    ("cond", l_cond), ("image", l_image)):
        if not np.isfinite(t.data).all():
            raise NumericError(f"loss_joint: non-finite {name} component")
    total = ad.mul(l_feature, cfg.w_feature)
    total = ad.add(total, ad.mul(l_gan_gen, cfg.w_gan))
    total = ad.add(total, ad.mul(l_cond, cfg.w_cond))
    return ad.add(total, ad.mul(l_image, cfg.w_image))


# ------------------------------------------------------- mutual information

def mi_from_joint(counts: np.ndarray) -> float:
    """Plug-in mutual information in bits from a joint count table."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float((p[mask] * np.log2(p[mask] / (px @ py)[mask])).sum())


def mutual_information(z_samples: np.ndarray, labels: np.ndarray,
                       bins: int) -> float:
    """I(mean-reduced feature; label) from an equal-width histogram.

    z_samples is (n, ...) and is averaged over every non-sample axis;
    a constant feature (degenerate histogram) yields 0.
    """
    if bins < 2:
        raise ValueError(f"mutual_information: bins must be >= 2, got {bins}")
    z = np.asarray(z_samples, dtype=np.float64).reshape(len(z_samples), -1).mean(axis=1)
    if not np.isfinite(z).all():
        raise NumericError("mutual_information: non-finite features")
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise DataError(f"mutual_information: need >= 2 distinct labels, "
                        f"got {len(uniq)}")
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-12:
        return 0.0
    idx = np.clip(((z - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    counts = np.zeros((bins, len(uniq)), dtype=np.float64)
    np.add.at(counts, (idx, inv), 1.0)
    return max(mi_from_joint(counts), 0.0)


# ------------------------------------------------------------------ trainer

@dataclass
class StepLosses:
    step: int
    disc: float
    gen_gan: float
    feature: float
    cond: float
    image: float
    joint: float

    def row(self) -> str:
        return (f"{self.step},{self.disc:.6f},{self.gen_gan:.6f},"
                f"{self.feature:.6f},{self.cond:.6f},{self.image:.6f},"
                f"{self.joint:.6f}")


class Trainer:
    """Alternating one-discriminator / one-generator step loop.

    All randomness descends from cfg.seed through named child sequences,
    so a run is a pure function of (config, dataset). Checkpoints carry
    parameters, normalization buffers, optimizer moments, and the data
    RNG state; restoring reproduces the uninterrupted run bit for bit.
    """

    def __init__(self, cfg: RunConfig, frames: np.ndarray,
                 labels: np.ndarray):
        if len(frames) == 0:
            raise DataError("Trainer: empty dataset")
        if len(frames) != len(labels):
            raise DataError("Trainer: frames/labels length mismatch")
        if int(np.max(labels)) >= cfg.d_condition:
            raise ConfigError(
                f"d_condition={cfg.d_condition} cannot represent "
                f"{int(np.max(labels)) + 1} condition labels")
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        enc_seq, dec_seq, disc_seq, data_seq = root.spawn(4)
        self.encoder = CapsuleEncoder(np.random.default_rng(enc_seq), cfg)
        self.decoder = Decoder(np.random.default_rng(dec_seq), cfg)
        self.disc = Discriminator(np.random.default_rng(disc_seq), cfg)
        self.data_rng = np.random.default_rng(data_seq)

        gen_params = {}
        gen_params.update({f"enc.{k}": v for k, v in self.encoder.params().items()})
        gen_params.update({f"dec.{k}": v for k, v in self.decoder.params().items()})
        self.opt_gen = Adam(gen_params, cfg.lr, cfg.beta1, cfg.beta2)
        disc_params = {f"disc.{k}": v for k, v in self.disc.params().items()}
        self.opt_disc = Adam(disc_params, cfg.lr, cfg.beta1, cfg.beta2)

        self.frames = frames
        self.labels = np.asarray(labels, dtype=np.int64)
        self.step = 0
        self.history: list[StepLosses] = []

    # ------------------------------------------------------------- data

    def _batch(self) -> tuple[Tensor, np.ndarray]:
        idx = self.data_rng.integers(0, len(self.frames), size=self.cfg.batch_size)
        imgs = self.frames[idx].astype(np.float32) / 255.0
        x = np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))
        return Tensor(x), self.labels[idx]

    def _flat(self, v: Tensor) -> Tensor:
        b = v.shape[0]
        return ad.reshape(v, (b, self.cfg.n_capsules * self.cfg.d_feature))

    # ------------------------------------------------------------ training

    def train_step(self) -> StepLosses:
        cfg = self.cfg
        x, labels = self._batch()

        # discriminator update; no tape is active so the fake batch is a
        # constant and no generator gradient exists on this half-step
        v_const = self.encoder(x, training=True, update_running=False)
        fake_const = self.decoder(self._flat(v_const), training=True,
                                  update_running=False)
        with Tape() as tape:
            d_real = self.disc(x, training=True, update_running=True)
            d_fake = self.disc(fake_const, training=True, update_running=False)
            l_disc, _ = loss_gan(d_real, d_fake)
        if not math.isfinite(l_disc.item()):
            raise NumericError(f"train_step {self.step}: non-finite "
                               f"discriminator loss")
        ad.backward(tape, l_disc)
        self.opt_disc.step()
        self.opt_disc.zero_grad()

        # generator/encoder update on the joint loss
        with Tape() as tape:
            v = self.encoder(x, training=True, update_running=True)
            z_g, z_c = self.encoder.split(v)
            l_c = loss_cond(z_c, labels)
            x_hat = self.decoder(self._flat(v), training=True,
                                 update_running=True)
            l_i = loss_image(x, x_hat, literal_l2=cfg.image_loss_l2)
            d_fake = self.disc(x_hat, training=True, update_running=False)
            # non-saturating generator side of loss_gan
            df = ad.clip(d_fake, GAN_EPS, 1.0 - GAN_EPS)
            l_g = ad.neg(ad.reduce_mean(ad.log(df)))
            v_hat = self.encoder(x_hat, training=True, update_running=False)
            l_f = loss_feature(self._flat(v), self._flat(v_hat))
            l_joint = loss_joint(l_f, l_g, l_c, l_i, cfg)
        if not math.isfinite(l_joint.item()):
            raise NumericError(f"train_step {self.step}: non-finite joint loss")
        ad.backward(tape, l_joint)
        self.opt_gen.step()
        self.opt_gen.zero_grad()
        self.disc.zero_grad()   # critic gradients from the joint pass

        self.step += 1
        losses = StepLosses(self.step, l_disc.item(), l_g.item(), l_f.item(),
                            l_c.item(), l_i.item(), l_joint.item())
        self.history.append(losses)
        return losses

    # ---------------------------------------------------------- inference

    def encode_eval(self, frames: np.ndarray, batch: int = 32) -> np.ndarray:
        """Capsule features (n, K, D_feature) with frozen statistics."""
        out = []
        for i in range(0, len(frames), batch):
            imgs = frames[i:i + batch].astype(np.float32) / 255.0
            x = Tensor(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)))
            out.append(self.encoder(x).data)
        return np.concatenate(out, axis=0)

    def eval_cond_loss(self, frames: np.ndarray, labels: np.ndarray,
                       batch: int = 32) -> float:
        """Mean held-out condition cross-entropy with frozen statistics."""
        v = self.encode_eval(frames, batch)
        d = self.cfg.d_feature
        z_c = v[:, :, d - self.cfg.d_condition:]
        logits = Tensor(z_c.mean(axis=1))
        return ad.cross_entropy_logits(logits, np.asarray(labels, dtype=np.int64)).item()

    def geometry_mi(self, frames: np.ndarray, labels: np.ndarray) -> float:
        """I(mean z_G; condition) on the given frames."""
        v = self.encode_eval(frames)
        z_g = v[:, :, :self.cfg.d_feature - self.cfg.d_condition]
        return mutual_information(z_g, labels, self.cfg.mi_bins)

    # -------------------------------------------------------- persistence

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for prefix, module in (("enc", self.encoder), ("dec", self.decoder),
                               ("disc", self.disc)):
            for name, arr in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = arr
        for tag, opt in (("gen", self.opt_gen), ("disc", self.opt_disc)):
            for name, arr in opt.state_arrays().items():
                arrays[f"opt.{tag}.{name}"] = arr
        arrays["trainer.step"] = np.asarray([float(self.step)], dtype=np.float32)
        return arrays

    def save_checkpoint(self, path: str) -> None:
        save_weights(path, self._arrays())
        state = {
            "step": self.step,
            "data_rng": self.data_rng.bit_generator.state,
        }
        tmp = path + ".state.json.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True)
        os.replace(tmp, path + ".state.json")

    def load_checkpoint(self, path: str) -> None:
        arrays = load_weights(path)
        for prefix, module in (("enc", self.encoder), ("dec", self.decoder),
                               ("disc", self.disc)):
            sub = {k[len(prefix) + 1:]: v for k, v in arrays.items()
                   if k.startswith(prefix + ".")}
            module.load_state_dict(sub)
        for tag, opt in (("gen", self.opt_gen), ("disc", self.opt_disc)):
            sub = {k[len(f"opt.{tag}.") :]: v for k, v in arrays.items()
                   if k.startswith(f"opt.{tag}.")}
            opt.load_state_arrays(sub)
        with open(path + ".state.json", "r", encoding="utf-8") as fh:
            state = json.load(fh)
        self.step = int(state["step"])
        self.data_rng.bit_generator.state = state["data_rng"]
