"""Parameterized layers built on the autodiff ops.

A Module owns named parameters (trained), named buffers (persisted but
not trained, e.g. normalization statistics), and child modules. state
dicts flatten the tree with dotted names so checkpoints are plain
name -> array maps.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

__all__ = ["glorot_uniform", "Module", "Conv2d", "ConvTranspose2d",
           "Dense", "BatchNorm"]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value)
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.params(f"{prefix}{cname}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.buffers(f"{prefix}{cname}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params().items()}
        out.update(self.buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise ShapeError("load_state_dict", (len(own),), (len(state),),
                             f"missing entries: {missing[:3]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError("load_state_dict", arr.shape, src.shape, name)
            arr[...] = src

    def zero_grad(self) -> None:
        ad.zero_grads(self.params().values())


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        fan = k * k
        self.w = self.add_param("w", glorot_uniform(
            rng, (out_ch, in_ch, k, k), in_ch * fan, out_ch * fan))
        self.b = self.add_param("b", np.zeros(out_ch, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 2):
        super().__init__()
        self.stride = stride
        fan = k * k
        self.w = self.add_param("w", glorot_uniform(
            rng, (in_ch, out_ch, k, k), in_ch * fan, out_ch * fan))
        self.b = self.add_param("b", np.zeros(out_ch, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_transpose(x, self.w, self.b, stride=self.stride)


class Dense(Module):
    def __init__(self, rng, in_dim: int, out_dim: int):
        super().__init__()
        self.w = self.add_param("w", glorot_uniform(
            rng, (in_dim, out_dim), in_dim, out_dim))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)


class BatchNorm(Module):
    """Channel normalization; running statistics live in buffers."""

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(ch, dtype=np.float32))
        self.beta = self.add_param("beta", np.zeros(ch, dtype=np.float32))
        self.running_mean = self.add_buffer("running_mean", np.zeros(ch, dtype=np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(ch, dtype=np.float32))

    def __call__(self, x: Tensor, training: bool = False,
                 update_running: bool = False) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             training=training, momentum=self.momentum,
                             eps=self.eps, update_running=update_running)
