"""Parameter containers and the small layer vocabulary the models share.

Weights initialize from a centered uniform distribution scaled by
1/sqrt(fan_in); biases start at zero.  All randomness flows through an
explicit numpy Generator so model construction is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class providing named parameter traversal for checkpoints."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"state {name}: shape {arr.shape} != parameter shape {t.data.shape}"
                )
            t.data = arr.copy()


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    scale = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape)


class Linear(Module):
    """Affine map on the last axis: y = x @ w + b."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, zero_init: bool = False):
        w = np.zeros((in_dim, out_dim)) if zero_init else uniform_init(rng, (in_dim, out_dim), in_dim)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.add_bias(ad.matmul(x, self.w), self.b)
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.in_dim))
        out = ad.add_bias(ad.matmul(flat, self.w), self.b)
        return ad.reshape(out, lead + (self.out_dim,))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Strided 2-D convolution with zero padding."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        padding: int | None = None,
    ):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding)
