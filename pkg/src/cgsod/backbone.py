"""Four-stage hierarchical transformer encoder for saliency features.

Overlapping patch merging (strided convolution + layer norm) halves the
spatial extent stage by stage, from H/4 down to H/32.  Blocks use pre-norm
attention whose keys and values come from a spatially reduced copy of the
token sequence, cutting the score-matrix cost by the per-stage reduction
ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import Conv2d, LayerNorm, Linear, Module

# Scalar multiplications spent on attention score matrices (q @ k^T),
# accumulated across every attention call until reset.  Used to assert the
# 1/R cost scaling of the reduced attention.
SCORE_MULTIPLIES = 0


def reset_score_multiplies() -> None:
    global SCORE_MULTIPLIES
    SCORE_MULTIPLIES = 0


def score_multiplies() -> int:
    return SCORE_MULTIPLIES


@dataclass(frozen=True)
class StageConfig:
    """Geometry of one encoder stage.

    ``pos_embed`` adds a fixed sinusoidal position signal after patch
    merging; default off, since the padded merging convolutions already
    leak position.
    """

    embed_dim: int
    depth: int
    heads: int
    reduction: int
    patch_size: int
    stride: int
    pos_embed: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        r = math.isqrt(self.reduction)
        if self.reduction < 1 or r * r != self.reduction:
            raise ConfigError(f"reduction {self.reduction} is not a perfect square")
        if self.depth < 1:
            raise ConfigError(f"depth must be positive, got {self.depth}")
        if self.stride < 1 or self.patch_size < self.stride:
            raise ConfigError(
                f"patch_size {self.patch_size} must be >= stride {self.stride}"
            )

    @property
    def d_head(self) -> int:
        return self.embed_dim // self.heads


def default_stage_configs(depths: tuple[int, int, int, int] = (2, 2, 2, 2)) -> list[StageConfig]:
    """Desk-scale defaults: dims 8/16/32/64, reductions 64/16/4/1."""
    dims = (8, 16, 32, 64)
    heads = (1, 2, 4, 8)
    reductions = (64, 16, 4, 1)
    patch = (7, 3, 3, 3)
    stride = (4, 2, 2, 2)
    return [
        StageConfig(dims[i], depths[i], heads[i], reductions[i], patch[i], stride[i])
        for i in range(4)
    ]


class SpatialReduce(Module):
    """Fold each sqrt(R) x sqrt(R) token block into one token.

    Tokens of a block are channel-stacked in row-major block order, mapped
    back to the stage dimension by a linear layer, then layer-normalized.
    With R = 1 this degenerates to Norm(x @ w).
    """

    def __init__(self, rng: np.random.Generator, dim: int, reduction: int):
        self.reduction = reduction
        self.proj = Linear(rng, dim * reduction, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        n, c = x.shape
        if n != h * w:
            raise DimensionError(f"spatial_reduce: {n} tokens != {h}x{w} grid")
        r = math.isqrt(self.reduction)
        if r * r != self.reduction:
            raise ConfigError(f"reduction {self.reduction} is not a perfect square")
        if h % r != 0 or w % r != 0:
            raise DimensionError(
                f"spatial_reduce: {h}x{w} grid not divisible into {r}x{r} blocks"
            )
        if r > 1:
            x = ad.reshape(x, (h // r, r, w // r, r, c))
            x = ad.transpose(x, (0, 2, 1, 3, 4))
            x = ad.reshape(x, (n // self.reduction, self.reduction * c))
        return self.norm(self.proj(x))


class SequenceReducedAttention(Module):
    """Multi-head attention; queries keep full length, keys/values reduce."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, reduction: int):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.reduce = SpatialReduce(rng, dim, reduction)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, h: int, w: int, capture: dict | None = None) -> Tensor:
        global SCORE_MULTIPLIES
        n = x.shape[0]
        d = self.dim // self.heads
        reduced = self.reduce(x, h, w)
        m = reduced.shape[0]
        q = ad.transpose(ad.reshape(self.q(x), (n, self.heads, d)), (1, 0, 2))
        k = ad.transpose(ad.reshape(self.k(reduced), (m, self.heads, d)), (1, 2, 0))
        v = ad.transpose(ad.reshape(self.v(reduced), (m, self.heads, d)), (1, 0, 2))
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(d))
        SCORE_MULTIPLIES += self.heads * n * m * d
        weights = ad.softmax_last(scores)
        if capture is not None:
            capture["weights"] = weights.data
            capture["kv_len"] = m
        ctx = ad.matmul(weights, v)
        out = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, self.dim))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm attention and 4x GELU MLP, both with residual adds."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, reduction: int):
        self.norm1 = LayerNorm(dim)
        self.attn = SequenceReducedAttention(rng, dim, heads, reduction)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * 4)
        self.fc2 = Linear(rng, dim * 4, dim)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))


class PatchMerge(Module):
    """Overlapping patch embedding: strided conv (kernel > stride) + norm."""

    def __init__(self, rng: np.random.Generator, in_ch: int, cfg: StageConfig):
        self.conv = Conv2d(rng, in_ch, cfg.embed_dim, cfg.patch_size, cfg.stride)
        self.norm = LayerNorm(cfg.embed_dim)
        self.patch_size = cfg.patch_size

    def __call__(self, x: Tensor) -> tuple[Tensor, int, int]:
        _, h, w = x.shape
        if h < self.patch_size or w < self.patch_size:
            raise DimensionError(
                f"patch_merge: input {h}x{w} smaller than one {self.patch_size}-pixel patch"
            )
        y = self.conv(x)
        c, oh, ow = y.shape
        tokens = ad.transpose(ad.reshape(y, (c, oh * ow)), (1, 0))
        return self.norm(tokens), oh, ow


def sinusoidal_positions(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-d sine/cosine position table, (h*w, dim)."""
    half = dim // 2
    out = np.zeros((h * w, dim))
    ys, xs = np.divmod(np.arange(h * w), w)
    for base, coord in ((0, ys), (half, xs)):
        span = max(dim - base if base else half, 1)
        for k in range(span):
            freq = 1.0 / (10000.0 ** (2 * (k // 2) / span))
            phase = coord * freq
            out[:, base + k] = np.sin(phase) if k % 2 == 0 else np.cos(phase)
    return out


class Stage(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, cfg: StageConfig):
        self.merge = PatchMerge(rng, in_ch, cfg)
        self.blocks = [
            TransformerBlock(rng, cfg.embed_dim, cfg.heads, cfg.reduction)
            for _ in range(cfg.depth)
        ]
        self.embed_dim = cfg.embed_dim
        self.pos_embed = cfg.pos_embed

    def __call__(self, x: Tensor) -> Tensor:
        tokens, h, w = self.merge(x)
        if self.pos_embed:
            tokens = tokens + Tensor(sinusoidal_positions(h, w, self.embed_dim))
        for block in self.blocks:
            tokens = block(tokens, h, w)
        return ad.reshape(ad.transpose(tokens, (1, 0)), (self.embed_dim, h, w))


class PyramidBackbone(Module):
    """Image (3, H, W) -> four feature maps at H/4, H/8, H/16, H/32."""

    def __init__(self, rng: np.random.Generator, configs: list[StageConfig] | None = None):
        configs = list(configs) if configs is not None else default_stage_configs()
        if len(configs) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(configs)}")
        if configs[0].stride != 4 or any(c.stride != 2 for c in configs[1:]):
            raise ConfigError("stage strides must be 4, 2, 2, 2")
        self.configs = configs
        chans = [3] + [c.embed_dim for c in configs[:-1]]
        self.stages = [Stage(rng, chans[i], configs[i]) for i in range(4)]

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"backbone: need (3,H,W) image, got {image.shape}")
        _, h, w = image.shape
        if h % 32 != 0:
            raise DimensionError(f"backbone: height {h} not divisible by 32")
        if w % 32 != 0:
            raise DimensionError(f"backbone: width {w} not divisible by 32")
        pyramid = []
        x = image
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid
