"""Guidance fusion and the saliency decoding head.

Word-level attention maps are resized to each pyramid level, summed and
max-normalized into a guidance field A in [0, 1].  Each feature level is
modulated as xi(F * A) + F with a zero-initialized projection xi, so an
untrained fusion is the exact identity.  The decoder aligns all levels to
one dimension with per-level linear maps, resizes them to quarter
resolution, concatenates, and predicts one logit channel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import PyramidBackbone, StageConfig, default_stage_configs
from .captioning import CaptionModel, CaptionOutput, Vocabulary
from .errors import ContractError, DimensionError
from .layers import Linear, Module


def aggregate_attention(
    maps: list[Tensor], out_h: int, out_w: int, norm: str = "max"
) -> Tensor:
    """Resize word maps to (out_h, out_w), sum, normalize into [0, 1].

    ``norm="max"`` divides by the maximum (default); ``"minmax"`` rescales
    the span instead.  An empty caption, or a degenerate normalizer, yields
    the all-ones field so fusion degrades to xi(F) + F.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"aggregate_attention: target {out_h}x{out_w} must be positive")
    if norm not in ("max", "minmax"):
        raise ContractError(f"aggregate_attention: unknown norm {norm!r}")
    if not maps:
        return Tensor(np.ones((out_h, out_w)))
    total = None
    for m in maps:
        if m.ndim != 2:
            raise DimensionError(f"aggregate_attention: maps must be 2-d, got {m.shape}")
        if np.any(m.data < 0):
            raise ContractError("aggregate_attention: attention maps must be nonnegative")
        g_h, g_w = m.shape
        resized = ad.reshape(ad.bilinear_resize(ad.reshape(m, (1, g_h, g_w)), out_h, out_w),
                             (out_h, out_w))
        total = resized if total is None else total + resized
    if norm == "minmax":
        lo = float(total.data.min())
        span = float(total.data.max()) - lo
        if span == 0.0:
            return Tensor(np.ones((out_h, out_w)))
        return (total - lo) * (1.0 / span)
    peak = ad.amax(total)
    if peak.item() == 0.0:
        return Tensor(np.ones((out_h, out_w)))
    return total / peak


def fuse_level(feat: Tensor, guidance: Tensor, xi: Linear) -> Tensor:
    """xi(feat * guidance) + feat, guidance broadcast over channels."""
    c, h, w = feat.shape
    if guidance.shape != (h, w):
        raise DimensionError(
            f"fuse_level: guidance {guidance.shape} does not match feature map {h}x{w}"
        )
    modulated = feat * ad.expand_leading(guidance, c)
    tokens = ad.transpose(ad.reshape(modulated, (c, h * w)), (1, 0))
    projected = ad.reshape(ad.transpose(xi(tokens), (1, 0)), (c, h, w))
    return projected + feat


class SaliencyDecoder(Module):
    """Align pyramid levels to one dimension, concat at H/4, predict logits."""

    def __init__(self, rng: np.random.Generator, level_dims: list[int], common_dim: int):
        self.align = [Linear(rng, d, common_dim) for d in level_dims]
        self.classify = Linear(rng, common_dim * len(level_dims), 1)
        self.common_dim = common_dim

    def __call__(self, pyramid: list[Tensor], out_h: int, out_w: int,
                 capture: dict | None = None) -> Tensor:
        qh, qw = pyramid[0].shape[1], pyramid[0].shape[2]
        aligned = []
        for feat, proj in zip(pyramid, self.align):
            c, h, w = feat.shape
            tokens = ad.transpose(ad.reshape(feat, (c, h * w)), (1, 0))
            mapped = ad.reshape(ad.transpose(proj(tokens), (1, 0)), (self.common_dim, h, w))
            if (h, w) != (qh, qw):
                mapped = ad.bilinear_resize(mapped, qh, qw)
            aligned.append(mapped)
        stacked = ad.concat(aligned, axis=0)
        if capture is not None:
            capture["quarter_shape"] = stacked.shape[1:]
        tokens = ad.transpose(ad.reshape(stacked, (stacked.shape[0], qh * qw)), (1, 0))
        logits = ad.reshape(ad.transpose(self.classify(tokens), (1, 0)), (1, qh, qw))
        full = ad.bilinear_resize(logits, out_h, out_w)
        return ad.reshape(full, (out_h, out_w))


class CaptionGuidedSaliency(Module):
    """Backbone + caption branch + guided fusion + decoding head.

    ``guidance`` flags choose per level whether fusion runs; with a flag
    off the level passes through untouched, so an all-off model is exactly
    the plain backbone-decoder path.  Caption attention maps are detached
    before fusion unless ``joint_guidance`` is set: the caption branch is
    trained separately and acts as fixed modulation by default.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocabulary,
        stage_configs: list[StageConfig] | None = None,
        decoder_dim: int | None = None,
        guidance: tuple[bool, bool, bool, bool] = (True, True, True, True),
        joint_guidance: bool = False,
        guidance_norm: str = "max",
        caption_kwargs: dict | None = None,
    ):
        configs = list(stage_configs) if stage_configs is not None else default_stage_configs()
        self.backbone = PyramidBackbone(rng, configs)
        self.caption = CaptionModel(rng, vocab, **(caption_kwargs or {}))
        dims = [c.embed_dim for c in configs]
        self.xi = [Linear(rng, d, d, zero_init=True) for d in dims]
        self.decoder = SaliencyDecoder(rng, dims, decoder_dim or min(dims))
        self.guidance = tuple(guidance)
        self.joint_guidance = joint_guidance
        self.guidance_norm = guidance_norm

    def caption_image(self, image: Tensor) -> CaptionOutput:
        return self.caption.caption_image(image)

    def forward_logits(
        self,
        image: Tensor,
        attention_maps: list[Tensor] | None,
        guidance: tuple[bool, ...] | None = None,
    ) -> Tensor:
        """Saliency logits at image resolution.

        ``attention_maps`` may be precomputed (training caches them per
        image since the caption branch is frozen); pass None to run the
        caption branch here.
        """
        flags = self.guidance if guidance is None else tuple(guidance)
        _, h, w = image.shape
        if any(flags) and attention_maps is None:
            attention_maps = self.caption_maps(image)
        pyramid = self.backbone(image)
        fused = []
        for level, (feat, xi, on) in enumerate(zip(pyramid, self.xi, flags)):
            if on:
                field = aggregate_attention(
                    attention_maps, feat.shape[1], feat.shape[2], self.guidance_norm
                )
                feat = fuse_level(feat, field, xi)
            fused.append(feat)
        return self.decoder(fused, h, w)

    def caption_maps(self, image: Tensor) -> list[Tensor]:
        """Word-level maps for ``image``, detached unless joint mode is on."""
        out = self.caption.caption_image(image)
        if self.joint_guidance:
            return out.attention_maps
        return [m.detach() for m in out.attention_maps]

    def predict(
        self, image: Tensor, guidance: tuple[bool, ...] | None = None
    ) -> tuple[Tensor, CaptionOutput]:
        """Saliency probabilities in [0, 1] plus the generated caption."""
        flags = self.guidance if guidance is None else tuple(guidance)
        caption = self.caption.caption_image(image)
        maps = caption.attention_maps
        if not self.joint_guidance:
            maps = [m.detach() for m in maps]
        logits = self.forward_logits(image, maps, flags)
        return ad.sigmoid(logits), caption
