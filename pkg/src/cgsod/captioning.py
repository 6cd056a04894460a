"""Caption branch: grid visual encoder plus autoregressive text decoder.

The decoder emits one cross-attention map per generated word; those maps
are what the saliency decoder consumes as guidance.  Decoding is greedy
and deterministic for fixed weights.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .layers import Conv2d, LayerNorm, Linear, Module

NEG_MASK = -1.0e9  # additive causal-mask value; large but finite


class Vocabulary:
    """Bijection between token strings and integer ids.

    Ids 0, 1, 2 are reserved for [PAD], [SOS], [EOS].
    """

    PAD = 0
    SOS = 1
    EOS = 2
    SPECIALS = ("[PAD]", "[SOS]", "[EOS]")

    def __init__(self, words: list[str]):
        self.tokens = list(self.SPECIALS) + list(words)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, captions: list[str], max_words: int | None = None) -> "Vocabulary":
        """Whitespace tokens, lowercased, most frequent first (ties alphabetical)."""
        counts = Counter()
        for line in captions:
            counts.update(line.lower().split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_words is not None:
            ranked = ranked[:max_words]
        return cls([w for w, _ in ranked])

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.lower().split():
            if word not in self.index:
                raise ContractError(f"word {word!r} is not in the vocabulary")
            ids.append(self.index[word])
        return ids

    def wrap(self, ids: list[int]) -> list[int]:
        return [self.SOS] + list(ids) + [self.EOS]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i > self.EOS)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:3]) != cls.SPECIALS:
            raise ContractError(f"{path}: first three lines must be {cls.SPECIALS}")
        return cls(tokens[3:])


@dataclass
class GridFeatures:
    """Visual features per grid cell, stored feature-major: (D, g*g)."""

    features: Tensor
    grid_side: int

    def __post_init__(self):
        n = self.grid_side * self.grid_side
        if self.features.shape[1] != n:
            raise DimensionError(
                f"grid features {self.features.shape} do not cover a "
                f"{self.grid_side}x{self.grid_side} grid"
            )

    @property
    def tokens(self) -> Tensor:
        """Cell-major view (g*g, D) for attention keys/values."""
        return ad.transpose(self.features, (1, 0))


@dataclass
class CaptionOutput:
    """Greedy decode result: token ids plus one attention map per word."""

    tokens: list[int]
    attention_maps: list[Tensor] = field(default_factory=list)

    @property
    def word_count(self) -> int:
        return len(self.attention_maps)

    def scaled(self, factor: float) -> "CaptionOutput":
        return CaptionOutput(
            list(self.tokens),
            [Tensor(m.data * factor) for m in self.attention_maps],
        )


class VisualEncoder(Module):
    """Small strided conv stack ending in a g x g grid of feature vectors."""

    TOTAL_STRIDE = 8

    def __init__(self, rng: np.random.Generator, feature_dim: int, grid_side: int = 7):
        widths = (8, 16, 16, 32)
        strides = (2, 2, 2, 1)
        chans = [3] + list(widths)
        self.convs = [
            Conv2d(rng, chans[i], chans[i + 1], kernel=3, stride=strides[i])
            for i in range(4)
        ]
        self.proj = Linear(rng, widths[-1], feature_dim)
        self.grid_side = grid_side
        self.feature_dim = feature_dim

    def __call__(self, image: Tensor) -> GridFeatures:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"visual encoder: need (3,H,W), got {image.shape}")
        _, h, w = image.shape
        if h % self.TOTAL_STRIDE != 0:
            raise DimensionError(f"visual encoder: height {h} not divisible by {self.TOTAL_STRIDE}")
        if w % self.TOTAL_STRIDE != 0:
            raise DimensionError(f"visual encoder: width {w} not divisible by {self.TOTAL_STRIDE}")
        x = image
        for conv in self.convs:
            x = ad.gelu(conv(x))
        g = self.grid_side
        x = ad.adaptive_avg_pool2d(x, g, g)
        c = x.shape[0]
        cells = ad.transpose(ad.reshape(x, (c, g * g)), (1, 0))
        feats = self.proj(cells)
        return GridFeatures(ad.transpose(feats, (1, 0)), g)


class _DecoderLayer(Module):
    """Masked self-attention, cross-attention over the grid, then MLP."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.dim = dim
        self.norm_self = LayerNorm(dim)
        self.sq = Linear(rng, dim, dim)
        self.sk = Linear(rng, dim, dim)
        self.sv = Linear(rng, dim, dim)
        self.sp = Linear(rng, dim, dim)
        self.norm_cross = LayerNorm(dim)
        self.cq = Linear(rng, dim, dim)
        self.ck = Linear(rng, dim, dim)
        self.cv = Linear(rng, dim, dim)
        self.cp = Linear(rng, dim, dim)
        self.norm_mlp = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * 4)
        self.fc2 = Linear(rng, dim * 4, dim)

    def _heads(self, x: Tensor, transpose_last: bool = False) -> Tensor:
        n, _ = x.shape
        d = self.dim // self.heads
        split = ad.reshape(x, (n, self.heads, d))
        return ad.transpose(split, (1, 2, 0) if transpose_last else (1, 0, 2))

    def _merge(self, x: Tensor) -> Tensor:
        h, n, d = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * d))

    def __call__(self, x: Tensor, grid_tokens: Tensor, mask: Tensor, capture: dict | None = None) -> Tensor:
        d = self.dim // self.heads
        scale = 1.0 / np.sqrt(d)

        y = self.norm_self(x)
        q, k, v = self._heads(self.sq(y)), self._heads(self.sk(y), True), self._heads(self.sv(y))
        scores = ad.matmul(q, k) * scale + ad.expand_leading(mask, self.heads)
        x = x + self.sp(self._merge(ad.matmul(ad.softmax_last(scores), v)))

        y = self.norm_cross(x)
        q = self._heads(self.cq(y))
        k = self._heads(self.ck(grid_tokens), True)
        v = self._heads(self.cv(grid_tokens))
        weights = ad.softmax_last(ad.matmul(q, k) * scale)
        if capture is not None:
            capture["cross_weights"] = weights.data  # (heads, T, g*g)
        x = x + self.cp(self._merge(ad.matmul(weights, v)))

        y = self.norm_mlp(x)
        return x + self.fc2(ad.gelu(self.fc1(y)))


class CaptionModel(Module):
    """Visual encoder + transformer text decoder with map extraction.

    ``attention_layer`` picks which decoder layer supplies the word-level
    cross-attention maps (default: the last one); maps are averaged over
    heads unless ``per_head`` is requested at call time.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocabulary,
        feature_dim: int = 32,
        model_dim: int = 32,
        heads: int = 2,
        layers: int = 2,
        max_len: int = 12,
        grid_side: int = 7,
        attention_layer: int = -1,
    ):
        self.vocab = vocab
        self.max_len = max_len
        self.model_dim = model_dim
        self.attention_layer = attention_layer
        self.encoder = VisualEncoder(rng, feature_dim, grid_side)
        scale = 1.0 / np.sqrt(model_dim)
        self.tok_embed = Tensor(
            rng.uniform(-scale, scale, size=(len(vocab), model_dim)), requires_grad=True
        )
        self.pos_embed = Tensor(
            rng.uniform(-scale, scale, size=(max_len, model_dim)), requires_grad=True
        )
        self.grid_proj = Linear(rng, feature_dim, model_dim)
        self.layers = [_DecoderLayer(rng, model_dim, heads) for _ in range(layers)]
        self.norm_out = LayerNorm(model_dim)
        self.out = Linear(rng, model_dim, len(vocab))

    def encode(self, image: Tensor) -> GridFeatures:
        return self.encoder(image)

    def _validate_prefix(self, prefix: list[int]) -> None:
        if not prefix:
            raise ContractError("decode: prefix must not be empty")
        if prefix[0] != Vocabulary.SOS:
            raise ContractError("decode: prefix must begin with [SOS]")
        if len(prefix) > self.max_len:
            raise ContractError(f"decode: prefix longer than max_len {self.max_len}")
        bad = [i for i in prefix if not 0 <= i < len(self.vocab)]
        if bad:
            raise ContractError(f"decode: ids {bad} outside the vocabulary")

    def forward_tokens(self, grid: GridFeatures, ids: list[int], captures: list[dict] | None = None) -> Tensor:
        """Teacher-forced logits (T, V) for every position of ``ids``."""
        self._validate_prefix(ids)
        t = len(ids)
        x = ad.embedding_lookup(self.tok_embed, ids)
        pos = ad.embedding_lookup(self.pos_embed, list(range(t)))
        x = x + pos
        mask = Tensor(np.triu(np.full((t, t), NEG_MASK), k=1))
        grid_tokens = self.grid_proj(grid.tokens)
        for i, layer in enumerate(self.layers):
            cap = captures[i] if captures is not None else None
            x = layer(x, grid_tokens, mask, cap)
        return self.out(self.norm_out(x))

    def decode_step(self, grid: GridFeatures, prefix: list[int]) -> tuple[Tensor, Tensor]:
        """Next-token logits plus the head-averaged cross-attention map.

        The map is the chosen layer's cross-attention distribution at the
        last position, reshaped to the visual grid.
        """
        captures = [{} for _ in self.layers]
        logits = self.forward_tokens(grid, prefix, captures)
        weights = captures[self.attention_layer]["cross_weights"]  # (heads, T, N)
        g = grid.grid_side
        attn = weights[:, -1, :].mean(axis=0).reshape(g, g)
        return Tensor(logits.data[-1]), Tensor(attn)

    def decode_step_per_head(self, grid: GridFeatures, prefix: list[int]) -> np.ndarray:
        """Debug view: per-head maps (heads, g, g) for the last position."""
        captures = [{} for _ in self.layers]
        self.forward_tokens(grid, prefix, captures)
        weights = captures[self.attention_layer]["cross_weights"]
        g = grid.grid_side
        return weights[:, -1, :].reshape(-1, g, g)

    def generate(self, grid: GridFeatures, max_len: int | None = None) -> CaptionOutput:
        """Greedy decode from [SOS]; stops at [EOS] or the length cap.

        One attention map is kept per emitted non-terminal token; if the cap
        is reached, [EOS] closes the sequence so at most max_len - 2 words
        are produced.
        """
        cap = self.max_len if max_len is None else max_len
        if cap < 2:
            raise ContractError(f"generate: max_len must be >= 2, got {cap}")
        cap = min(cap, self.max_len)
        tokens = [Vocabulary.SOS]
        maps: list[Tensor] = []
        while len(tokens) < cap - 1:
            logits, attn = self.decode_step(grid, tokens)
            nxt = int(np.argmax(logits.data))
            if nxt == Vocabulary.EOS:
                break
            tokens.append(nxt)
            maps.append(attn)
        tokens.append(Vocabulary.EOS)
        return CaptionOutput(tokens, maps)

    def caption_loss(self, grid: GridFeatures, gold: list[int]) -> Tensor:
        """Teacher-forced mean cross-entropy over non-[PAD] target positions."""
        if gold[0] != Vocabulary.SOS or Vocabulary.EOS not in gold:
            raise ContractError("caption_loss: gold tokens must be wrapped with [SOS]/[EOS]")
        if len([i for i in gold if i > Vocabulary.EOS]) == 0:
            raise ContractError("caption_loss: caption has no words")
        inputs = gold[:-1]
        targets = gold[1:]
        logits = self.forward_tokens(grid, inputs)
        losses = ad.cross_entropy_rows(logits, targets)
        keep = np.asarray([1.0 if t != Vocabulary.PAD else 0.0 for t in targets])
        return ad.tensor_sum(losses * Tensor(keep)) * (1.0 / keep.sum())

    def caption_image(self, image: Tensor, max_len: int | None = None) -> CaptionOutput:
        return self.generate(self.encode(image), max_len)
