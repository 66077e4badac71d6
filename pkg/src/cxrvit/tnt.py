"""Transformer-in-transformer classifier.

Each image is cut into sentence patches, and each sentence into word
sub-patches.  Every block runs an inner transformer over the words of
each sentence, folds the words back into their sentence embedding, then
runs an outer transformer over sentences plus a class token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Attention, LayerNorm, Linear, Mlp, Module, attention_params, mlp_params, parameter, trunc_normal


@dataclass(frozen=True)
class TntConfig:
    img_size: int = 16
    sentence_patch: int = 8
    word_patch: int = 4
    outer_dim: int = 16
    inner_dim: int = 8
    depth: int = 1
    outer_heads: int = 2
    inner_heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 3
    in_chans: int = 3

    def __post_init__(self):
        if self.img_size % self.sentence_patch:
            raise ValueError(f"img_size {self.img_size} not divisible by sentence_patch {self.sentence_patch}")
        if self.sentence_patch % self.word_patch:
            raise ValueError(f"sentence_patch {self.sentence_patch} not divisible by word_patch {self.word_patch}")
        if self.outer_dim % self.outer_heads or self.inner_dim % self.inner_heads:
            raise ValueError("embedding widths must be divisible by their head counts")
        if self.num_classes < 2 or self.depth < 1:
            raise ValueError("need num_classes >= 2 and depth >= 1")

    @property
    def num_sentences(self) -> int:
        return (self.img_size // self.sentence_patch) ** 2

    @property
    def num_words(self) -> int:
        return (self.sentence_patch // self.word_patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


TNT_TOY = TntConfig()
# TNT-S geometry at the 384 px input used for this task
TNT_SMALL_384 = TntConfig(
    img_size=384, sentence_patch=16, word_patch=4, outer_dim=384, inner_dim=24,
    depth=12, outer_heads=6, inner_heads=4,
)


def tnt_param_count(cfg: TntConfig) -> int:
    """Closed-form parameter count.

    words:     3 w^2 di + di (projection) + Nw di (positions)
    sentences: 2 Nw di + Nw di do + do + 2 do (norm, projection, norm)
               + do (class token) + (Ns + 1) do (positions)
    block:     inner 4 di + attn(di) + mlp(di)
               + fold 2 Nw di + Nw di do + do
               + outer 4 do + attn(do) + mlp(do)
    tail:      2 do + do K + K
    """
    di, do, nw, ns = cfg.inner_dim, cfg.outer_dim, cfg.num_words, cfg.num_sentences
    flat = nw * di
    total = cfg.in_chans * cfg.word_patch**2 * di + di + nw * di
    total += 2 * flat + flat * do + do + 2 * do + do + (ns + 1) * do
    block = 4 * di + attention_params(di) + mlp_params(di, int(di * cfg.mlp_ratio))
    block += 2 * flat + flat * do + do
    block += 4 * do + attention_params(do) + mlp_params(do, int(do * cfg.mlp_ratio))
    return total + cfg.depth * block + 2 * do + do * cfg.num_classes + cfg.num_classes


class Embedding(Module):
    """Pixel -> (sentence, word) embeddings."""

    def __init__(self, cfg: TntConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.word_proj = Linear(cfg.in_chans * cfg.word_patch**2, cfg.inner_dim, rng)
        self.word_pos = parameter(trunc_normal(rng, (cfg.num_words, cfg.inner_dim)))
        self.sentence_norm1 = LayerNorm(cfg.num_words * cfg.inner_dim)
        self.sentence_proj = Linear(cfg.num_words * cfg.inner_dim, cfg.outer_dim, rng)
        self.sentence_norm2 = LayerNorm(cfg.outer_dim)
        self.cls_token = parameter(np.zeros((1, 1, cfg.outer_dim)))
        self.sentence_pos = parameter(trunc_normal(rng, (cfg.num_sentences + 1, cfg.outer_dim)))

    def split(self, x: Tensor) -> Tensor:
        """(B, C, H, W) -> raw word pixels (B * Ns, Nw, C * w * w)."""
        cfg = self.cfg
        B, C, H, W = x.shape
        if H != cfg.img_size or W != cfg.img_size:
            raise ShapeError(f"expected {cfg.img_size}x{cfg.img_size} input, got {H}x{W}")
        s, w = cfg.sentence_patch, cfg.word_patch
        g, n = H // s, s // w
        x = x.reshape(B, C, g, n, w, g, n, w).transpose(0, 2, 5, 3, 6, 1, 4, 7)
        return x.reshape(B * g * g, n * n, C * w * w)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        B = x.shape[0]
        cfg = self.cfg
        words = self.word_proj(self.split(x)) + self.word_pos
        flat = words.reshape(B, cfg.num_sentences, cfg.num_words * cfg.inner_dim)
        sentences = self.sentence_norm2(self.sentence_proj(self.sentence_norm1(flat)))
        cls = self.cls_token * np.ones((B, 1, 1))
        sentences = ag.concat([cls, sentences], axis=1) + self.sentence_pos
        return sentences, words


def sentence_word_split(model: "TNT", x) -> tuple[Tensor, Tensor]:
    """Sentence embeddings (B, Ns, outer_dim) and word embeddings (B*Ns, Nw, inner_dim)."""
    sentences, words = model.embed(ag.as_tensor(x))
    return sentences[:, 1:], words


class TransformerLayer(Module):
    """Pre-norm attention + MLP, each with a residual connection."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


class WordAggregation(Module):
    def __init__(self, cfg: TntConfig, rng: np.random.Generator):
        self.norm = LayerNorm(cfg.num_words * cfg.inner_dim)
        self.proj = Linear(cfg.num_words * cfg.inner_dim, cfg.outer_dim, rng)

    def forward(self, words: Tensor, sentences: Tensor) -> Tensor:
        """Add projected words to their sentence; ``sentences`` carries the class token at 0."""
        B, n1, D = sentences.shape
        flat = words.reshape(B, n1 - 1, -1)
        update = self.proj(self.norm(flat))
        return ag.concat([sentences[:, :1], sentences[:, 1:] + update], axis=1)


class TntBlock(Module):
    def __init__(self, cfg: TntConfig, rng: np.random.Generator):
        self.inner = TransformerLayer(cfg.inner_dim, cfg.inner_heads, cfg.mlp_ratio, rng)
        self.aggregate = WordAggregation(cfg, rng)
        self.outer = TransformerLayer(cfg.outer_dim, cfg.outer_heads, cfg.mlp_ratio, rng)

    def forward(self, words: Tensor, sentences: Tensor, outer_mask: np.ndarray | None = None):
        words = self.inner(words)
        sentences = self.aggregate(words, sentences)
        sentences = self.outer(sentences, mask=outer_mask)
        return words, sentences


class TNT(Module):
    def __init__(self, cfg: TntConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = Embedding(cfg, rng)
        self.blocks = [TntBlock(cfg, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.outer_dim)
        self.head = Linear(cfg.outer_dim, cfg.num_classes, rng)

    def forward(self, x, outer_mask: np.ndarray | None = None) -> Tensor:
        sentences, words = self.embed(ag.as_tensor(x))
        for block in self.blocks:
            words, sentences = block(words, sentences, outer_mask)
        return self.head(self.norm(sentences[:, 0]))


def tnt_forward(model: TNT, x) -> Tensor:
    return model(x)
