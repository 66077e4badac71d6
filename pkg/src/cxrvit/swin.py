"""Hierarchical shifted-window transformer classifier.

Stages of (regular, shifted) window-attention blocks separated by 2x2
patch merging, followed by mean pooling and a linear head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Attention, LayerNorm, Linear, Mlp, Module, attention_params, drop_path, mlp_params, parameter

MASK_VALUE = -1e9


@dataclass(frozen=True)
class SwinConfig:
    img_size: int = 32
    patch_size: int = 4
    embed_dim: int = 8
    depths: tuple[int, ...] = (1, 1)
    num_heads: tuple[int, ...] = (2, 2)
    window_size: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    drop_path_rate: float = 0.0
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))
        self.validate()

    def validate(self) -> None:
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ValueError("depths and num_heads must be non-empty and equally long")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        for stage, (res, dim, heads) in enumerate(zip(self.resolutions, self.dims, self.num_heads)):
            if res % self.window_size:
                raise ValueError(f"stage {stage} resolution {res} not divisible by window {self.window_size}")
            if dim % heads:
                raise ValueError(f"stage {stage} width {dim} not divisible by {heads} heads")
            if stage < len(self.depths) - 1 and res % 2:
                raise ValueError(f"stage {stage} resolution {res} is odd; cannot merge patches")

    @property
    def resolutions(self) -> list[int]:
        base = self.img_size // self.patch_size
        return [base // 2**i for i in range(len(self.depths))]

    @property
    def dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(len(self.depths))]

    def to_dict(self) -> dict:
        return asdict(self)


SWIN_TOY = SwinConfig()
# Swin-B at 224 px
SWIN_BASE = SwinConfig(
    img_size=224, patch_size=4, embed_dim=128, depths=(2, 2, 18, 2),
    num_heads=(4, 8, 16, 32), window_size=7, drop_path_rate=0.5,
)


def swin_param_count(cfg: SwinConfig) -> int:
    """Closed-form parameter count.

    patch embed: p*p*in*C + C (projection) + 2C (norm)
    block(d, h): 2d + attn(d) + (2w-1)^2 h + 2d + mlp(d, r d)
    merge(d):    2*4d + 4d*2d (reduction has no bias)
    tail:        2 C_last + C_last*K + K
    """
    p, c = cfg.patch_size, cfg.embed_dim
    total = p * p * cfg.in_chans * c + c + 2 * c
    table = (2 * cfg.window_size - 1) ** 2
    for stage, (depth, heads, d) in enumerate(zip(cfg.depths, cfg.num_heads, cfg.dims)):
        hidden = int(d * cfg.mlp_ratio)
        block = 2 * d + attention_params(d) + table * heads + 2 * d + mlp_params(d, hidden)
        total += depth * block
        if stage < len(cfg.depths) - 1:
            total += 2 * 4 * d + 4 * d * 2 * d
    last = cfg.dims[-1]
    return total + 2 * last + last * cfg.num_classes + cfg.num_classes


# ---------------------------------------------------------------------
# windowing primitives
# ---------------------------------------------------------------------
def window_partition(x: Tensor, w: int) -> Tensor:
    """(B, H, W, C) -> (B * H/w * W/w, w, w, C), windows in row-major order."""
    B, H, W, C = x.shape
    if H % w or W % w:
        raise ShapeError(f"{H}x{W} feature map is not divisible into {w}x{w} windows")
    x = x.reshape(B, H // w, w, W // w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w, w, C)


def window_reverse(windows: Tensor, w: int, H: int, W: int) -> Tensor:
    if H % w or W % w:
        raise ShapeError(f"{H}x{W} feature map is not divisible into {w}x{w} windows")
    per_image = (H // w) * (W // w)
    n = windows.shape[0]
    if windows.shape[1:3] != (w, w) or n % per_image:
        raise ShapeError(f"{windows.shape} windows are inconsistent with a {H}x{W} map and window {w}")
    C = windows.shape[-1]
    x = windows.reshape(n // per_image, H // w, W // w, w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n // per_image, H, W, C)


def relative_position_index(w: int) -> np.ndarray:
    """(w*w, w*w) index into a (2w-1)^2 bias table keyed by coordinate deltas."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def shifted_window_mask(H: int, W: int, w: int, shift: int) -> np.ndarray:
    """Additive (nW, w*w, w*w) mask for attention on a map rolled by ``-shift``.

    Tokens sharing a window after the cyclic roll but coming from different
    regions of the unrolled image get MASK_VALUE.
    """
    if not 0 <= shift < w:
        raise ValueError(f"shift must lie in [0, {w}), got {shift}")
    n_windows = (H // w) * (W // w)
    if shift == 0:
        return np.zeros((n_windows, w * w, w * w))
    region = np.zeros((1, H, W, 1))
    label = 0
    bands = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in bands:
        for ws in bands:
            region[:, hs, ws, :] = label
            label += 1
    ids = window_partition(Tensor(region, dtype=np.float64), w).data.reshape(-1, w * w)
    differs = ids[:, None, :] != ids[:, :, None]
    return np.where(differs, MASK_VALUE, 0.0)


# ---------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------
class PatchEmbed(Module):
    def __init__(self, cfg: SwinConfig, rng: np.random.Generator):
        self.img_size = cfg.img_size
        self.patch = cfg.patch_size
        self.proj = Linear(cfg.in_chans * cfg.patch_size**2, cfg.embed_dim, rng)
        self.norm = LayerNorm(cfg.embed_dim)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if H != self.img_size or W != self.img_size:
            raise ShapeError(f"expected {self.img_size}x{self.img_size} input, got {H}x{W}")
        p = self.patch
        patches = x.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(B, (H // p) * (W // p), C * p * p)
        return self.norm(self.proj(patches))


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.window = window
        self.attn = Attention(dim, heads, rng)
        self.bias_table = parameter(np.zeros(((2 * window - 1) ** 2, heads)))
        self._index = relative_position_index(window)

    def relative_bias(self) -> Tensor:
        n = self.window**2
        bias = ag.take_rows(self.bias_table, self._index.reshape(-1)).reshape(n, n, -1)
        return bias.transpose(2, 0, 1)

    def forward(self, tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """tokens: (num_windows, w*w, C)."""
        return self.attn(tokens, bias=self.relative_bias(), mask=mask)


class SwinBlock(Module):
    def __init__(self, dim: int, resolution: int, heads: int, window: int, shift: int,
                 mlp_ratio: float, drop_path_rate: float, rng: np.random.Generator):
        if resolution <= window:
            window, shift = resolution, 0
        self.dim, self.resolution, self.window, self.shift = dim, resolution, window, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.drop_path_rate = drop_path_rate
        self.rng: np.random.Generator | None = None
        self._mask = shifted_window_mask(resolution, resolution, window, shift) if shift else None

    def forward(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        R, w, s = self.resolution, self.window, self.shift
        h = self.norm1(x).reshape(B, R, R, C)
        if s:
            h = ag.roll(h, (-s, -s), (1, 2))
        windows = window_partition(h, w).reshape(-1, w * w, C)
        windows = self.attn(windows, self._mask).reshape(-1, w, w, C)
        h = window_reverse(windows, w, R, R)
        if s:
            h = ag.roll(h, (s, s), (1, 2))
        x = x + drop_path(h.reshape(B, L, C), self.drop_path_rate, self.rng, self.training)
        return x + drop_path(self.mlp(self.norm2(x)), self.drop_path_rate, self.rng, self.training)


class PatchMerging(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def concat_neighbourhoods(self, x: Tensor) -> Tensor:
        """(B, H, W, C) -> (B, H/2, W/2, 4C) ordered [(0,0), (1,0), (0,1), (1,1)]."""
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"patch merging needs even extents, got {H}x{W}")
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 4, 2, 5)
        return x.reshape(B, H // 2, W // 2, 4 * C)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduction(self.norm(self.concat_neighbourhoods(x)))


class _Stage(Module):
    def __init__(self, blocks: list[SwinBlock]):
        self.blocks = blocks


class SwinTransformer(Module):
    def __init__(self, cfg: SwinConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        rates = np.linspace(0.0, cfg.drop_path_rate, sum(cfg.depths)).tolist()
        self.stages: list[_Stage] = []
        self.merges: list[PatchMerging] = []
        k = 0
        for stage, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads)):
            dim, res = cfg.dims[stage], cfg.resolutions[stage]
            blocks = []
            for i in range(depth):
                shift = cfg.window_size // 2 if i % 2 else 0
                blocks.append(SwinBlock(dim, res, heads, cfg.window_size, shift, cfg.mlp_ratio, rates[k], rng))
                k += 1
            self.stages.append(_Stage(blocks))
            if stage < len(cfg.depths) - 1:
                self.merges.append(PatchMerging(dim, rng))
        self.norm = LayerNorm(cfg.dims[-1])
        self.head = Linear(cfg.dims[-1], cfg.num_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.patch_embed(ag.as_tensor(x))
        for stage, blocks in enumerate(self.stages):
            for block in blocks.blocks:
                x = block(x)
            if stage < len(self.merges):
                B, L, C = x.shape
                R = self.cfg.resolutions[stage]
                x = self.merges[stage](x.reshape(B, R, R, C))
                x = x.reshape(B, -1, 2 * C)
        x = self.norm(x).mean(axis=1)
        return self.head(x)


def swin_forward(model: SwinTransformer, x) -> Tensor:
    return model(x)
