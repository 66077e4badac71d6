"""Parameter containers and the layers shared by both classifiers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # resample anything beyond two standard deviations
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Module:
    """Attribute-walking parameter registry.

    Parameters are the ``requires_grad`` tensors found on the instance,
    in sub-modules, or in lists of sub-modules, in attribute-definition
    order.  That order fixes checkpoint layout.
    """

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        ag.zero_grad(self.parameters())

    def set_rng(self, rng: np.random.Generator | None) -> None:
        """Hand a generator to every layer that draws randomness (drop path)."""
        for m in self.modules():
            if "rng" in vars(m):
                m.rng = rng

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Stochastic depth: zero whole residual branches per sample."""
    if rate <= 0.0 or not training or rng is None:
        return x
    keep = 1.0 - rate
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep) / keep
    return x * mask.astype(x.dtype)


class Attention(Module):
    """Multi-head scaled dot-product self-attention over (B, N, C) tokens.

    ``bias`` (heads, N, N) and ``mask`` (nW, N, N) are added to the logits
    before the softmax; the mask is tiled over a batch laid out as
    (B * nW) windows.  The most recent attention weights are kept on
    ``last_attention`` when ``record`` is set.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.record = False
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        B, N, C = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(B, N, 3, h, C // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ ag.swap_last(k)
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            nw = mask.shape[0]
            logits = (logits.reshape(B // nw, nw, h, N, N) + mask[:, None]).reshape(B, h, N, N)
        attn = ag.softmax(logits, axis=-1)
        if self.record:
            self.last_attention = attn.data.copy()
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, C)
        return self.proj(out)


def attention_params(dim: int) -> int:
    return 3 * dim * dim + 3 * dim + dim * dim + dim


def mlp_params(dim: int, hidden: int) -> int:
    return dim * hidden + hidden + hidden * dim + dim
