"""Name -> architecture registry used by the trainer, CLI and checkpoints."""

from __future__ import annotations

import numpy as np

from .checkpoint import Checkpoint, CheckpointSizeError
from .nn import Module
from .swin import SWIN_BASE, SWIN_TOY, SwinConfig, SwinTransformer, swin_param_count
from .tnt import TNT, TNT_SMALL_384, TNT_TOY, TntConfig, tnt_param_count

PRESETS = {
    ("swin", "toy"): SWIN_TOY,
    ("swin", "base"): SWIN_BASE,
    ("tnt", "toy"): TNT_TOY,
    ("tnt", "small"): TNT_SMALL_384,
}


def make_config(kind: str, overrides: dict | None = None, preset: str | None = None):
    if kind not in ("swin", "tnt"):
        raise ValueError(f"unknown model kind {kind!r}; expected 'swin' or 'tnt'")
    cls = SwinConfig if kind == "swin" else TntConfig
    base = {}
    if preset is not None:
        if (kind, preset) not in PRESETS:
            raise ValueError(f"no preset {preset!r} for {kind}")
        base = PRESETS[kind, preset].to_dict()
    fields = {**base, **(overrides or {})}
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ValueError(f"bad {kind} config: {exc}") from None


def build_model(kind: str, cfg, seed: int = 0) -> Module:
    return SwinTransformer(cfg, seed) if kind == "swin" else TNT(cfg, seed)


def param_count(kind: str, cfg) -> int:
    return swin_param_count(cfg) if kind == "swin" else tnt_param_count(cfg)


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    cfg = make_config(ckpt.kind, ckpt.model_config)
    model = build_model(ckpt.kind, cfg)
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise CheckpointSizeError(f"checkpoint parameters do not match the config: {missing[:5]}")
    for name, p in named.items():
        blob = ckpt.params[name]
        if blob.shape != p.shape:
            raise CheckpointSizeError(f"{name}: stored shape {blob.shape}, config expects {p.shape}")
        p.data[...] = blob.astype(p.dtype)
    return model


def snapshot_params(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data.astype(np.float32) for name, p in model.named_parameters()}


def model_gradcheck(model: Module, x: np.ndarray, targets, smoothing: float = 0.1, eps: float = 1e-6,
                    max_components: int | None = None, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of the training loss w.r.t. every parameter and the input.

    Needs a float64 model built under ``precision(np.float64)``.  With
    ``max_components`` only that many randomly chosen entries of each
    tensor are probed.
    """
    from . import autograd as ag
    from .optim import label_smoothed_ce

    rng = np.random.default_rng(seed)
    image = ag.Tensor(x, dtype=np.float64)
    tensors = list(model.named_parameters()) + [("input", image)]

    def loss(_):
        return label_smoothed_ce(model(image), targets, smoothing)

    errors = {}
    for name, t in tensors:
        indices = None
        if max_components is not None and t.size > max_components:
            flat = rng.choice(t.size, size=max_components, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        model.zero_grad()
        errors[name] = ag.gradcheck(loss, t, eps=eps, indices=indices)
    model.zero_grad()
    return errors
