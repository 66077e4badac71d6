"""Image decoding and the train/eval preprocessing chains.

Images are float arrays of shape (H, W, C) with values in [0, 1].  The
training chain is resize -> horizontal flip -> one affine op -> random
erasing -> normalise; evaluation is resize -> normalise.  There is no
crop and no brightness or contrast stage in either chain.

Randomness comes from ``numpy.random.Generator`` over ``PCG64``; the
stream for a sample is seeded from ``SeedSequence([seed, epoch, index, stream])``
so results do not depend on processing order.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np


class ImageDecodeError(ValueError):
    pass


class UnsupportedFormatError(ImageDecodeError):
    pass


class MalformedHeaderError(ImageDecodeError):
    pass


class TruncatedPayloadError(ImageDecodeError):
    pass


class UnsupportedMaxvalError(ImageDecodeError):
    pass


# ---------------------------------------------------------------------
# PNM codec
# ---------------------------------------------------------------------
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_image(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval <= 255."""
    if len(data) < 2 or data[:1] != b"P":
        raise UnsupportedFormatError("not a PNM stream")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported PNM format {magic.decode('latin-1')!r}")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeaderError("header ends before width, height and maxval")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise MalformedHeaderError(f"non-numeric header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    if not 1 <= maxval <= 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} is not an 8-bit value")
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.astype(np.float64) / maxval


def encode_image(img: np.ndarray) -> bytes:
    """Encode (H, W, 1|3) values in [0, 1] as P5/P6, clamping first."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot encode {c} channels")
    pixels = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


# ---------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------
MAX_ROTATION_CAP = 15.0
MAX_TRANSLATE_CAP = 0.10

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentPolicy:
    target_size: int = 224
    flip_prob: float = 0.5
    affine_prob: float = 0.25
    max_rotation_deg: float = 10.0
    max_translate_frac: float = 0.05
    erase_prob: float = 0.25
    erase_area_range: tuple[float, float] = (0.02, 0.1)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)
    erase_fill: float = 0.0
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def __post_init__(self):
        for name in ("erase_area_range", "erase_aspect_range", "mean", "std"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.target_size < 1:
            raise ValueError("target_size must be positive")
        for name in ("flip_prob", "affine_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not 0.0 <= self.max_rotation_deg <= MAX_ROTATION_CAP:
            raise ValueError(f"max_rotation_deg is capped at {MAX_ROTATION_CAP}")
        if not 0.0 <= self.max_translate_frac <= MAX_TRANSLATE_CAP:
            raise ValueError(f"max_translate_frac is capped at {MAX_TRANSLATE_CAP}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("erase_area_range must satisfy 0 < min <= max < 1")
        lo, hi = self.erase_aspect_range
        if not 0.0 < lo <= hi:
            raise ValueError("erase_aspect_range must be positive and ordered")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need one value per RGB channel")
        if min(self.std) <= 0:
            raise ValueError("std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def disabled(cls, **kwargs) -> "AugmentPolicy":
        """Every random stage switched off."""
        return cls(flip_prob=0.0, affine_prob=0.0, erase_prob=0.0, **kwargs)


def sample_rng(seed: int, epoch: int = 0, index: int = 0, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed on (seed, epoch, index, stream)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, index, stream])))


class StageRecord(NamedTuple):
    name: str
    params: dict


# ---------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------
def _interp_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.intp)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear resize: output corners sample input corners."""
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    H, W = img.shape[:2]
    if (H, W) == (h, w):
        return img.copy()
    r0, r1, fr = _interp_coords(H, h)
    c0, c1, fc = _interp_coords(W, w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return np.clip(top * (1 - fr) + bottom * fr, 0.0, 1.0)


def random_hflip(img: np.ndarray, p: float, rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    flipped = bool(rng.random() < p)
    if trace is not None:
        trace.append(StageRecord("hflip", {"applied": flipped}))
    return img[:, ::-1].copy() if flipped else img


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content right by ``dx`` and down by ``dy`` pixels, zero-filling."""
    H, W = img.shape[:2]
    out = np.zeros_like(img)
    if abs(dx) >= W or abs(dy) >= H:
        return out
    src_r = slice(max(0, -dy), H - max(0, dy))
    dst_r = slice(max(0, dy), H - max(0, -dy))
    src_c = slice(max(0, -dx), W - max(0, dx))
    dst_c = slice(max(0, dx), W - max(0, -dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre with bilinear resampling and zero fill."""
    H, W = img.shape[:2]
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    # inverse map: output pixel -> source location
    sx = cos * (xx - cx) + sin * (yy - cy) + cx
    sy = -sin * (xx - cx) + cos * (yy - cy) + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]

    def tap(yi, xi):
        ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        vals = img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        return np.where(ok[:, :, None], vals, 0.0)

    out = (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )
    return np.clip(out, 0.0, 1.0)


AFFINE_OPS = ("rotate", "translate_x", "translate_y")


def random_affine(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                  trace: list | None = None) -> np.ndarray:
    """With probability ``affine_prob`` apply exactly one of rotation,
    horizontal translation or vertical translation."""
    params: dict = {"op": None}
    out = img
    if rng.random() < policy.affine_prob:
        op = AFFINE_OPS[int(rng.integers(3))]
        params["op"] = op
        H, W = img.shape[:2]
        if op == "rotate":
            angle = float(rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg))
            params["degrees"] = angle
            out = rotate(img, angle)
        elif op == "translate_x":
            limit = int(math.floor(policy.max_translate_frac * W))
            dx = int(rng.integers(-limit, limit + 1))
            params["pixels"] = dx
            out = translate(img, dx, 0)
        else:
            limit = int(math.floor(policy.max_translate_frac * H))
            dy = int(rng.integers(-limit, limit + 1))
            params["pixels"] = dy
            out = translate(img, 0, dy)
    if trace is not None:
        trace.append(StageRecord("affine", params))
    return out


ERASE_ATTEMPTS = 10


def random_erasing(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                   trace: list | None = None) -> np.ndarray:
    """With probability ``erase_prob`` overwrite one in-frame rectangle.

    Placement is rejection-sampled; a draw is kept only if the rounded
    rectangle fits and its area fraction stays within the configured range.
    After ERASE_ATTEMPTS rejections the image is returned unchanged.
    """
    params: dict = {"box": None}
    out = img
    if rng.random() < policy.erase_prob:
        H, W = img.shape[:2]
        area = H * W
        lo, hi = policy.erase_area_range
        log_aspect = (math.log(policy.erase_aspect_range[0]), math.log(policy.erase_aspect_range[1]))
        for _ in range(ERASE_ATTEMPTS):
            target = rng.uniform(lo, hi) * area
            aspect = math.exp(rng.uniform(*log_aspect))
            eh = int(round(math.sqrt(target * aspect)))
            ew = int(round(math.sqrt(target / aspect)))
            if not (0 < eh < H and 0 < ew < W and lo <= eh * ew / area <= hi):
                continue
            top = int(rng.integers(0, H - eh + 1))
            left = int(rng.integers(0, W - ew + 1))
            out = img.copy()
            out[top : top + eh, left : left + ew] = policy.erase_fill
            params["box"] = (top, left, eh, ew)
            break
    if trace is not None:
        trace.append(StageRecord("erase", params))
    return out


def to_rgb(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 3:
        return img
    if img.shape[2] != 1:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[2]}")
    return np.repeat(img, 3, axis=2)


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    return (img - mean) / std


# ---------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------
def _resize_stage(img, policy, rng, trace):
    if trace is not None:
        trace.append(StageRecord("resize", {"size": policy.target_size}))
    return resize_bilinear(img, policy.target_size, policy.target_size)


def _flip_stage(img, policy, rng, trace):
    return random_hflip(img, policy.flip_prob, rng, trace)


def _normalize_stage(img, policy, rng, trace):
    if trace is not None:
        trace.append(StageRecord("normalize", {}))
    return normalize(to_rgb(img), policy.mean, policy.std)


Stage = Callable[[np.ndarray, AugmentPolicy, "np.random.Generator | None", "list | None"], np.ndarray]

STAGE_REGISTRY: dict[str, Stage] = {
    "resize": _resize_stage,
    "hflip": _flip_stage,
    "affine": random_affine,
    "erase": random_erasing,
    "normalize": _normalize_stage,
}
RANDOM_STAGES = frozenset({"hflip", "affine", "erase"})
TRAIN_STAGES = ("resize", "hflip", "affine", "erase", "normalize")
EVAL_STAGES = ("resize", "normalize")
PREVIEW_STAGES = TRAIN_STAGES[:-1]


def run_stages(img, stages, policy, rng=None, trace=None) -> np.ndarray:
    for name in stages:
        if name in RANDOM_STAGES and rng is None:
            raise ValueError(f"stage {name!r} needs a random generator")
        img = STAGE_REGISTRY[name](img, policy, rng, trace)
    return img


def _chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def train_pipeline(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                   trace: list | None = None) -> np.ndarray:
    """Augmented (3, S, S) float32 array."""
    return _chw(run_stages(img, TRAIN_STAGES, policy, rng, trace))


def eval_pipeline(img: np.ndarray, policy: AugmentPolicy, trace: list | None = None) -> np.ndarray:
    """Deterministic (3, S, S) float32 array: resize and normalise only."""
    return _chw(run_stages(img, EVAL_STAGES, policy, None, trace))


def preview_pipeline(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                     trace: list | None = None) -> np.ndarray:
    """Training chain without normalisation, still in [0, 1] and (H, W, C)."""
    return run_stages(img, PREVIEW_STAGES, policy, rng, trace)
