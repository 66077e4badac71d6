"""Manifests over image directories and the synthetic three-class set."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import CLASSES, label_index
from .fileio import atomic_write_bytes, atomic_write_text
from .imaging import ImageDecodeError, encode_image, read_image


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image_id: str
    label: int


@dataclass
class Manifest:
    """Rows of (relative path, label) resolved against ``root``."""

    root: Path
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    def path_of(self, sample: Sample) -> Path:
        return self.root / sample.image_id

    def truth(self) -> dict[str, int]:
        return {s.image_id: s.label for s in self.samples}

    def check_files(self) -> None:
        missing = [s.image_id for s in self.samples if not self.path_of(s).is_file()]
        if missing:
            raise DataError(f"{len(missing)} manifest files missing, first: {missing[0]}")


def parse_manifest(text: str, root) -> Manifest:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError("manifest is empty")
    header = [h.strip() for h in rows[0]]
    if len(header) != 2 or header[0] not in ("path", "image_id") or header[1] != "label":
        raise DataError("manifest header must be 'path,label' (or 'image_id,label')")
    samples = []
    seen: set[str] = set()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"manifest line {line}: expected 2 fields, got {len(row)}")
        path, label = row[0].strip(), row[1].strip()
        if path in seen:
            raise DataError(f"manifest line {line}: duplicate path {path!r}")
        seen.add(path)
        try:
            samples.append(Sample(path, label_index(label)))
        except ValueError as exc:
            raise DataError(f"manifest line {line}: {exc}") from None
    if not samples:
        raise DataError("manifest has no rows")
    return Manifest(Path(root), samples)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    return parse_manifest(text, path.parent)


def format_manifest(samples: list[Sample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label"])
    for s in samples:
        writer.writerow([s.image_id, CLASSES[s.label]])
    return buf.getvalue()


def load_images(manifest: Manifest) -> tuple[list[tuple[Sample, np.ndarray]], list[tuple[str, str]]]:
    """Decode every manifest image; unreadable ones go to the error list."""
    good, errors = [], []
    for s in manifest.samples:
        try:
            good.append((s, read_image(manifest.path_of(s))))
        except (OSError, ImageDecodeError) as exc:
            errors.append((s.image_id, f"{type(exc).__name__}: {exc}"))
    return good, errors


# ---------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------
# mean-intensity bands per class; disjoint so the classes separate by mean
CLASS_LEVELS = ((0.20, 0.30), (0.45, 0.55), (0.70, 0.80))
PATTERN_AMPLITUDE = 0.15
CLASS_SLUGS = ("covid19", "normal", "pneumonia")


def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if label == 0:
        # scattered ground-glass blobs
        out = np.zeros((size, size))
        for _ in range(int(rng.integers(3, 6))):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            r = rng.uniform(0.06, 0.14)
            out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    elif label == 1:
        # two dark lung fields
        out = np.zeros((size, size))
        for cx in (0.3, 0.7):
            cx += rng.uniform(-0.04, 0.04)
            out -= (((xx - cx) / 0.16) ** 2 + ((yy - 0.5) / 0.32) ** 2 < 1.0).astype(float)
    else:
        # one-sided consolidation over horizontal banding
        side = 0.3 if rng.random() < 0.5 else 0.7
        out = np.exp(-((yy - rng.uniform(0.4, 0.7)) ** 2 + (xx - side) ** 2) / 0.02)
        out += 0.5 * np.sin(2 * np.pi * yy * rng.uniform(3.0, 5.0))
    span = np.abs(out).max()
    return out / span if span > 0 else out


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """(size, size, 1) image in [0, 1] whose mean lies in CLASS_LEVELS[label]."""
    lo, hi = CLASS_LEVELS[label]
    level = rng.uniform(lo + 0.01, hi - 0.01)
    pattern = PATTERN_AMPLITUDE * _pattern(label, size, rng)
    noise = rng.uniform(-0.02, 0.02, size=(size, size))
    body = pattern + noise
    img = level + body - body.mean()
    return np.clip(img, 0.0, 1.0)[:, :, None]


def make_synthetic(out_dir, n_per_class: int, seed: int = 0, size: int = 32) -> Manifest:
    """Write 3 * n P5 images plus ``manifest.csv`` under ``out_dir``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if size < 4:
        raise ValueError("size must be at least 4")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per_class):
        for label, slug in enumerate(CLASS_SLUGS):
            rel = f"{slug}/{slug}_{i:04d}.pgm"
            atomic_write_bytes(out_dir / rel, encode_image(synthetic_image(label, size, rng)))
            samples.append(Sample(rel, label))
    atomic_write_text(out_dir / "manifest.csv", format_manifest(samples))
    return Manifest(out_dir, samples)
