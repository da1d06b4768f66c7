"""Labelled image datasets: directory ingestion, synthetic targets, stratified splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, InvalidInputError, StratificationError
from .graph import Image
from .image_io import read_image

IMAGE_SUFFIXES = (".pgm", ".png")

# The ten MSTAR vehicle classes in the order load_dataset assigns them.
MSTAR_CLASSES = ("2S1", "BMP2", "BRDM2", "BTR60", "BTR70", "D7", "T62", "T72", "ZIL131", "ZSU234")

SHAPE_NAMES = (
    "rectangle",
    "ellipse",
    "l_shape",
    "cross",
    "triangle",
    "ring",
    "t_shape",
    "diamond",
    "twin_blobs",
    "u_shape",
)


@dataclass(frozen=True)
class Sample:
    image: Image
    label: int
    source: str


@dataclass(frozen=True)
class DatasetManifest:
    class_names: list[str]
    counts: list[int]
    dims: tuple[int, int]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise InvalidInputError("class names must be unique")
        if len(self.counts) != len(self.class_names):
            raise InvalidInputError("need one count per class")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": list(self.counts), "dims": list(self.dims)}


def manifest_of(samples: Sequence[Sample], class_names: Sequence[str]) -> DatasetManifest:
    dims = {(s.image.height, s.image.width) for s in samples}
    if len(dims) > 1:
        raise IntegrityError(f"samples have mixed dims: {sorted(dims)}")
    counts = Counter(s.label for s in samples)
    return DatasetManifest(
        list(class_names),
        [counts.get(k, 0) for k in range(len(class_names))],
        dims.pop() if dims else (0, 0),
    )


def load_dataset(root) -> tuple[list[Sample], DatasetManifest]:
    """Read ``root/<class_name>/*.pgm|*.png``; classes are indexed lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"data root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise InvalidInputError(f"data root {root} contains no class directories")
    class_names = [p.name for p in class_dirs]
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            samples.append(Sample(read_image(path), label, str(path)))
    if not samples:
        raise InvalidInputError(f"data root {root} contains no PGM/PNG images")
    dims = Counter((s.image.height, s.image.width) for s in samples)
    if len(dims) > 1:
        common = dims.most_common(1)[0][0]
        offenders = [f"{s.source} ({s.image.height}x{s.image.width})" for s in samples if (s.image.height, s.image.width) != common]
        raise IntegrityError(f"images must share dims {common[0]}x{common[1]}; offenders: " + ", ".join(offenders))
    return samples, manifest_of(samples, class_names)


# ---------------------------------------------------------------------------
# synthetic targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for SAR chips: bright shaped targets casting dark shadows.

    ``noise`` is the standard deviation of the mean-one multiplicative speckle.
    """

    size: int = 32
    num_classes: int = 3
    samples_per_class: int = 87
    noise: float = 0.2
    shadow_offset: int = 3
    seed: int = 7
    jitter: float = 0.09
    background: float = 0.3
    shadow_level: float = 0.06

    def __post_init__(self):
        if self.size < 16:
            raise InvalidInputError(f"synthetic image size must be >= 16, got {self.size}")
        if not 2 <= self.num_classes <= len(SHAPE_NAMES):
            raise InvalidInputError(f"synthetic classes must be between 2 and {len(SHAPE_NAMES)}")
        if self.samples_per_class < 0 or self.noise < 0 or self.shadow_offset < 0:
            raise InvalidInputError("samples_per_class, noise and shadow_offset must be >= 0")
        if not 0 <= self.jitter < 0.5:
            raise InvalidInputError("jitter must lie in [0, 0.5)")

    @property
    def class_names(self) -> list[str]:
        return list(SHAPE_NAMES[: self.num_classes])


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Target silhouette in normalised coordinates (u: down, v: right, unit half-extent)."""
    au, av = np.abs(u), np.abs(v)
    if kind == 0:  # rectangle
        return (au <= 0.45) & (av <= 0.95)
    if kind == 1:  # ellipse
        return (u / 0.8) ** 2 + (v / 0.8) ** 2 <= 1.0
    if kind == 2:  # L
        return ((av <= 0.9) & (u >= 0.3) & (u <= 0.9)) | ((v >= -0.9) & (v <= -0.3) & (au <= 0.9))
    if kind == 3:  # cross
        return ((au <= 0.25) & (av <= 0.95)) | ((av <= 0.25) & (au <= 0.95))
    if kind == 4:  # triangle, apex up
        return (u <= 0.8) & (u >= -0.9) & (av <= (u + 0.9) * 0.55)
    if kind == 5:  # ring
        r2 = u**2 + v**2
        return (r2 <= 0.9**2) & (r2 >= 0.5**2)
    if kind == 6:  # T
        return ((u >= -0.9) & (u <= -0.4) & (av <= 0.9)) | ((av <= 0.25) & (u >= -0.9) & (u <= 0.9))
    if kind == 7:  # diamond
        return au + av <= 0.95
    if kind == 8:  # two blobs
        return ((u**2 + (v + 0.5) ** 2) <= 0.4**2) | ((u**2 + (v - 0.5) ** 2) <= 0.4**2)
    # U
    return ((av >= 0.5) & (av <= 0.9) & (au <= 0.9)) | ((u >= 0.45) & (u <= 0.9) & (av <= 0.9))


def render_target(cfg: SyntheticConfig, kind: int, rng: np.random.Generator) -> np.ndarray:
    n = cfg.size
    half = n * rng.uniform(0.22, 0.3)
    cy = n / 2 + rng.uniform(-cfg.jitter, cfg.jitter) * n
    cx = n / 2 + rng.uniform(-cfg.jitter, cfg.jitter) * n
    rows, cols = np.mgrid[0:n, 0:n] + 0.5
    target = _shape_mask(kind, (rows - cy) / half, (cols - cx) / half)
    shadow = np.zeros_like(target)
    off = cfg.shadow_offset
    if off:
        shadow[off:, :] = target[:-off, :]
        shadow &= ~target
    img = np.full((n, n), cfg.background)
    img[shadow] = cfg.shadow_level
    img[target] = rng.uniform(0.75, 1.0)
    if cfg.noise > 0:
        # mean-one gamma speckle with standard deviation ``noise``
        k = 1.0 / cfg.noise**2
        img = img * rng.gamma(k, 1.0 / k, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    """Deterministic per seed; samples are grouped by class."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.num_classes)
    samples = []
    for label, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        for k in range(cfg.samples_per_class):
            img = render_target(cfg, label, rng)
            samples.append(Sample(Image(img), label, f"synthetic:{SHAPE_NAMES[label]}:{k}"))
    return samples


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(samples: Sequence[Sample], test_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Stratified shuffle split; each class sends ``round(n * test_fraction)`` samples to test."""
    if not 0 < test_fraction < 1:
        raise InvalidInputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = np.asarray(by_class[label])
        if idx.size < 2:
            raise StratificationError(f"class {label} has {idx.size} sample(s); need at least 2 to split")
        n_test = min(max(int(np.floor(idx.size * test_fraction + 0.5)), 1), idx.size - 1)
        perm = rng.permutation(idx)
        test_idx.extend(perm[:n_test].tolist())
        train_idx.extend(perm[n_test:].tolist())
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(test_idx)]
