"""Procedural shapes dataset with controllable hardness factors.

Each image shows one large target shape (the class). Hardness knobs add
distractor shapes from other classes, a bar occluding part of the target,
and additive pixel noise. Per image, a single latent draw u ~ U[0,1] scales
all three factors together, so the dataset spans a smooth easy-to-hard
continuum with ground truth controlling it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, LabeledImage
from .errors import ConfigError
from .seeds import rng_for

SHAPE_NAMES = (
    "circle",
    "square",
    "triangle",
    "diamond",
    "ring",
    "cross",
    "saltire",
    "hbars",
    "vbars",
    "frame",
)


@dataclass(frozen=True)
class Hardness:
    clutter_count: int = 0  # max distractor shapes per image
    occlusion_fraction: float = 0.0  # max fraction of the target shape hidden
    noise_std: float = 0.0  # max additive Gaussian sigma

    def validate(self) -> None:
        if self.clutter_count < 0:
            raise ConfigError(f"hardness.clutter_count must be >= 0, got {self.clutter_count}")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ConfigError(
                f"hardness.occlusion_fraction must be in [0, 1), got {self.occlusion_fraction}"
            )
        if self.noise_std < 0.0:
            raise ConfigError(f"hardness.noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class ShapesConfig:
    num_classes: int = 3
    samples_per_class: int = 500
    image_size: int = 32
    channels: int = 1
    hardness: Hardness = field(default_factory=Hardness)
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(SHAPE_NAMES):
            raise ConfigError(
                f"num_classes must be in [2, {len(SHAPE_NAMES)}], got {self.num_classes}"
            )
        if self.samples_per_class < 0:
            raise ConfigError(f"samples_per_class must be >= 0, got {self.samples_per_class}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        self.hardness.validate()

    @property
    def class_names(self) -> list[str]:
        return list(SHAPE_NAMES[: self.num_classes])


def _shape_mask(kind: str, size: int, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "circle":
        return dy**2 + dx**2 <= s**2
    if kind == "square":
        return np.maximum(ady, adx) <= s * 0.88
    if kind == "triangle":
        return (dy >= -s) & (dy <= s * 0.8) & (adx <= (dy + s) * 0.62)
    if kind == "diamond":
        return ady + adx <= s * 1.2
    if kind == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= s**2) & (r2 >= (0.55 * s) ** 2)
    if kind == "cross":
        return ((adx <= s / 3) & (ady <= s)) | ((ady <= s / 3) & (adx <= s))
    if kind == "saltire":
        bar = s * 0.42
        inside = np.maximum(ady, adx) <= s
        return inside & ((np.abs(dy - dx) <= bar) | (np.abs(dy + dx) <= bar))
    if kind == "hbars":
        return (adx <= s) & ((ady <= s) & (ady >= s / 3))
    if kind == "vbars":
        return (ady <= s) & ((adx <= s) & (adx >= s / 3))
    if kind == "frame":
        m = np.maximum(ady, adx)
        return (m <= s * 0.88) & (m >= s * 0.5)
    raise ValueError(f"unknown shape kind: {kind}")


def _paint(canvas: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    canvas[mask] = color


def _pick_color(rng: np.random.Generator, channels: int, lo: float, hi: float) -> np.ndarray:
    intensity = rng.uniform(lo, hi)
    if channels == 1:
        return np.array([intensity], dtype=np.float64)
    rgb = rng.uniform(0.35, 1.0, size=3)
    return intensity * rgb / rgb.max()


def _occlude(canvas: np.ndarray, target_mask: np.ndarray, fraction: float, rng: np.random.Generator) -> None:
    """Hide ~`fraction` of the target mask under a full-width/height bar."""
    total = int(target_mask.sum())
    if total == 0 or fraction <= 0.0:
        return
    axis = int(rng.integers(2))  # 0: horizontal bar over rows, 1: vertical over cols
    from_start = bool(rng.integers(2))
    per_line = target_mask.sum(axis=1 - axis)
    order = np.arange(per_line.size) if from_start else np.arange(per_line.size)[::-1]
    covered = np.cumsum(per_line[order])
    k = int(np.searchsorted(covered, fraction * total) + 1)
    lines = order[:k]
    color = _pick_color(rng, canvas.shape[2], 0.25, 0.55)
    if axis == 0:
        canvas[lines, :, :] = color
    else:
        canvas[:, lines, :] = color


def _render_sample(
    cfg: ShapesConfig, label: int, rng: np.random.Generator
) -> np.ndarray:
    size = cfg.image_size
    canvas = np.zeros((size, size, cfg.channels), dtype=np.float64)

    # target shape: large, roughly centered
    s = rng.uniform(0.28, 0.38) * size
    margin = s + 1.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    target_mask = _shape_mask(SHAPE_NAMES[label], size, cy, cx, s)
    _paint(canvas, target_mask, _pick_color(rng, cfg.channels, 0.75, 1.0))

    u = rng.uniform()  # shared hardness latent for this image

    n_clutter = int(np.rint(u * cfg.hardness.clutter_count))
    other = [k for k in range(cfg.num_classes) if k != label]
    for _ in range(n_clutter):
        kind = SHAPE_NAMES[other[rng.integers(len(other))]] if other else SHAPE_NAMES[label]
        ds = rng.uniform(0.13, 0.19) * size
        dcy = rng.uniform(ds, size - ds)
        dcx = rng.uniform(ds, size - ds)
        mask = _shape_mask(kind, size, dcy, dcx, ds)
        _paint(canvas, mask, _pick_color(rng, cfg.channels, 0.55, 0.95))

    _occlude(canvas, target_mask, u * cfg.hardness.occlusion_fraction, rng)

    sigma = u * cfg.hardness.noise_std
    if sigma > 0.0:
        canvas = canvas + rng.normal(0.0, sigma, size=canvas.shape)

    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def generate_shapes_dataset(
    cfg: ShapesConfig, split: str = "train"
) -> tuple[list[LabeledImage], DatasetManifest]:
    """Render the full dataset. A pure function of (cfg, split)."""
    cfg.validate()
    images: list[LabeledImage] = []
    for label in range(cfg.num_classes):
        name = SHAPE_NAMES[label]
        for i in range(cfg.samples_per_class):
            rng = rng_for(cfg.seed, "shapes", split, label, i)
            pixels = _render_sample(cfg, label, rng)
            images.append(LabeledImage(pixels=pixels, label=label, id=f"{split}-{name}-{i:05d}"))
    manifest = DatasetManifest(
        class_names=cfg.class_names,
        per_class_counts=[cfg.samples_per_class] * cfg.num_classes,
        image_shape=(cfg.image_size, cfg.image_size, cfg.channels),
        split=split,
    )
    return images, manifest
