"""Dataset records and on-disk (de)serialization.

Directory layout: ``manifest.json`` + ``meta.jsonl`` + ``images/<id>.png``.
Pixels are quantized to 8 bits in the PNGs; everything else round-trips
losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import IntegrityError

SPLITS = ("train", "test", "synthetic")


@dataclass
class LabeledImage:
    """One image with its class index and a dataset-unique id."""

    pixels: np.ndarray  # H x W x C float32 in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")
        if self.label < 0:
            raise ValueError(f"negative label: {self.label}")


@dataclass
class DifficultySample:
    """A labeled image annotated with assessed difficulty and prompt tokens.

    ``origin`` tracks whether the sample is real data or was synthesized,
    so augmented datasets stay auditable after save/load.
    """

    image: LabeledImage
    difficulty: float
    prompt: tuple[int, ...]
    origin: str = "real"

    def __post_init__(self):
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty outside [0, 1]: {self.difficulty}")
        self.prompt = tuple(int(t) for t in self.prompt)
        if len(self.prompt) == 0:
            raise ValueError("prompt must be non-empty")
        if self.origin not in ("real", "synthetic"):
            raise ValueError(f"unknown origin: {self.origin!r}")


@dataclass
class DatasetManifest:
    class_names: list[str]
    per_class_counts: list[int]
    image_shape: tuple[int, int, int]
    split: str

    def __post_init__(self):
        self.class_names = list(self.class_names)
        self.per_class_counts = [int(c) for c in self.per_class_counts]
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if len(self.class_names) < 2:
            raise ValueError("manifest needs at least 2 classes")
        if len(self.per_class_counts) != len(self.class_names):
            raise ValueError("per_class_counts length must match class_names")
        if any(c < 0 for c in self.per_class_counts):
            raise ValueError("per_class_counts must be non-negative")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return sum(self.per_class_counts)


def image_of(sample: LabeledImage | DifficultySample) -> LabeledImage:
    return sample.image if isinstance(sample, DifficultySample) else sample


def images_of(samples: Sequence[LabeledImage | DifficultySample]) -> list[LabeledImage]:
    return [image_of(s) for s in samples]


def _pixels_to_png(pixels: np.ndarray) -> Image.Image:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        return Image.fromarray(arr[:, :, 0], mode="L")
    if arr.shape[2] == 3:
        return Image.fromarray(arr, mode="RGB")
    raise ValueError(f"unsupported channel count: {arr.shape[2]}")


def _png_to_pixels(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_dataset(
    samples: Sequence[LabeledImage | DifficultySample],
    manifest: DatasetManifest,
    dir_path: str | Path,
) -> None:
    """Write manifest.json, meta.jsonl and one PNG per sample under `dir_path`."""
    if len(samples) != manifest.total:
        raise IntegrityError(
            f"manifest counts {manifest.total} samples, got {len(samples)}"
        )
    root = Path(dir_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_doc = {
        "class_names": manifest.class_names,
        "per_class_counts": manifest.per_class_counts,
        "image_shape": list(manifest.image_shape),
        "split": manifest.split,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    lines = []
    seen_ids: set[str] = set()
    for sample in samples:
        img = image_of(sample)
        if img.id in seen_ids:
            raise IntegrityError(f"duplicate sample id: {img.id}")
        seen_ids.add(img.id)
        row: dict = {"id": img.id, "label": int(img.label)}
        if isinstance(sample, DifficultySample):
            row["difficulty"] = sample.difficulty
            row["prompt"] = list(sample.prompt)
            row["origin"] = sample.origin
        else:
            row["difficulty"] = None
            row["prompt"] = None
            row["origin"] = None
        lines.append(json.dumps(row, sort_keys=True))
        _pixels_to_png(img.pixels).save(root / "images" / f"{img.id}.png")
    (root / "meta.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )


def load_dataset(
    dir_path: str | Path,
) -> tuple[list[LabeledImage] | list[DifficultySample], DatasetManifest]:
    """Inverse of `save_dataset`.

    Returns `DifficultySample`s when every row carries difficulty and prompt,
    plain `LabeledImage`s otherwise.
    """
    root = Path(dir_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise IntegrityError(f"missing manifest: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = DatasetManifest(
            class_names=doc["class_names"],
            per_class_counts=doc["per_class_counts"],
            image_shape=tuple(doc["image_shape"]),
            split=doc["split"],
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"corrupt manifest {manifest_path}: {exc}") from exc

    meta_path = root / "meta.jsonl"
    if not meta_path.is_file():
        raise IntegrityError(f"missing metadata: {meta_path}")
    rows = [json.loads(line) for line in meta_path.read_text(encoding="utf-8").splitlines() if line]
    if len(rows) != manifest.total:
        raise IntegrityError(
            f"manifest counts {manifest.total} samples but meta.jsonl has {len(rows)}"
        )

    h, w, c = manifest.image_shape
    annotated = all(r.get("difficulty") is not None and r.get("prompt") for r in rows)
    images: list[LabeledImage] = []
    samples: list[DifficultySample] = []
    counts = [0] * manifest.num_classes
    for row in rows:
        png_path = root / "images" / f"{row['id']}.png"
        if not png_path.is_file():
            raise IntegrityError(f"missing image file: {png_path}")
        pixels = _png_to_pixels(png_path, c)
        if pixels.shape != (h, w, c):
            raise IntegrityError(
                f"image {row['id']} has shape {pixels.shape}, manifest says {(h, w, c)}"
            )
        label = int(row["label"])
        if label >= manifest.num_classes:
            raise IntegrityError(f"label {label} out of range for K={manifest.num_classes}")
        counts[label] += 1
        img = LabeledImage(pixels=pixels, label=label, id=row["id"])
        if annotated:
            samples.append(
                DifficultySample(
                    image=img,
                    difficulty=float(row["difficulty"]),
                    prompt=tuple(row["prompt"]),
                    origin=row.get("origin") or "real",
                )
            )
        else:
            images.append(img)
    if counts != manifest.per_class_counts:
        raise IntegrityError(
            f"per-class counts {counts} disagree with manifest {manifest.per_class_counts}"
        )
    return (samples if annotated else images), manifest


def relabel_split(manifest: DatasetManifest, split: str) -> DatasetManifest:
    return replace(manifest, split=split)
