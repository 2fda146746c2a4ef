"""Difficulty-targeted dataset synthesis and dataset augmentation.

A synthesis plan fixes per-class counts and a Gaussian over difficulty;
each generated image records the difficulty it was conditioned on, the
class label it was requested for, and the full sampling configuration in a
JSONL sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .conditioning import (
    DifficultyEncoder,
    PromptEmbedder,
    build_condition,
    build_condition_difficulty_only,
    embed_prompt,
)
from .dataset import DatasetManifest, DifficultySample, LabeledImage
from .diffusion import NoiseSchedule
from .errors import ConfigError
from .lora import AdapterSet
from .sampler import SampleRequest, sample
from .seeds import derive_seed, rng_for
from .unet import ConditionalUNet

DIFFICULTY_CLAMP = (0.01, 0.99)


def sample_difficulty(mu: float, sigma: float, rng: np.random.Generator) -> float:
    """One Gaussian difficulty draw, clamped into [0.01, 0.99]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    lo, hi = DIFFICULTY_CLAMP
    return float(np.clip(rng.normal(mu, sigma), lo, hi))


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 30
    guidance: float = 2.0
    method: str = "ddim"
    eta: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SynthesisPlan:
    per_class_counts: tuple[int, ...]
    mu: float = 0.5
    sigma: float = 0.1
    prompts: tuple[tuple[int, ...], ...] = ()
    seed: int = 0
    difficulty_only: bool = False

    def validate(self, num_classes: int) -> None:
        if len(self.per_class_counts) != num_classes:
            raise ConfigError(
                f"plan has {len(self.per_class_counts)} class counts, expected {num_classes}"
            )
        if any(c < 0 for c in self.per_class_counts):
            raise ConfigError("per_class_counts must be non-negative")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not self.difficulty_only and len(self.prompts) != num_classes:
            raise ConfigError(
                f"plan has {len(self.prompts)} prompts, expected one per class"
            )


@dataclass
class SynthesisResult:
    samples: list[DifficultySample]
    manifest: DatasetManifest
    sidecar: list[dict] = field(default_factory=list)

    def save_sidecar(self, path: str | Path) -> None:
        Path(path).write_text(
            "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.sidecar),
            encoding="utf-8",
        )


def synthesize_dataset(
    model: ConditionalUNet,
    adapters: AdapterSet | None,
    encoder: DifficultyEncoder,
    embedder: PromptEmbedder,
    plan: SynthesisPlan,
    schedule: NoiseSchedule,
    class_names: Sequence[str],
    settings: SamplerSettings = SamplerSettings(),
    id_prefix: str = "syn",
) -> SynthesisResult:
    """Generate plan.per_class_counts[y] images per class at drawn difficulties."""
    plan.validate(len(class_names))
    if encoder.num_classes != len(class_names):
        raise ConfigError(
            f"encoder trained for K={encoder.num_classes}, got {len(class_names)} classes"
        )
    if encoder.dim != model.cond_dim or embedder.dim != model.cond_dim:
        raise ConfigError(
            f"condition widths disagree: encoder {encoder.dim}, embedder {embedder.dim}, "
            f"model {model.cond_dim}"
        )
    rng_d = rng_for(plan.seed, "difficulty-draws")
    samples: list[DifficultySample] = []
    sidecar: list[dict] = []
    counts = [0] * len(class_names)
    index = 0
    for label, count in enumerate(plan.per_class_counts):
        prompt = tuple(plan.prompts[label]) if not plan.difficulty_only else ()
        for _ in range(count):
            d = sample_difficulty(plan.mu, plan.sigma, rng_d)
            with torch.inference_mode():
                diff_block = encoder(
                    torch.tensor([d], dtype=torch.float32), torch.tensor([label])
                )[0].numpy()
            if plan.difficulty_only:
                condition = build_condition_difficulty_only(diff_block)
            else:
                condition = build_condition(embed_prompt(embedder, prompt), diff_block)
            seed = derive_seed(plan.seed, "request", index)
            request = SampleRequest(
                condition=condition,
                steps=settings.steps,
                guidance=settings.guidance,
                method=settings.method,
                eta=settings.eta,
                seed=seed,
            )
            pixels = sample(model, adapters, request, schedule)
            sample_id = f"{id_prefix}-{class_names[label]}-{index:05d}"
            image = LabeledImage(pixels=pixels, label=label, id=sample_id)
            samples.append(
                DifficultySample(
                    image=image,
                    difficulty=d,
                    prompt=tuple(prompt) if prompt else (0,),
                    origin="synthetic",
                )
            )
            sidecar.append(
                {
                    "id": sample_id,
                    "class": class_names[label],
                    "prompt": embedder.vocab.decode(prompt) if prompt else "",
                    "provenance": condition.provenance,
                    "conditioned_difficulty": d,
                    "seed": seed,
                    "steps": settings.steps,
                    "guidance": settings.guidance,
                    "method": settings.method,
                }
            )
            counts[label] += 1
            index += 1
    manifest = DatasetManifest(
        class_names=list(class_names),
        per_class_counts=counts,
        image_shape=(model.image_size, model.image_size, model.channels),
        split="synthetic",
    )
    return SynthesisResult(samples=samples, manifest=manifest, sidecar=sidecar)


def synthesize_text_only(
    model: ConditionalUNet,
    adapters: AdapterSet | None,
    embedder: PromptEmbedder,
    per_class_counts: Sequence[int],
    prompts: Sequence[Sequence[int]],
    schedule: NoiseSchedule,
    class_names: Sequence[str],
    settings: SamplerSettings = SamplerSettings(),
    seed: int = 0,
    id_prefix: str = "txt",
) -> SynthesisResult:
    """Generate from prompt-only conditions: the no-difficulty-control baseline."""
    if len(per_class_counts) != len(class_names) or len(prompts) != len(class_names):
        raise ConfigError("per_class_counts and prompts must match class_names")
    samples: list[DifficultySample] = []
    sidecar: list[dict] = []
    counts = [0] * len(class_names)
    index = 0
    for label, count in enumerate(per_class_counts):
        prompt = tuple(prompts[label])
        prompt_emb = embed_prompt(embedder, prompt)
        condition = build_condition(prompt_emb, np.zeros((0, embedder.dim), dtype=np.float32))
        for _ in range(count):
            request_seed = derive_seed(seed, "text-only", index)
            request = SampleRequest(
                condition=condition,
                steps=settings.steps,
                guidance=settings.guidance,
                method=settings.method,
                eta=settings.eta,
                seed=request_seed,
            )
            pixels = sample(model, adapters, request, schedule)
            sample_id = f"{id_prefix}-{class_names[label]}-{index:05d}"
            image = LabeledImage(pixels=pixels, label=label, id=sample_id)
            # difficulty field is a placeholder; the baseline conditions on none
            samples.append(
                DifficultySample(image=image, difficulty=0.0, prompt=prompt, origin="synthetic")
            )
            sidecar.append(
                {
                    "id": sample_id,
                    "class": class_names[label],
                    "prompt": embedder.vocab.decode(prompt),
                    "provenance": condition.provenance,
                    "conditioned_difficulty": None,
                    "seed": request_seed,
                    "steps": settings.steps,
                    "guidance": settings.guidance,
                    "method": settings.method,
                }
            )
            counts[label] += 1
            index += 1
    manifest = DatasetManifest(
        class_names=list(class_names),
        per_class_counts=counts,
        image_shape=(model.image_size, model.image_size, model.channels),
        split="synthetic",
    )
    return SynthesisResult(samples=samples, manifest=manifest, sidecar=sidecar)


def augment(
    real_samples: Sequence[DifficultySample | LabeledImage],
    real_manifest: DatasetManifest,
    synthetic_samples: Sequence[DifficultySample],
    synthetic_manifest: DatasetManifest,
) -> tuple[list[DifficultySample | LabeledImage], DatasetManifest]:
    """Concatenate real and synthetic sets; per-sample origin flags survive."""
    if real_manifest.class_names != synthetic_manifest.class_names:
        raise ValueError(
            f"class sets differ: {real_manifest.class_names} vs {synthetic_manifest.class_names}"
        )
    if real_manifest.image_shape != synthetic_manifest.image_shape:
        raise ValueError(
            f"image shapes differ: {real_manifest.image_shape} vs {synthetic_manifest.image_shape}"
        )
    combined = list(real_samples) + list(synthetic_samples)
    counts = [a + b for a, b in zip(real_manifest.per_class_counts, synthetic_manifest.per_class_counts)]
    manifest = DatasetManifest(
        class_names=real_manifest.class_names,
        per_class_counts=counts,
        image_shape=real_manifest.image_shape,
        split=real_manifest.split,
    )
    return combined, manifest
