"""Evaluation suite for difficulty-conditioned synthesis.

Covers: assessed-difficulty distributions of generated batches, the
easy/moderate/hard augmentation comparison, the (mu, sigma) synthesis-
strategy sweep, difficulty-only "hard factor" generation, and 2-D feature
projections of classifier embeddings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import DifficultyEncoder, PromptEmbedder
from .dataset import DatasetManifest, DifficultySample, LabeledImage
from .diffusion import NoiseSchedule
from .errors import DependencyError
from .kde import DensityCurve, kde
from .lora import AdapterSet
from .scorer import (
    ClassifierParams,
    ScorerTrainConfig,
    assess_difficulties,
    penultimate_features,
    split_by_difficulty,
    train_classifier,
)
from .seeds import derive_seed, rng_for
from .synthesis import SamplerSettings, SynthesisPlan, SynthesisResult, augment, synthesize_dataset
from .unet import ConditionalUNet


@dataclass
class ExperimentReport:
    name: str
    table: dict  # {"columns": [...], "rows": [[...], ...]} with numeric cells
    curves: list[DensityCurve] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.table.get("rows", []):
            for cell in row:
                if not np.isfinite(cell):
                    raise ValueError(f"non-finite cell in report {self.name!r}: {row}")

    def to_json(self, path: str | Path) -> None:
        doc = {
            "name": self.name,
            "table": self.table,
            "curves": [
                {"bandwidth": c.bandwidth, "points": c.to_rows()} for c in self.curves
            ],
            "artifacts": self.artifacts,
            "config": self.config,
            "summary": self.summary,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table_csv(self) -> str:
        lines = [",".join(str(c) for c in self.table["columns"])]
        for row in self.table["rows"]:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two same-length sequences of length >= 2")

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty_like(v)
        r[order] = np.arange(1, v.size + 1, dtype=float)
        for val in np.unique(v):
            mask = v == val
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def assess_generated(
    scorer: ClassifierParams, synthetic_set: Sequence[DifficultySample]
) -> ExperimentReport:
    """Re-score generated images with the frozen baseline classifier.

    Rows are grouped by the difficulty each batch was conditioned on; the
    overall mean and a KDE of all assessed scores land in the summary.
    """
    if not synthetic_set:
        raise ValueError("synthetic_set must be non-empty")
    assessed = assess_difficulties(scorer, synthetic_set)
    conditioned = np.array([s.difficulty for s in synthetic_set])
    levels = sorted(set(float(v) for v in conditioned))
    rows = []
    curves = []
    for level in levels:
        mask = conditioned == level
        vals = assessed[mask]
        rows.append([level, int(mask.sum()), float(vals.mean()), float(vals.std())])
        if vals.size >= 2 and vals.std() > 0:
            curves.append(kde(vals))
    curves.append(kde(assessed))
    return ExperimentReport(
        name="assess_generated",
        table={"columns": ["conditioned_difficulty", "count", "assessed_mean", "assessed_std"], "rows": rows},
        curves=curves,
        summary={
            "overall_mean": float(assessed.mean()),
            "overall_std": float(assessed.std()),
            "n": int(assessed.size),
        },
    )


def _train_arm_accuracy(
    train_samples: Sequence[DifficultySample | LabeledImage],
    test_set: Sequence[LabeledImage | DifficultySample],
    cfg: ScorerTrainConfig,
    num_classes: int,
) -> float:
    _, report = train_classifier(train_samples, cfg, num_classes=num_classes, val_set=test_set)
    return float(report["heldout_accuracy"])


def dilemma_experiment(
    real_set: Sequence[DifficultySample | LabeledImage],
    real_manifest: DatasetManifest,
    synthetic_pool: Sequence[DifficultySample],
    scorer: ClassifierParams,
    test_set: Sequence[LabeledImage | DifficultySample],
    classifier_cfg: ScorerTrainConfig,
    thresholds: tuple[float, float] = (0.1, 0.5),
    budget: int | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> ExperimentReport:
    """Train one classifier per arm {real-only, +easy, +moderate, +hard}.

    The synthetic pool is re-scored by the frozen baseline and split at the
    given thresholds; every synthetic arm adds the same budget of images
    (default 25% of the real set). Arms within a seed share identical real
    data, seed, and training config.
    """
    if budget is None:
        budget = int(round(0.25 * len(real_set)))
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    assessed = assess_difficulties(scorer, synthetic_pool)
    rescored = [replace(s, difficulty=float(d)) for s, d in zip(synthetic_pool, assessed)]
    bins = dict(zip(("easy", "moderate", "hard"), split_by_difficulty(rescored, thresholds)))
    for bin_name, members in bins.items():
        if len(members) < budget:
            raise DependencyError(
                f"synthetic pool bin '{bin_name}' holds {len(members)} images, "
                f"needs {budget}; generate a larger pool"
            )
    k = real_manifest.num_classes
    arm_names = ["real_only", "easy", "moderate", "hard"]
    rows = []
    per_arm: dict[str, list[float]] = {a: [] for a in arm_names}
    for seed in seeds:
        cfg = replace(classifier_cfg, seed=int(seed))
        row = [float(seed)]
        for arm in arm_names:
            if arm == "real_only" or budget == 0:
                train_samples = list(real_set)
            else:
                perm = rng_for(seed, "dilemma-subset", arm).permutation(len(bins[arm]))
                train_samples = list(real_set) + [bins[arm][i] for i in perm[:budget]]
            acc = _train_arm_accuracy(train_samples, test_set, cfg, k)
            per_arm[arm].append(acc)
            row.append(acc)
        rows.append(row)
    mean_row = [-1.0] + [float(np.mean(per_arm[a])) for a in arm_names]
    rows.append(mean_row)
    config_digest = hashlib.sha256(
        json.dumps(
            {
                "classifier_cfg": classifier_cfg.__dict__,
                "thresholds": list(thresholds),
                "budget": budget,
                "real_ids": [getattr(s, "image", s).id for s in real_set],
            },
            sort_keys=True,
        ).encode("utf-8")
    ).hexdigest()
    return ExperimentReport(
        name="dilemma",
        table={"columns": ["seed"] + arm_names, "rows": rows},
        config={
            "thresholds": list(thresholds),
            "budget": budget,
            "seeds": [int(s) for s in seeds],
            "bin_sizes": {k_: len(v) for k_, v in bins.items()},
            "arm_config_digest": config_digest,
            "mean_row_seed": -1,
        },
        summary={
            "mean": {a: float(np.mean(per_arm[a])) for a in arm_names},
            "sd": {a: float(np.std(per_arm[a])) for a in arm_names},
        },
    )


@dataclass
class SynthesisPipeline:
    """Everything needed to synthesize, augment, and retrain at one grid point."""

    model: ConditionalUNet
    adapters: AdapterSet | None
    encoder: DifficultyEncoder
    embedder: PromptEmbedder
    schedule: NoiseSchedule
    class_names: list[str]
    prompts: tuple[tuple[int, ...], ...]
    real_set: list[DifficultySample | LabeledImage]
    real_manifest: DatasetManifest
    test_set: list[LabeledImage | DifficultySample]
    classifier_cfg: ScorerTrainConfig
    per_class_counts: tuple[int, ...]
    settings: SamplerSettings = SamplerSettings()
    seed: int = 0

    def run_point(self, mu: float, sigma: float, tag: str) -> float:
        plan = SynthesisPlan(
            per_class_counts=self.per_class_counts,
            mu=mu,
            sigma=sigma,
            prompts=self.prompts,
            seed=derive_seed(self.seed, "ablation", tag),
        )
        result = synthesize_dataset(
            self.model, self.adapters, self.encoder, self.embedder, plan,
            self.schedule, self.class_names, self.settings, id_prefix=f"abl-{tag}",
        )
        combined, _ = augment(self.real_set, self.real_manifest, result.samples, result.manifest)
        return _train_arm_accuracy(
            combined, self.test_set, self.classifier_cfg, len(self.class_names)
        )


def ablation_sweep(
    mu_list: Sequence[float],
    sigma_list: Sequence[float],
    pipeline: SynthesisPipeline,
    sigma_fixed: float = 0.1,
    mu_fixed: float = 0.5,
) -> ExperimentReport:
    """Accuracy sweep over the difficulty-distribution grid, one block per axis."""
    if not mu_list or not sigma_list:
        raise ValueError("mu_list and sigma_list must be non-empty")
    rows = []
    for i, mu in enumerate(mu_list):
        acc = pipeline.run_point(float(mu), sigma_fixed, f"mu{i}")
        rows.append([0.0, float(mu), sigma_fixed, acc])
    for i, sigma in enumerate(sigma_list):
        acc = pipeline.run_point(mu_fixed, float(sigma), f"sigma{i}")
        rows.append([1.0, mu_fixed, float(sigma), acc])
    return ExperimentReport(
        name="ablation",
        table={"columns": ["block", "mu", "sigma", "accuracy"], "rows": rows},
        config={
            "blocks": [
                {"axis": "mu", "values": [float(m) for m in mu_list], "sigma": sigma_fixed},
                {"axis": "sigma", "values": [float(s) for s in sigma_list], "mu": mu_fixed},
            ],
            "seed": pipeline.seed,
        },
    )


def distribution_experiment(
    model: ConditionalUNet,
    adapters: AdapterSet | None,
    encoder: DifficultyEncoder,
    embedder: PromptEmbedder,
    scorer: ClassifierParams,
    schedule: NoiseSchedule,
    class_names: Sequence[str],
    prompts: tuple[tuple[int, ...], ...],
    levels: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9),
    per_level: int = 64,
    settings: SamplerSettings = SamplerSettings(),
    seed: int = 0,
) -> tuple[ExperimentReport, list[SynthesisResult]]:
    """Generate a batch per conditioned level and re-score it.

    Images at each level spread across classes as evenly as possible.
    """
    k = len(class_names)
    base, extra = divmod(per_level, k)
    counts = tuple(base + (1 if i < extra else 0) for i in range(k))
    rows = []
    curves = []
    results = []
    means = []
    for li, level in enumerate(levels):
        plan = SynthesisPlan(
            per_class_counts=counts, mu=float(level), sigma=0.0, prompts=prompts,
            seed=derive_seed(seed, "distribution", li),
        )
        result = synthesize_dataset(
            model, adapters, encoder, embedder, plan, schedule, class_names,
            settings, id_prefix=f"dist-{li}",
        )
        assessed = assess_difficulties(scorer, result.samples)
        rows.append([float(level), len(result.samples), float(assessed.mean()), float(assessed.std())])
        means.append(float(assessed.mean()))
        if assessed.std() > 0:
            curves.append(kde(assessed))
        results.append(result)
    summary = {
        "levels": [float(v) for v in levels],
        "assessed_means": means,
        "spearman_conditioned_vs_assessed": spearman_rho(list(levels), means) if len(levels) >= 2 else 1.0,
        "strictly_increasing": bool(all(a < b for a, b in zip(means, means[1:]))),
    }
    report = ExperimentReport(
        name="distribution",
        table={"columns": ["conditioned_difficulty", "count", "assessed_mean", "assessed_std"], "rows": rows},
        curves=curves,
        config={"per_level": per_level, "seed": seed, "settings": settings.to_dict()},
        summary=summary,
    )
    return report, results


def hard_factor_generation(
    model: ConditionalUNet,
    adapters: AdapterSet | None,
    encoder: DifficultyEncoder,
    embedder: PromptEmbedder,
    scorer: ClassifierParams,
    schedule: NoiseSchedule,
    class_names: Sequence[str],
    class_index: int,
    d_levels: Sequence[float] = (0.1, 0.5, 0.9),
    samples_per_level: int = 8,
    settings: SamplerSettings = SamplerSettings(),
    seed: int = 0,
) -> tuple[np.ndarray, ExperimentReport, list[SynthesisResult]]:
    """Generate from difficulty-only conditions to surface what "hard" looks like.

    Returns a levels x samples montage, a per-image report, and the raw
    synthesis results (whose sidecars carry provenance `difficulty_only`).
    """
    k = len(class_names)
    if not 0 <= class_index < k:
        raise ValueError(f"class_index {class_index} out of range for K={k}")
    rows = []
    results = []
    tiles = []
    for li, level in enumerate(d_levels):
        counts = tuple(samples_per_level if i == class_index else 0 for i in range(k))
        plan = SynthesisPlan(
            per_class_counts=counts, mu=float(level), sigma=0.0, prompts=(),
            seed=derive_seed(seed, "hard-factor", li), difficulty_only=True,
        )
        result = synthesize_dataset(
            model, adapters, encoder, embedder, plan, schedule, class_names,
            settings, id_prefix=f"hf-{li}",
        )
        assessed = assess_difficulties(scorer, result.samples)
        for j, d in enumerate(assessed):
            rows.append([float(level), float(j), float(d)])
        tiles.append([s.image.pixels for s in result.samples])
        results.append(result)
    grid = build_montage(tiles)
    report = ExperimentReport(
        name="hard_factors",
        table={"columns": ["conditioned_difficulty", "image_index", "assessed_difficulty"], "rows": rows},
        config={
            "class": class_names[class_index],
            "d_levels": [float(v) for v in d_levels],
            "samples_per_level": samples_per_level,
            "provenance": "difficulty_only",
            "seed": seed,
        },
    )
    return grid, report, results


def build_montage(tile_rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Stack image tiles into one grid image with 1-pixel separators."""
    if not tile_rows or not tile_rows[0]:
        raise ValueError("montage needs at least one tile")
    h, w, c = tile_rows[0][0].shape
    n_cols = max(len(r) for r in tile_rows)
    grid = np.ones(
        (len(tile_rows) * (h + pad) - pad, n_cols * (w + pad) - pad, c), dtype=np.float32
    ) * 0.5
    for r, row in enumerate(tile_rows):
        for col, tile in enumerate(row):
            grid[r * (h + pad) : r * (h + pad) + h, col * (w + pad) : col * (w + pad) + w] = tile
    return grid


def pca_top2(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project centered feature rows onto their top-2 principal axes.

    Returns (coords (n, 2), components (2, F)). Component signs are fixed so
    the largest-magnitude loading is positive.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 3:
        raise ValueError("need at least 3 feature rows")
    centered = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for i in range(components.shape[0]):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    coords = centered @ components.T
    return coords, components


def feature_projection(
    images: Sequence[LabeledImage | DifficultySample], classifier: ClassifierParams
) -> np.ndarray:
    """2-D coordinates per image from PCA of penultimate classifier features."""
    if len(images) < 3:
        raise ValueError(f"need at least 3 images, got {len(images)}")
    feats = penultimate_features(classifier, images)
    coords, _ = pca_top2(feats)
    return coords
