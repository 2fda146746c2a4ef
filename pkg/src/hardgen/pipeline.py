"""Stage orchestration over a run directory.

Each stage reads its upstream artifacts from the run directory, writes its
outputs back under fixed names, and persists the resolved configuration.
Stages are pure functions of (config, upstream artifacts), so re-running a
stage reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import (
    DifficultyEncoder,
    PromptEmbedder,
    Vocabulary,
    create_difficulty_encoder,
)
from .config import RunConfig
from .dataset import (
    DatasetManifest,
    DifficultySample,
    load_dataset,
    save_dataset,
)
from .diffusion import (
    NoiseSchedule,
    TrainConfig,
    finetune_with_difficulty,
    pretrain_base,
)
from .errors import ConfigError, DependencyError
from .experiments import (
    ExperimentReport,
    SynthesisPipeline,
    ablation_sweep,
    build_montage,
    dilemma_experiment,
    distribution_experiment,
    feature_projection,
    hard_factor_generation,
)
from .kde import kde
from .lora import AdapterSet, create_adapters
from .scorer import ClassifierParams, ScorerTrainConfig, train_classifier, annotate_dataset
from .seeds import derive_seed
from .shapes import Hardness, ShapesConfig, generate_shapes_dataset
from .synthesis import (
    SamplerSettings,
    SynthesisPlan,
    synthesize_dataset,
    synthesize_text_only,
)
from .unet import ConditionalUNet

EXPERIMENT_KINDS = ("dilemma", "ablation", "distribution", "hard-factors", "projection")


class RunPaths:
    def __init__(self, run_dir: str | Path):
        self.root = Path(run_dir)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def datasets(self) -> Path:
        return self.root / "datasets"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def resolved_config(self) -> Path:
        return self.root / "resolved_config.json"

    def ensure(self) -> "RunPaths":
        for sub in (self.checkpoints, self.datasets, self.reports, self.images):
            sub.mkdir(parents=True, exist_ok=True)
        return self

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing artifact {path}; run `{producer}` first")
        return path


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_png(path: Path, pixels: np.ndarray) -> None:
    from .dataset import _pixels_to_png

    _pixels_to_png(pixels).save(path)


def _persist_config(cfg: RunConfig, paths: RunPaths) -> None:
    cfg.save(paths.resolved_config)


def shapes_config(cfg: RunConfig, split: str) -> ShapesConfig:
    d = cfg.dataset
    return ShapesConfig(
        num_classes=d.num_classes,
        samples_per_class=d.samples_per_class if split == "train" else d.test_samples_per_class,
        image_size=d.image_size,
        channels=d.channels,
        hardness=Hardness(
            clutter_count=d.clutter_count,
            occlusion_fraction=d.occlusion_fraction,
            noise_std=d.noise_std,
        ),
        seed=derive_seed(cfg.seed, f"dataset-{split}"),
    )


def noise_schedule(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return NoiseSchedule.linear(d.timesteps, d.beta_start, d.beta_end)


def sampler_settings(cfg: RunConfig) -> SamplerSettings:
    s = cfg.sampler
    return SamplerSettings(steps=s.steps, guidance=s.guidance, method=s.method, eta=s.eta)


def scorer_train_config(cfg: RunConfig, seed: int | None = None) -> ScorerTrainConfig:
    s = cfg.scorer
    return ScorerTrainConfig(
        epochs=s.epochs,
        batch_size=s.batch_size,
        learning_rate=s.learning_rate,
        weight_decay=s.weight_decay,
        label_smoothing=s.label_smoothing,
        aug_noise_std=s.aug_noise_std,
        width=s.width,
        feature_dim=s.feature_dim,
        val_fraction=s.val_fraction,
        seed=derive_seed(cfg.seed, "scorer") if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# stages


def stage_dataset(cfg: RunConfig, paths: RunPaths) -> dict:
    paths.ensure()
    _persist_config(cfg, paths)
    out = {}
    for split in ("train", "test"):
        images, manifest = generate_shapes_dataset(shapes_config(cfg, split), split=split)
        save_dataset(images, manifest, paths.datasets / split)
        out[split] = len(images)
    return out


def stage_score(cfg: RunConfig, paths: RunPaths) -> dict:
    paths.ensure()
    _persist_config(cfg, paths)
    train_images, train_manifest = load_dataset(
        paths.require(paths.datasets / "train", "hardgen dataset")
    )
    test_images, _ = load_dataset(paths.require(paths.datasets / "test", "hardgen dataset"))

    classifier, report = train_classifier(
        train_images, scorer_train_config(cfg), num_classes=train_manifest.num_classes,
        val_set=test_images,
    )
    classifier.save(paths.checkpoints / "classifier.ckpt")
    write_csv(paths.reports / "scorer_loss.csv", ("step", "loss"), report["loss_curve"])

    vocab = Vocabulary.build(train_manifest.class_names)
    vocab.save(paths.checkpoints / "vocab.json")
    annotated = annotate_dataset(classifier, train_images, train_manifest.class_names, vocab)
    save_dataset(annotated, train_manifest, paths.datasets / "train_annotated")

    difficulties = [s.difficulty for s in annotated]
    write_csv(
        paths.reports / "difficulty_train.csv",
        ("sample_id", "label", "difficulty"),
        [(s.image.id, s.image.label, s.difficulty) for s in annotated],
    )
    curve = kde(difficulties, bandwidth=cfg.scorer.kde_bandwidth)
    write_csv(paths.reports / "difficulty_kde.csv", ("x", "density"), curve.to_rows())
    summary = {
        "final_train_loss": report["final_train_loss"],
        "heldout_accuracy": report["heldout_accuracy"],
        "num_classes": train_manifest.num_classes,
        "difficulty_mean": float(np.mean(difficulties)),
        "difficulty_quartiles": [float(q) for q in np.percentile(difficulties, [25, 50, 75])],
    }
    write_json(paths.reports / "scorer.json", summary)
    return summary


def stage_pretrain(cfg: RunConfig, paths: RunPaths) -> dict:
    paths.ensure()
    _persist_config(cfg, paths)
    annotated, manifest = load_dataset(
        paths.require(paths.datasets / "train_annotated", "hardgen score")
    )
    vocab = Vocabulary.load(paths.require(paths.checkpoints / "vocab.json", "hardgen score"))
    embedder = PromptEmbedder.create(
        vocab,
        dim=cfg.conditioning.cond_dim,
        max_len=cfg.conditioning.max_len,
        seed=derive_seed(cfg.seed, "embedder"),
    )
    embedder.save(paths.checkpoints / "embedder.ckpt")

    prompts = [vocab.encode(f"photo of {name}") for name in manifest.class_names]
    d = cfg.diffusion
    train_cfg = TrainConfig(
        steps=d.pretrain.steps,
        batch_size=d.pretrain.batch_size,
        learning_rate=d.pretrain.learning_rate,
        p_uncond=d.pretrain.p_uncond,
        seed=derive_seed(cfg.seed, "pretrain"),
    )
    arch = {
        "image_size": manifest.image_shape[0],
        "channels": manifest.image_shape[2],
        "cond_dim": cfg.conditioning.cond_dim,
        "widths": d.widths,
        "time_dim": d.time_dim,
    }
    model, report = pretrain_base(annotated, prompts, embedder, noise_schedule(cfg), train_cfg, arch)
    model.save(paths.checkpoints / "base.ckpt")
    write_csv(paths.reports / "pretrain_loss.csv", ("step", "loss"), report.loss_curve)
    summary = {
        "steps": train_cfg.steps,
        "first_loss": report.first_loss,
        "final_loss": report.final_loss,
        "mean_first_50": report.mean_loss(first_n=50),
        "mean_last_50": report.mean_loss(last_n=50),
    }
    write_json(paths.reports / "pretrain.json", summary)
    return summary


def stage_finetune(cfg: RunConfig, paths: RunPaths) -> dict:
    paths.ensure()
    _persist_config(cfg, paths)
    annotated, manifest = load_dataset(
        paths.require(paths.datasets / "train_annotated", "hardgen score")
    )
    model = ConditionalUNet.load(paths.require(paths.checkpoints / "base.ckpt", "hardgen pretrain"))
    embedder = PromptEmbedder.load(
        paths.require(paths.checkpoints / "embedder.ckpt", "hardgen pretrain")
    )
    d = cfg.diffusion
    adapters = create_adapters(model, rank=d.lora_rank, alpha=d.lora_alpha,
                               seed=derive_seed(cfg.seed, "lora"))
    encoder = create_difficulty_encoder(
        manifest.num_classes,
        heads=cfg.conditioning.heads,
        dim=cfg.conditioning.cond_dim,
        hidden_sizes=cfg.conditioning.hidden_sizes,
        seed=derive_seed(cfg.seed, "encoder"),
    )
    train_cfg = TrainConfig(
        steps=d.finetune.steps,
        batch_size=d.finetune.batch_size,
        learning_rate=d.finetune.learning_rate,
        p_uncond=d.finetune.p_uncond,
        seed=derive_seed(cfg.seed, "finetune"),
    )
    adapters, encoder, report = finetune_with_difficulty(
        annotated, model, adapters, encoder, embedder, noise_schedule(cfg), train_cfg
    )
    adapters.save(paths.checkpoints / "adapters.ckpt")
    encoder.save(paths.checkpoints / "difficulty_encoder.ckpt")
    write_csv(paths.reports / "finetune_loss.csv", ("step", "loss"), report.loss_curve)
    summary = {
        "steps": train_cfg.steps,
        "first_loss": report.first_loss,
        "final_loss": report.final_loss,
        "mean_first_50": report.mean_loss(first_n=50),
        "mean_last_50": report.mean_loss(last_n=50),
    }
    write_json(paths.reports / "finetune.json", summary)
    return summary


def _load_generation_stack(
    cfg: RunConfig, paths: RunPaths
) -> tuple[ConditionalUNet, AdapterSet, DifficultyEncoder, PromptEmbedder, DatasetManifest]:
    model = ConditionalUNet.load(paths.require(paths.checkpoints / "base.ckpt", "hardgen pretrain"))
    adapters = AdapterSet.load(paths.require(paths.checkpoints / "adapters.ckpt", "hardgen finetune"))
    encoder = DifficultyEncoder.load(
        paths.require(paths.checkpoints / "difficulty_encoder.ckpt", "hardgen finetune")
    )
    embedder = PromptEmbedder.load(
        paths.require(paths.checkpoints / "embedder.ckpt", "hardgen pretrain")
    )
    _, manifest = load_dataset(paths.require(paths.datasets / "train", "hardgen dataset"))
    return model, adapters, encoder, embedder, manifest


def class_prompts(vocab: Vocabulary, class_names: Sequence[str]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(vocab.encode(f"photo of {name}")) for name in class_names)


def stage_generate(
    cfg: RunConfig,
    paths: RunPaths,
    mu: float | None = None,
    sigma: float | None = None,
    count: int | None = None,
    class_index: int | None = None,
    difficulty_only: bool | None = None,
    tag: str = "synthetic",
) -> dict:
    """Difficulty-conditioned synthesis into datasets/<tag>; flags override config."""
    paths.ensure()
    syn = cfg.synthesis
    mu = syn.mu if mu is None else mu
    sigma = syn.sigma if sigma is None else sigma
    difficulty_only = syn.difficulty_only if difficulty_only is None else difficulty_only
    cfg = replace(cfg, synthesis=replace(syn, mu=mu, sigma=sigma, difficulty_only=difficulty_only,
                                         count_per_class=count if count is not None else syn.count_per_class))
    _persist_config(cfg, paths)

    model, adapters, encoder, embedder, manifest = _load_generation_stack(cfg, paths)
    k = manifest.num_classes
    per_class = cfg.synthesis.count_per_class
    counts = list(manifest.per_class_counts) if per_class is None else [per_class] * k
    if class_index is not None:
        if not 0 <= class_index < k:
            raise ConfigError(f"class index {class_index} out of range for K={k}")
        counts = [c if i == class_index else 0 for i, c in enumerate(counts)]
    plan = SynthesisPlan(
        per_class_counts=tuple(counts),
        mu=mu,
        sigma=sigma,
        prompts=() if difficulty_only else class_prompts(embedder.vocab, manifest.class_names),
        seed=derive_seed(cfg.seed, "generate", tag),
        difficulty_only=difficulty_only,
    )
    result = synthesize_dataset(
        model, adapters, encoder, embedder, plan, noise_schedule(cfg),
        manifest.class_names, sampler_settings(cfg), id_prefix=tag,
    )
    out_dir = paths.datasets / tag
    save_dataset(result.samples, result.manifest, out_dir)
    result.save_sidecar(out_dir / "sidecar.jsonl")
    return {"generated": len(result.samples), "dir": str(out_dir)}


def _real_subset(annotated: list[DifficultySample], per_class: int) -> list[DifficultySample]:
    by_class: dict[int, list[DifficultySample]] = {}
    for s in annotated:
        by_class.setdefault(s.image.label, []).append(s)
    subset = []
    for label in sorted(by_class):
        subset.extend(by_class[label][:per_class])
    return subset


def _subset_manifest(manifest: DatasetManifest, subset: Sequence[DifficultySample]) -> DatasetManifest:
    counts = [0] * manifest.num_classes
    for s in subset:
        counts[s.image.label] += 1
    return DatasetManifest(
        class_names=manifest.class_names,
        per_class_counts=counts,
        image_shape=manifest.image_shape,
        split=manifest.split,
    )


def stage_experiment(cfg: RunConfig, paths: RunPaths, kind: str) -> ExperimentReport:
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment {kind!r}; choose from {EXPERIMENT_KINDS}")
    paths.ensure()
    _persist_config(cfg, paths)
    ex = cfg.experiments
    classifier = ClassifierParams.load(
        paths.require(paths.checkpoints / "classifier.ckpt", "hardgen score")
    )
    annotated, train_manifest = load_dataset(
        paths.require(paths.datasets / "train_annotated", "hardgen score")
    )
    test_images, _ = load_dataset(paths.require(paths.datasets / "test", "hardgen dataset"))
    schedule = noise_schedule(cfg)
    settings = sampler_settings(cfg)

    if kind == "projection":
        images = annotated[: ex.projection_images]
        origins = [0.0] * len(images)
        syn_dir = paths.datasets / "synthetic"
        if syn_dir.exists():
            syn_samples, _ = load_dataset(syn_dir)
            syn_samples = syn_samples[: ex.projection_images]
            images = images + list(syn_samples)
            origins += [1.0] * len(syn_samples)
        coords = feature_projection(images, classifier)
        rows = [
            [float(x), float(y), float(img.image.label if isinstance(img, DifficultySample) else img.label), o]
            for (x, y), img, o in zip(coords, images, origins)
        ]
        report = ExperimentReport(
            name="projection",
            table={"columns": ["x", "y", "label", "synthetic"], "rows": rows},
            config={"n_images": len(images)},
        )
        report.to_json(paths.reports / "projection.json")
        (paths.reports / "projection.csv").write_text(report.table_csv(), encoding="utf-8")
        return report

    model, adapters, encoder, embedder, _ = _load_generation_stack(cfg, paths)
    prompts = class_prompts(embedder.vocab, train_manifest.class_names)

    if kind == "distribution":
        report, results = distribution_experiment(
            model, adapters, encoder, embedder, classifier, schedule,
            train_manifest.class_names, prompts,
            levels=ex.distribution_levels, per_level=ex.distribution_per_level,
            settings=settings, seed=derive_seed(cfg.seed, "experiment-distribution"),
        )
        # no-difficulty-control baseline against conditioned generation at mu
        k = train_manifest.num_classes
        base_n, extra = divmod(ex.distribution_per_level, k)
        counts = tuple(base_n + (1 if i < extra else 0) for i in range(k))
        baseline = synthesize_text_only(
            model, None, embedder, counts, prompts, schedule, train_manifest.class_names,
            settings, seed=derive_seed(cfg.seed, "experiment-baseline"), id_prefix="base",
        )
        from .scorer import assess_difficulties

        baseline_d = assess_difficulties(classifier, baseline.samples)
        plan = SynthesisPlan(per_class_counts=counts, mu=cfg.synthesis.mu, sigma=cfg.synthesis.sigma,
                             prompts=prompts, seed=derive_seed(cfg.seed, "experiment-conditioned"))
        conditioned = synthesize_dataset(model, adapters, encoder, embedder, plan, schedule,
                                         train_manifest.class_names, settings, id_prefix="cond")
        conditioned_d = assess_difficulties(classifier, conditioned.samples)
        threshold = 0.2
        report.summary["baseline_fraction_below"] = float(np.mean(baseline_d < threshold))
        report.summary["conditioned_fraction_below"] = float(np.mean(conditioned_d < threshold))
        report.summary["baseline_kde_mass_below"] = kde_mass_below(baseline_d, threshold)
        report.summary["conditioned_kde_mass_below"] = kde_mass_below(conditioned_d, threshold)
        report.summary["shift_threshold"] = threshold
        report.curves.append(kde(baseline_d))
        report.curves.append(kde(conditioned_d))
        montage = build_montage([[s.image.pixels for s in r.samples[:8]] for r in results])
        save_png(paths.images / "distribution_levels.png", montage)
        report.artifacts.append(str(paths.images / "distribution_levels.png"))
        report.to_json(paths.reports / "distribution.json")
        (paths.reports / "distribution.csv").write_text(report.table_csv(), encoding="utf-8")
        return report

    if kind == "dilemma":
        real_subset = _real_subset(annotated, ex.dilemma_real_per_class)
        pool: list[DifficultySample] = []
        for si, pool_mu in enumerate(ex.dilemma_pool_mus):
            plan = SynthesisPlan(
                per_class_counts=(ex.dilemma_pool_per_class,) * train_manifest.num_classes,
                mu=float(pool_mu), sigma=ex.dilemma_pool_sigma, prompts=prompts,
                seed=derive_seed(cfg.seed, "dilemma-pool", si),
            )
            result = synthesize_dataset(model, adapters, encoder, embedder, plan, schedule,
                                        train_manifest.class_names, settings, id_prefix=f"pool{si}")
            pool.extend(result.samples)
        budget = int(round(ex.dilemma_budget_fraction * len(real_subset)))
        report = dilemma_experiment(
            real_subset, _subset_manifest(train_manifest, real_subset), pool, classifier,
            test_images, scorer_train_config(cfg), thresholds=ex.dilemma_thresholds,
            budget=budget, seeds=ex.dilemma_seeds,
        )
        report.to_json(paths.reports / "dilemma.json")
        (paths.reports / "dilemma.csv").write_text(report.table_csv(), encoding="utf-8")
        return report

    if kind == "ablation":
        real_subset = _real_subset(annotated, ex.ablation_real_per_class)
        pipeline = SynthesisPipeline(
            model=model, adapters=adapters, encoder=encoder, embedder=embedder,
            schedule=schedule, class_names=list(train_manifest.class_names), prompts=prompts,
            real_set=list(real_subset), real_manifest=_subset_manifest(train_manifest, real_subset),
            test_set=list(test_images), classifier_cfg=scorer_train_config(cfg),
            per_class_counts=(ex.ablation_per_class,) * train_manifest.num_classes,
            settings=settings, seed=derive_seed(cfg.seed, "ablation"),
        )
        report = ablation_sweep(ex.ablation_mu_list, ex.ablation_sigma_list, pipeline,
                                sigma_fixed=ex.ablation_sigma_fixed, mu_fixed=ex.ablation_mu_fixed)
        report.to_json(paths.reports / "ablation.json")
        (paths.reports / "ablation.csv").write_text(report.table_csv(), encoding="utf-8")
        return report

    # hard-factors
    grid, report, results = hard_factor_generation(
        model, adapters, encoder, embedder, classifier, schedule,
        train_manifest.class_names, ex.hard_factor_class,
        d_levels=ex.hard_factor_levels, samples_per_level=ex.hard_factor_samples,
        settings=settings, seed=derive_seed(cfg.seed, "hard-factors"),
    )
    save_png(paths.images / "hard_factors.png", grid)
    report.artifacts.append(str(paths.images / "hard_factors.png"))
    sidecar_rows = [row for r in results for row in r.sidecar]
    (paths.reports / "hard_factors_sidecar.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in sidecar_rows), encoding="utf-8"
    )
    report.to_json(paths.reports / "hard_factors.json")
    (paths.reports / "hard_factors.csv").write_text(report.table_csv(), encoding="utf-8")
    return report


def kde_mass_below(scores: np.ndarray, threshold: float) -> float:
    """Fraction of KDE mass left of `threshold` (trapezoid on the curve grid)."""
    curve = kde(np.asarray(scores, dtype=np.float64))
    grid, density = curve.grid, curve.density
    total = np.trapezoid(density, grid)
    mask = grid <= threshold
    if not mask.any():
        return 0.0
    left = np.trapezoid(density[mask], grid[mask])
    return float(left / total)


def run_full_pipeline(cfg: RunConfig, run_dir: str | Path) -> RunPaths:
    """dataset -> score -> pretrain -> finetune, in order."""
    paths = RunPaths(run_dir).ensure()
    stage_dataset(cfg, paths)
    stage_score(cfg, paths)
    stage_pretrain(cfg, paths)
    stage_finetune(cfg, paths)
    return paths
