"""Shared fixtures.

The desk-scale pipeline (dataset -> scorer -> pretrain -> finetune) backs
the end-to-end tests. Building it takes tens of minutes on a small CPU, so
it is built once into a cache directory keyed by the resolved config and
reused across test runs. Delete tests/_cache to force a rebuild.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pytest

from hardgen.conditioning import DifficultyEncoder, PromptEmbedder, Vocabulary
from hardgen.config import RunConfig
from hardgen.dataset import load_dataset
from hardgen.diffusion import NoiseSchedule
from hardgen.lora import AdapterSet
from hardgen.pipeline import (
    RunPaths,
    class_prompts,
    noise_schedule,
    sampler_settings,
    stage_dataset,
    stage_finetune,
    stage_pretrain,
    stage_score,
)
from hardgen.scorer import ClassifierParams, ScorerTrainConfig, train_classifier
from hardgen.shapes import Hardness, ShapesConfig, generate_shapes_dataset
from hardgen.unet import ConditionalUNet

CACHE_ROOT = Path(os.environ.get("HARDGEN_TEST_CACHE", str(Path(__file__).parent / "_cache")))


def desk_config() -> RunConfig:
    """The pinned desk-scale pipeline is exactly the package defaults."""
    return RunConfig(seed=11)


@dataclass
class DeskPipeline:
    cfg: RunConfig
    paths: RunPaths
    build_info: dict

    @cached_property
    def classifier(self) -> ClassifierParams:
        return ClassifierParams.load(self.paths.checkpoints / "classifier.ckpt")

    @cached_property
    def model(self) -> ConditionalUNet:
        return ConditionalUNet.load(self.paths.checkpoints / "base.ckpt")

    @cached_property
    def adapters(self) -> AdapterSet:
        return AdapterSet.load(self.paths.checkpoints / "adapters.ckpt")

    @cached_property
    def encoder(self) -> DifficultyEncoder:
        return DifficultyEncoder.load(self.paths.checkpoints / "difficulty_encoder.ckpt")

    @cached_property
    def embedder(self) -> PromptEmbedder:
        return PromptEmbedder.load(self.paths.checkpoints / "embedder.ckpt")

    @cached_property
    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.paths.checkpoints / "vocab.json")

    @cached_property
    def train_annotated(self):
        return load_dataset(self.paths.datasets / "train_annotated")

    @cached_property
    def test_set(self):
        return load_dataset(self.paths.datasets / "test")

    @property
    def schedule(self) -> NoiseSchedule:
        return noise_schedule(self.cfg)

    @property
    def settings(self):
        return sampler_settings(self.cfg)

    @property
    def class_names(self) -> list[str]:
        return self.train_annotated[1].class_names

    @property
    def prompts(self):
        return class_prompts(self.vocab, self.class_names)


def _build_desk(cfg: RunConfig, run_dir: Path) -> dict:
    paths = RunPaths(run_dir).ensure()
    timings = {}
    for name, stage in (
        ("dataset", stage_dataset),
        ("score", stage_score),
        ("pretrain", stage_pretrain),
        ("finetune", stage_finetune),
    ):
        t0 = time.time()
        stage(cfg, paths)
        timings[name] = time.time() - t0
    info = {"timings": timings, "train_seconds": timings["pretrain"] + timings["finetune"]}
    (run_dir / "build_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return info


@pytest.fixture(scope="session")
def desk() -> DeskPipeline:
    cfg = desk_config()
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    run_dir = CACHE_ROOT / f"desk-{key}"
    info_path = run_dir / "build_info.json"
    if info_path.exists():
        info = json.loads(info_path.read_text())
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
        info = _build_desk(cfg, run_dir)
    return DeskPipeline(cfg=cfg, paths=RunPaths(run_dir), build_info=info)


# ---------------------------------------------------------------------------
# small shared fixtures


@pytest.fixture(scope="session")
def tiny_shapes():
    cfg = ShapesConfig(
        num_classes=3, samples_per_class=20, seed=5,
        hardness=Hardness(clutter_count=6, occlusion_fraction=0.5, noise_std=0.18),
    )
    return generate_shapes_dataset(cfg, "train")


@pytest.fixture(scope="session")
def tiny_classifier(tiny_shapes):
    images, manifest = tiny_shapes
    params, report = train_classifier(
        images, ScorerTrainConfig(epochs=3, batch_size=32, seed=2), num_classes=manifest.num_classes
    )
    return params, report


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    name = item.name
    if report.passed:
        _ACCEPTANCE_RESULTS[name] = "PASS"
    elif report.failed:
        _ACCEPTANCE_RESULTS[name] = "FAIL"
    elif report.skipped:
        _ACCEPTANCE_RESULTS[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{_ACCEPTANCE_RESULTS[name]}  {name}")
