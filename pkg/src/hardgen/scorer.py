"""Baseline classifier training and per-sample difficulty assessment.

Difficulty of a sample is 1 minus the classifier's softmax probability for
the true class. The classifier that annotates a dataset is trained once and
then frozen; downstream stages never retrain or recalibrate it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DifficultySample, LabeledImage, images_of
from .errors import NumericError, TrainingDivergence
from .seeds import derive_seed, rng_for


class SmallConvNet(nn.Module):
    """Compact K-way CNN: three conv stages, global pooling, linear head."""

    def __init__(self, image_size: int, channels: int, num_classes: int, width: int = 16, feature_dim: int = 64):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(channels, w, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.fc = nn.Linear(2 * w * 16, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)
        self.image_size = image_size
        self.channels = channels
        self.num_classes = num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(x).flatten(1)
        return torch.relu(self.fc(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ClassifierParams:
    """Frozen classifier: architecture descriptor plus named float32 arrays."""

    arch: dict
    state: dict[str, np.ndarray]
    _module: SmallConvNet | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return int(self.arch["num_classes"])

    def module(self) -> SmallConvNet:
        if self._module is None:
            net = SmallConvNet(
                image_size=int(self.arch["image_size"]),
                channels=int(self.arch["channels"]),
                num_classes=int(self.arch["num_classes"]),
                width=int(self.arch["width"]),
                feature_dim=int(self.arch["feature_dim"]),
            )
            net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
            net.eval()
            self._module = net
        return self._module

    @classmethod
    def from_module(cls, net: SmallConvNet, width: int, feature_dim: int) -> "ClassifierParams":
        arch = {
            "kind": "small_convnet",
            "image_size": net.image_size,
            "channels": net.channels,
            "num_classes": net.num_classes,
            "width": width,
            "feature_dim": feature_dim,
        }
        state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in net.state_dict().items()}
        return cls(arch=arch, state=state)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, {"component": "classifier", "arch": self.arch}, self.state)

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierParams":
        descriptor, arrays = load_checkpoint(path)
        return cls(arch=descriptor["arch"], state=arrays)


@dataclass(frozen=True)
class ScorerTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    label_smoothing: float = 0.0
    aug_noise_std: float = 0.0  # train-time additive noise; assessment stays clean
    width: int = 16
    feature_dim: int = 64
    val_fraction: float = 0.1
    seed: int = 0


def _to_batch_tensor(images: Sequence[LabeledImage]) -> torch.Tensor:
    arr = np.stack([img.pixels for img in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def train_classifier(
    train_set: Sequence[LabeledImage | DifficultySample],
    config: ScorerTrainConfig,
    num_classes: int | None = None,
    val_set: Sequence[LabeledImage | DifficultySample] | None = None,
) -> tuple[ClassifierParams, dict]:
    """Train the baseline classifier; returns frozen params and a report.

    The report carries the loss curve, final-epoch mean train loss, and
    held-out top-1 accuracy (on `val_set` if given, otherwise on a seeded
    split of `train_set` controlled by ``config.val_fraction``).
    """
    images = images_of(train_set)
    if not images:
        raise ValueError("train_set must be non-empty")
    labels = np.array([img.label for img in images], dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if k < 2:
        raise ValueError(f"classifier needs at least 2 classes, got K={k}")
    if labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for K={k}")

    if val_set is not None:
        train_images, val_images = images, images_of(val_set)
    elif config.val_fraction > 0 and len(images) >= 2:
        n_val = max(1, int(round(config.val_fraction * len(images))))
        n_val = min(n_val, len(images) - 1)
        perm = rng_for(config.seed, "scorer-valsplit").permutation(len(images))
        val_images = [images[i] for i in perm[:n_val]]
        train_images = [images[i] for i in perm[n_val:]]
    else:
        train_images, val_images = images, []

    torch.manual_seed(derive_seed(config.seed, "scorer-init"))
    h, w_img, c = train_images[0].pixels.shape
    net = SmallConvNet(h, c, k, width=config.width, feature_dim=config.feature_dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=config.label_smoothing)

    x_all = _to_batch_tensor(train_images)
    y_all = torch.from_numpy(np.array([img.label for img in train_images], dtype=np.int64))
    rng = rng_for(config.seed, "scorer-train")
    aug_gen = torch.Generator().manual_seed(derive_seed(config.seed, "scorer-aug"))
    n = len(train_images)
    step = 0
    loss_curve: list[tuple[int, float]] = []
    epoch_mean = float("nan")
    net.train()
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(perm[start : start + config.batch_size].copy())
            xb = x_all[idx]
            if config.aug_noise_std > 0:
                noise = torch.randn(xb.shape, generator=aug_gen)
                xb = (xb + config.aug_noise_std * noise).clamp(0.0, 1.0)
            logits = net(xb)
            loss = loss_fn(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_curve.append((step, float(loss.detach())))
            epoch_losses.append(float(loss.detach()))
            step += 1
        epoch_mean = float(np.mean(epoch_losses))

    params = ClassifierParams.from_module(net, width=config.width, feature_dim=config.feature_dim)
    report = {
        "num_classes": k,
        "train_size": n,
        "steps": step,
        "final_train_loss": epoch_mean,
        "heldout_accuracy": None,
        "loss_curve": loss_curve,
    }
    if val_images:
        preds = predict_labels(params, val_images)
        truth = np.array([img.label for img in val_images])
        report["heldout_accuracy"] = float(np.mean(preds == truth))
    return params, report


def _logits(classifier: ClassifierParams, images: Sequence[LabeledImage]) -> np.ndarray:
    net = classifier.module()
    outs = []
    with torch.inference_mode():
        x = _to_batch_tensor(images)
        for start in range(0, x.shape[0], 256):
            outs.append(net(x[start : start + 256]).numpy())
    logits = np.concatenate(outs, axis=0)
    if not np.all(np.isfinite(logits)):
        raise NumericError("classifier produced non-finite logits")
    return logits


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_labels(classifier: ClassifierParams, images: Sequence[LabeledImage | DifficultySample]) -> np.ndarray:
    return _logits(classifier, images_of(images)).argmax(axis=1)


def assess_difficulties(
    classifier: ClassifierParams,
    images: Sequence[LabeledImage | DifficultySample],
    true_labels: Sequence[int] | None = None,
) -> np.ndarray:
    """Difficulty d = 1 - softmax confidence of the true class, per image."""
    imgs = images_of(images)
    labels = np.array([img.label for img in imgs] if true_labels is None else list(true_labels), dtype=np.int64)
    if len(labels) != len(imgs):
        raise ValueError("true_labels length must match images")
    if len(imgs) == 0:
        return np.zeros(0, dtype=np.float64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classifier.num_classes:
        raise ValueError(f"labels out of range for K={classifier.num_classes}")
    probs = _softmax64(_logits(classifier, imgs))
    d = 1.0 - probs[np.arange(len(imgs)), labels]
    # keep the open interval (0, 1) even when softmax saturates in float64
    return np.clip(d, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def assess_difficulty(
    classifier: ClassifierParams, image: LabeledImage | np.ndarray, true_label: int
) -> float:
    if isinstance(image, np.ndarray):
        image = LabeledImage(pixels=image, label=int(true_label), id="adhoc")
    return float(assess_difficulties(classifier, [image], [int(true_label)])[0])


def penultimate_features(
    classifier: ClassifierParams, images: Sequence[LabeledImage | DifficultySample]
) -> np.ndarray:
    net = classifier.module()
    with torch.inference_mode():
        feats = net.features(_to_batch_tensor(images_of(images))).numpy()
    if not np.all(np.isfinite(feats)):
        raise NumericError("classifier produced non-finite features")
    return feats.astype(np.float64)


def annotate_dataset(
    classifier: ClassifierParams,
    dataset: Sequence[LabeledImage],
    class_names: Sequence[str],
    vocab,
) -> list[DifficultySample]:
    """Attach difficulty and a `photo of <classname>` prompt to every image."""
    if len(class_names) != classifier.num_classes:
        raise ValueError(
            f"class_names has {len(class_names)} entries, classifier expects {classifier.num_classes}"
        )
    if not dataset:
        return []
    prompts = {k: tuple(vocab.encode(f"photo of {name}")) for k, name in enumerate(class_names)}
    difficulties = assess_difficulties(classifier, dataset)
    return [
        DifficultySample(image=img, difficulty=float(d), prompt=prompts[img.label], origin="real")
        for img, d in zip(dataset, difficulties)
    ]


def split_by_difficulty(
    annotated_set: Sequence[DifficultySample],
    thresholds: Sequence[float] = (0.1, 0.5),
) -> tuple[list[DifficultySample], list[DifficultySample], list[DifficultySample]]:
    """Partition into easy [0, t1), moderate [t1, t2), hard [t2, 1]."""
    t1, t2 = (float(t) for t in thresholds)
    if not (0.0 < t1 < t2 < 1.0):
        raise ValueError(f"thresholds must be strictly increasing within (0, 1), got {thresholds}")
    easy = [s for s in annotated_set if s.difficulty < t1]
    moderate = [s for s in annotated_set if t1 <= s.difficulty < t2]
    hard = [s for s in annotated_set if s.difficulty >= t2]
    return easy, moderate, hard
