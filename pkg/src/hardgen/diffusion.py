"""Noise schedule, denoising objective, and the two training loops.

Training happens in pixel space: images are rescaled to [-1, 1], noised by
the closed-form forward process, and the denoiser is regressed on the drawn
noise. The base model trains on text-only conditions; fine-tuning freezes
the base and optimizes only low-rank adapters plus the difficulty encoder,
with conditions carrying prompt and difficulty blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .conditioning import Condition, DifficultyEncoder, PromptEmbedder, embed_prompt
from .dataset import DifficultySample, LabeledImage, images_of
from .errors import ConfigError, InvariantViolation, NumericError, TrainingDivergence
from .lora import AdapterSet
from .seeds import rng_for
from .unet import ConditionalUNet, create_unet, parameter_checksum


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta with derived alpha and cumulative alpha-bar."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("all beta entries must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {timesteps}")
        return cls(np.linspace(beta_start, beta_end, timesteps))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based step t; t = 0 is the clean-data endpoint (1.0)."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"timesteps": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t 1-based."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} must match z0 {tuple(z0.shape)}")
    t_arr = torch.as_tensor(t, dtype=torch.long)
    if t_arr.ndim == 0:
        t_arr = t_arr.expand(z0.shape[0])
    if t_arr.min() < 1 or t_arr.max() > schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}]")
    abar = torch.from_numpy(schedule.alpha_bar).to(z0.dtype)[t_arr - 1]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    return abar.sqrt().reshape(shape) * z0 + (1 - abar).sqrt().reshape(shape) * eps


def predict_noise(z_t: torch.Tensor, t, condition: Condition | torch.Tensor,
                  base: ConditionalUNet, adapters: AdapterSet | None = None) -> torch.Tensor:
    """Denoiser forward pass; the condition is broadcast over the batch."""
    if isinstance(condition, Condition):
        cond = torch.from_numpy(condition.vectors).to(z_t.dtype)[None]
    else:
        cond = condition.to(z_t.dtype)
        if cond.ndim == 2:
            cond = cond[None]
    if cond.shape[-1] != base.cond_dim:
        raise ValueError(f"condition width {cond.shape[-1]} != model width {base.cond_dim}")
    if cond.shape[0] == 1 and z_t.shape[0] > 1:
        cond = cond.expand(z_t.shape[0], -1, -1)
    t_tensor = torch.as_tensor(t, dtype=z_t.dtype)
    return base(z_t, t_tensor, cond, adapters)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-4
    p_uncond: float = 0.1
    seed: int = 0
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must be in [0, 1), got {self.p_uncond}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def first_loss(self) -> float:
        return self.loss_curve[0][1]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1][1]

    def mean_loss(self, first_n: int = 0, last_n: int = 0) -> float:
        vals = [v for _, v in self.loss_curve]
        if first_n:
            vals = vals[:first_n]
        elif last_n:
            vals = vals[-last_n:]
        return float(np.mean(vals))


def draw_loss_randomness(rng: np.random.Generator, batch_shape: tuple, timesteps: int,
                         p_uncond: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample (t, eps, drop) draws, in a fixed order for reproducibility."""
    b = batch_shape[0]
    t = rng.integers(1, timesteps + 1, size=b)
    eps = rng.standard_normal(batch_shape)
    drop = rng.uniform(size=b) < p_uncond if p_uncond > 0 else np.zeros(b, dtype=bool)
    return t, eps, drop


def diffusion_loss(
    z0: torch.Tensor,
    conditions: Sequence[torch.Tensor],
    model: ConditionalUNet,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    adapters: AdapterSet | None = None,
    p_uncond: float = 0.0,
    draws: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> torch.Tensor:
    """Mean over the batch of per-sample MSE between drawn and predicted noise.

    Each sample gets its own uniform step t and Gaussian eps; with
    probability `p_uncond` a sample's condition is replaced by the null
    (all-zero, single-row) condition. Pass `draws` to pin the randomness,
    e.g. for finite-difference checks; otherwise they come from `rng`.
    """
    if z0.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if len(conditions) != z0.shape[0]:
        raise ValueError(f"{len(conditions)} conditions for batch of {z0.shape[0]}")
    if draws is None:
        if rng is None:
            raise ValueError("either rng or draws must be provided")
        draws = draw_loss_randomness(rng, tuple(z0.shape), schedule.T, p_uncond)
    t_np, eps_np, drop = draws

    t = torch.from_numpy(np.asarray(t_np, dtype=np.int64))
    eps = torch.from_numpy(np.asarray(eps_np)).to(z0.dtype)
    z_t = forward_noise(z0, t, eps, schedule)

    null_row = torch.zeros(1, model.cond_dim, dtype=z0.dtype)
    per_sample: list[torch.Tensor] = []
    for i in range(z0.shape[0]):
        if drop[i]:
            per_sample.append(null_row)
        else:
            cond = conditions[i]
            if cond.ndim != 2 or cond.shape[-1] != model.cond_dim:
                raise ValueError(f"condition {i} must be (rows, {model.cond_dim})")
            per_sample.append(cond.to(z0.dtype))

    # group same-row-count conditions so each group runs as one forward pass
    groups: dict[int, list[int]] = {}
    for i, cond in enumerate(per_sample):
        groups.setdefault(cond.shape[0], []).append(i)
    sample_losses: list[torch.Tensor | None] = [None] * z0.shape[0]
    for indices in groups.values():
        idx = torch.tensor(indices, dtype=torch.long)
        cond_batch = torch.stack([per_sample[i] for i in indices])
        eps_hat = model(z_t[idx], t[idx].to(z0.dtype), cond_batch, adapters)
        if not torch.all(torch.isfinite(eps_hat)):
            bad = [indices[j] for j in range(len(indices))
                   if not bool(torch.all(torch.isfinite(eps_hat[j])))]
            raise NumericError(f"non-finite denoiser output for batch index {bad[0]}")
        err = (eps[idx] - eps_hat) ** 2
        per = err.reshape(err.shape[0], -1).mean(dim=1)
        for j, i in enumerate(indices):
            sample_losses[i] = per[j]
    return torch.stack([loss for loss in sample_losses]).mean()  # type: ignore[arg-type]


def to_model_space(images: Sequence[LabeledImage | DifficultySample], dtype=torch.float32) -> torch.Tensor:
    """Pixels [0,1] HWC -> model-space tensor (B, C, H, W) in [-1, 1]."""
    arr = np.stack([img.pixels for img in images_of(images)]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype) * 2.0 - 1.0


def from_model_space(z: torch.Tensor) -> np.ndarray:
    """Model space [-1,1] (B, C, H, W) -> pixels (B, H, W, C) clipped to [0,1]."""
    pixels = ((z.detach().cpu().numpy() + 1.0) / 2.0).transpose(0, 2, 3, 1)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def _check_loss_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergence(step)


def pretrain_base(
    dataset: Sequence[LabeledImage | DifficultySample],
    prompts: Sequence[Sequence[int]],
    embedder: PromptEmbedder,
    schedule: NoiseSchedule,
    config: TrainConfig,
    arch: dict | None = None,
) -> tuple[ConditionalUNet, TrainReport]:
    """Train the base denoiser from scratch on text-only conditions.

    `prompts` maps class index -> token ids; every sample's condition is its
    class prompt embedding, dropped to the null condition with probability
    `config.p_uncond` for guidance training.
    """
    config.validate()
    images = images_of(dataset)
    if not images:
        raise ValueError("dataset must be non-empty")
    h, w, c = images[0].pixels.shape
    arch = dict(arch or {})
    model = create_unet(
        image_size=arch.get("image_size", h),
        channels=arch.get("channels", c),
        cond_dim=arch.get("cond_dim", embedder.dim),
        widths=tuple(arch.get("widths", (16, 32, 48))),
        time_dim=arch.get("time_dim", 64),
        seed=config.seed,
    )
    prompt_conds = [torch.from_numpy(embed_prompt(embedder, p)) for p in prompts]
    labels = np.array([img.label for img in images])
    if labels.max() >= len(prompt_conds):
        raise ValueError(f"label {labels.max()} has no prompt (got {len(prompt_conds)} prompts)")

    z0_all = to_model_space(images)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng_batch = rng_for(config.seed, "pretrain-batches")
    rng_draw = rng_for(config.seed, "pretrain-draws")
    report = TrainReport(config={"stage": "pretrain", **config.__dict__, "arch": model.descriptor()})
    model.train()
    for step in range(config.steps):
        idx = rng_batch.integers(0, len(images), size=min(config.batch_size, len(images)))
        conds = [prompt_conds[labels[i]] for i in idx]
        loss = diffusion_loss(z0_all[idx], conds, model, schedule,
                              rng=rng_draw, p_uncond=config.p_uncond)
        _check_loss_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.loss_curve.append((step, float(loss.detach())))
    model.eval()
    return model, report


def finetune_with_difficulty(
    annotated_set: Sequence[DifficultySample],
    base: ConditionalUNet,
    adapters: AdapterSet,
    encoder: DifficultyEncoder,
    embedder: PromptEmbedder,
    schedule: NoiseSchedule,
    config: TrainConfig,
) -> tuple[AdapterSet, DifficultyEncoder, TrainReport]:
    """Jointly optimize adapters and the difficulty encoder; base stays frozen.

    Conditions are per-sample: prompt embedding rows followed by the encoder's
    difficulty rows for (d, y). Raises InvariantViolation if any base
    parameter changed by the end.
    """
    config.validate()
    if not annotated_set:
        raise ValueError("annotated_set must be non-empty")
    if encoder.dim != base.cond_dim or embedder.dim != base.cond_dim:
        raise ConfigError(
            f"condition widths disagree: encoder {encoder.dim}, embedder {embedder.dim}, "
            f"model {base.cond_dim}"
        )
    base_checksum = parameter_checksum(base)
    base.eval()
    for p in base.parameters():
        p.requires_grad_(False)

    prompt_cache: dict[tuple[int, ...], torch.Tensor] = {}
    for s in annotated_set:
        if s.prompt not in prompt_cache:
            prompt_cache[s.prompt] = torch.from_numpy(embed_prompt(embedder, s.prompt))
    z0_all = to_model_space(annotated_set)
    d_all = torch.tensor([s.difficulty for s in annotated_set], dtype=torch.float32)
    y_all = torch.tensor([s.image.label for s in annotated_set], dtype=torch.long)
    prompts = [s.prompt for s in annotated_set]

    params = list(adapters.parameters()) + list(encoder.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng_batch = rng_for(config.seed, "finetune-batches")
    rng_draw = rng_for(config.seed, "finetune-draws")
    report = TrainReport(config={"stage": "finetune", **config.__dict__})
    encoder.train()
    for step in range(config.steps):
        idx = rng_batch.integers(0, len(annotated_set), size=min(config.batch_size, len(annotated_set)))
        idx_t = torch.from_numpy(idx)
        diff_rows = encoder(d_all[idx_t], y_all[idx_t])  # (B, heads, dim), grads flow
        conds = [
            torch.cat([prompt_cache[prompts[i]], diff_rows[j]], dim=0)
            for j, i in enumerate(idx)
        ]
        loss = diffusion_loss(z0_all[idx_t], conds, base, schedule,
                              rng=rng_draw, adapters=adapters, p_uncond=config.p_uncond)
        _check_loss_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.loss_curve.append((step, float(loss.detach())))
    encoder.eval()
    if parameter_checksum(base) != base_checksum:
        raise InvariantViolation("base denoiser parameters changed during fine-tuning")
    return adapters, encoder, report
