"""Image generation by iterative denoising with classifier-free guidance.

One implementation covers both samplers: the deterministic variant keeps
the noise injection at zero (eta = 0), while `ddpm` runs the same update
with full posterior noise (eta = 1). Each request owns an RNG stream
derived from its seed, so results depend only on (checkpoint, request).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import Condition
from .diffusion import NoiseSchedule, from_model_space
from .errors import NumericError
from .lora import AdapterSet
from .seeds import rng_for
from .unet import ConditionalUNet

METHODS = ("ddpm", "ddim")


@dataclass(frozen=True)
class SampleRequest:
    condition: Condition
    steps: int = 30
    guidance: float = 2.0
    method: str = "ddim"
    eta: float = 0.0
    seed: int = 0

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.steps < 1 or self.steps > schedule.T:
            raise ValueError(f"steps must be in [1, {schedule.T}], got {self.steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance must be >= 0, got {self.guidance}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


def cfg_combine(eps_cond, eps_uncond, g: float):
    """Guided noise estimate eps_u + g * (eps_c - eps_u); exact at g = 0 and 1."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if g == 0:
        return eps_uncond
    if g == 1:
        return eps_cond
    return eps_uncond + g * (eps_cond - eps_uncond)


def subschedule(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced 1-based step indices from T down to 1, T included."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    if steps == 1:
        return [timesteps]
    ts = [1 + round(k * (timesteps - 1) / (steps - 1)) for k in range(steps)]
    ts = ts[::-1]
    if ts[0] != timesteps or any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError(f"degenerate sub-schedule for T={timesteps}, S={steps}")
    return ts


def _guided_eps(model: ConditionalUNet, adapters: AdapterSet | None, z: torch.Tensor,
                t: int, cond_rows: torch.Tensor, g: float) -> torch.Tensor:
    if g == 0:
        null_rows = torch.zeros(1, 1, model.cond_dim, dtype=z.dtype)
        return model(z, torch.tensor([float(t)], dtype=z.dtype), null_rows, adapters)
    if g == 1:
        return model(z, torch.tensor([float(t)], dtype=z.dtype), cond_rows[None], adapters)
    # both branches in one forward; the null branch replicates the zero row
    # to the conditional row count, which leaves attention output unchanged
    null_rows = torch.zeros_like(cond_rows)
    stacked_cond = torch.stack([cond_rows, null_rows])
    stacked_z = torch.cat([z, z], dim=0)
    t_tensor = torch.full((2,), float(t), dtype=z.dtype)
    out = model(stacked_z, t_tensor, stacked_cond, adapters)
    return cfg_combine(out[0:1], out[1:2], g)


def sample(model: ConditionalUNet, adapters: AdapterSet | None, request: SampleRequest,
           schedule: NoiseSchedule) -> np.ndarray:
    """Generate one image; returns H x W x C pixels in [0, 1]."""
    request.validate(schedule)
    if request.condition.width != model.cond_dim:
        raise ValueError(
            f"condition width {request.condition.width} != model width {model.cond_dim}"
        )
    rng = rng_for(request.seed, "sampler")
    shape = (1, model.channels, model.image_size, model.image_size)
    z = torch.from_numpy(rng.standard_normal(shape)).float()
    cond_rows = torch.from_numpy(request.condition.vectors)
    eta = 1.0 if request.method == "ddpm" else request.eta
    ts = subschedule(schedule.T, request.steps)

    with torch.inference_mode():
        for i, t in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = _guided_eps(model, adapters, z, t, cond_rows, request.guidance)
            abar_t = schedule.alpha_bar_at(t)
            abar_next = schedule.alpha_bar_at(t_next)
            x0 = (z - float(np.sqrt(1.0 - abar_t)) * eps_hat) / float(np.sqrt(abar_t))
            # clamp the clean-image estimate to the valid pixel range and fold
            # the clamp back into the noise estimate; keeps guided
            # trajectories from blowing up at high guidance
            x0 = x0.clamp(-1.0, 1.0)
            eps_used = (z - float(np.sqrt(abar_t)) * x0) / float(np.sqrt(1.0 - abar_t))
            sigma = float(
                eta
                * np.sqrt((1.0 - abar_next) / (1.0 - abar_t))
                * np.sqrt(max(1.0 - abar_t / abar_next, 0.0))
            )
            direction = float(np.sqrt(max(1.0 - abar_next - sigma**2, 0.0)))
            z = float(np.sqrt(abar_next)) * x0 + direction * eps_used
            if sigma > 0.0 and t_next > 0:
                noise = torch.from_numpy(rng.standard_normal(shape)).float()
                z = z + sigma * noise
            if not torch.all(torch.isfinite(z)):
                raise NumericError(f"non-finite latent at sampling step {i} (t={t})")
    return from_model_space(z)[0]


def sample_batch(model: ConditionalUNet, adapters: AdapterSet | None,
                 requests: list[SampleRequest], schedule: NoiseSchedule) -> list[np.ndarray]:
    """Per-request independent generation; element i equals sample(requests[i])."""
    images = []
    for i, request in enumerate(requests):
        try:
            images.append(sample(model, adapters, request, schedule))
        except Exception as exc:
            exc.args = (f"request index {i}: {exc}",)
            raise
    return images
