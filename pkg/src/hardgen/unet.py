"""Conditional U-Net noise predictor.

Pixel-space denoiser: residual conv blocks over a three-level pyramid, a
sinusoidal step embedding, and cross-attention layers that read the
condition rows (prompt block + difficulty block). Cross-attention
projections are the low-rank-adapter targets.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import IntegrityError
from .lora import AdapterSet, effective_weight
from .seeds import derive_seed


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        self.register_buffer("freqs", freqs.float())

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial tokens to condition rows."""

    def __init__(self, channels: int, cond_dim: int, name: str):
        super().__init__()
        self.name = name
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor, cond: torch.Tensor, adapters: AdapterSet | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        sub = adapters.for_layer(self.name) if adapters is not None else {}
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q = F.linear(tokens, effective_weight(self.to_q.weight, sub.get("to_q")), self.to_q.bias)
        k = F.linear(cond, effective_weight(self.to_k.weight, sub.get("to_k")), self.to_k.bias)
        v = F.linear(cond, effective_weight(self.to_v.weight, sub.get("to_v")), self.to_v.bias)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = F.linear(attn @ v, effective_weight(self.to_out.weight, sub.get("to_out")), self.to_out.bias)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ConditionalUNet(nn.Module):
    """Noise predictor epsilon(z_t, t, condition) at a fixed image size."""

    def __init__(self, image_size: int = 32, channels: int = 1, cond_dim: int = 64,
                 widths: tuple[int, int, int] = (16, 32, 48), time_dim: int = 64):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError(f"image_size must be divisible by 4, got {image_size}")
        self.image_size = image_size
        self.channels = channels
        self.cond_dim = cond_dim
        self.widths = tuple(widths)
        self.time_dim = time_dim
        w1, w2, w3 = self.widths

        self.time_embed = SinusoidalTimeEmbedding(time_dim)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        self.stem = nn.Conv2d(channels, w1, 3, padding=1)
        self.enc1 = ResBlock(w1, w1, time_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w2, w2, time_dim)
        self.enc2_attn = CrossAttention(w2, cond_dim, "enc2_attn")
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.enc3 = ResBlock(w3, w3, time_dim)

        self.mid1 = ResBlock(w3, w3, time_dim)
        self.mid_attn = CrossAttention(w3, cond_dim, "mid_attn")
        self.mid2 = ResBlock(w3, w3, time_dim)

        self.dec3 = ResBlock(2 * w3, w3, time_dim)
        self.dec3_attn = CrossAttention(w3, cond_dim, "dec3_attn")
        self.up2 = nn.Conv2d(w3, w2, 3, padding=1)
        self.dec2 = ResBlock(2 * w2, w2, time_dim)
        self.dec2_attn = CrossAttention(w2, cond_dim, "dec2_attn")
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec1 = ResBlock(2 * w1, w1, time_dim)

        self.out_norm = _norm(w1)
        self.out_conv = nn.Conv2d(w1, channels, 3, padding=1)

    def cross_attention_layers(self) -> list[tuple[str, CrossAttention]]:
        return [(m.name, m) for m in (self.enc2_attn, self.mid_attn, self.dec3_attn, self.dec2_attn)]

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                adapters: AdapterSet | None = None) -> torch.Tensor:
        if cond.ndim != 3 or cond.shape[-1] != self.cond_dim:
            raise ValueError(
                f"condition must be (B, rows, {self.cond_dim}), got {tuple(cond.shape)}"
            )
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        t_emb = self.time_mlp(self.time_embed(t))

        h1 = self.enc1(self.stem(z), t_emb)
        h2 = self.enc2(self.down1(h1), t_emb)
        h2 = self.enc2_attn(h2, cond, adapters)
        h3 = self.enc3(self.down2(h2), t_emb)

        m = self.mid1(h3, t_emb)
        m = self.mid_attn(m, cond, adapters)
        m = self.mid2(m, t_emb)

        d3 = self.dec3(torch.cat([m, h3], dim=1), t_emb)
        d3 = self.dec3_attn(d3, cond, adapters)
        d2 = self.up2(F.interpolate(d3, scale_factor=2, mode="nearest"))
        d2 = self.dec2(torch.cat([d2, h2], dim=1), t_emb)
        d2 = self.dec2_attn(d2, cond, adapters)
        d1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([d1, h1], dim=1), t_emb)

        return self.out_conv(F.silu(self.out_norm(d1)))

    def descriptor(self) -> dict:
        return {
            "component": "denoiser",
            "kind": "conditional_unet",
            "image_size": self.image_size,
            "channels": self.channels,
            "cond_dim": self.cond_dim,
            "widths": list(self.widths),
            "time_dim": self.time_dim,
        }

    def save(self, path: str | Path) -> None:
        arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.state_dict().items()}
        save_checkpoint(path, self.descriptor(), arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ConditionalUNet":
        descriptor, arrays = load_checkpoint(path)
        if descriptor.get("kind") != "conditional_unet":
            raise IntegrityError(f"not a denoiser checkpoint: {path}")
        model = cls(
            image_size=int(descriptor["image_size"]),
            channels=int(descriptor["channels"]),
            cond_dim=int(descriptor["cond_dim"]),
            widths=tuple(descriptor["widths"]),
            time_dim=int(descriptor["time_dim"]),
        )
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        return model


def create_unet(image_size: int = 32, channels: int = 1, cond_dim: int = 64,
                widths: tuple[int, int, int] = (16, 32, 48), time_dim: int = 64,
                seed: int = 0) -> ConditionalUNet:
    torch.manual_seed(derive_seed(seed, "unet-init"))
    return ConditionalUNet(image_size=image_size, channels=channels, cond_dim=cond_dim,
                           widths=widths, time_dim=time_dim)


def parameter_checksum(module: nn.Module) -> str:
    """Order-independent digest of all parameters and buffers, for freeze checks."""
    import hashlib

    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode("utf-8"))
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()
