"""Low-rank adapters for attention projection weights.

An adapter contributes `scale * (B @ A)` on top of a frozen weight matrix,
with A (r x d_in) seeded random and B (d_out x r) starting at zero so the
adapted model initially matches the base exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import IntegrityError
from .seeds import derive_seed


class LoraAdapter(nn.Module):
    def __init__(self, target_layer: str, d_in: int, d_out: int, rank: int = 4, alpha: float = 4.0):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"rank must be in [1, {min(d_in, d_out)}], got {rank}")
        self.target_layer = target_layer
        self.rank = rank
        self.alpha = float(alpha)
        self.scale = self.alpha / rank
        self.A = nn.Parameter(torch.empty(rank, d_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.normal_(self.A, std=1.0 / rank)

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def extra_repr(self) -> str:
        return f"target={self.target_layer}, rank={self.rank}, alpha={self.alpha}"


def effective_weight(weight: torch.Tensor, adapter: LoraAdapter | None) -> torch.Tensor:
    """W + scale * (B @ A); exactly W when the adapter contributes nothing.

    Scale zero returns the base weight object itself so the adapted forward
    pass stays bit-identical to the base model, not just numerically close.
    """
    if adapter is None or adapter.scale == 0.0:
        return weight
    if adapter.A.shape[1] != weight.shape[1] or adapter.B.shape[0] != weight.shape[0]:
        raise ValueError(
            f"adapter {adapter.target_layer} shaped for "
            f"{adapter.B.shape[0]}x{adapter.A.shape[1]}, weight is {tuple(weight.shape)}"
        )
    return weight + adapter.delta().to(weight.dtype)


class AdapterSet(nn.Module):
    """Named adapters, keyed by `<layer path>/<projection>`."""

    def __init__(self, adapters: dict[str, LoraAdapter] | None = None):
        super().__init__()
        self.adapters = nn.ModuleDict(adapters or {})

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.items())

    def get(self, target: str) -> LoraAdapter | None:
        return self.adapters[target] if target in self.adapters else None

    def for_layer(self, layer_name: str) -> dict[str, LoraAdapter]:
        prefix = layer_name + "/"
        return {k[len(prefix):]: a for k, a in self.adapters.items() if k.startswith(prefix)}

    def set_scale(self, scale: float) -> None:
        for adapter in self.adapters.values():
            adapter.scale = float(scale)

    def save(self, path: str | Path) -> None:
        descriptor = {
            "component": "lora_adapters",
            "targets": {
                name: {"rank": a.rank, "alpha": a.alpha, "scale": a.scale,
                       "d_in": a.A.shape[1], "d_out": a.B.shape[0]}
                for name, a in self.adapters.items()
            },
        }
        arrays = {}
        for name, a in self.adapters.items():
            arrays[f"{name}/A"] = a.A.detach().cpu().numpy().astype(np.float32)
            arrays[f"{name}/B"] = a.B.detach().cpu().numpy().astype(np.float32)
        save_checkpoint(path, descriptor, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "AdapterSet":
        descriptor, arrays = load_checkpoint(path)
        if descriptor.get("component") != "lora_adapters":
            raise IntegrityError(f"not an adapter checkpoint: {path}")
        adapters = {}
        for name, meta in descriptor["targets"].items():
            adapter = LoraAdapter(name, int(meta["d_in"]), int(meta["d_out"]),
                                  rank=int(meta["rank"]), alpha=float(meta["alpha"]))
            adapter.scale = float(meta["scale"])
            with torch.no_grad():
                adapter.A.copy_(torch.from_numpy(arrays[f"{name}/A"].copy()))
                adapter.B.copy_(torch.from_numpy(arrays[f"{name}/B"].copy()))
            adapters[name] = adapter
        return cls(adapters)


def create_adapters(model, rank: int = 4, alpha: float = 4.0, seed: int = 0) -> AdapterSet:
    """One adapter per q/k/v/out projection of every cross-attention layer."""
    torch.manual_seed(derive_seed(seed, "lora-init"))
    adapters: dict[str, LoraAdapter] = {}
    for layer_name, attn in model.cross_attention_layers():
        for proj_name, proj in (("to_q", attn.to_q), ("to_k", attn.to_k),
                                ("to_v", attn.to_v), ("to_out", attn.to_out)):
            target = f"{layer_name}/{proj_name}"
            adapters[target] = LoraAdapter(
                target, d_in=proj.in_features, d_out=proj.out_features, rank=rank, alpha=alpha
            )
    return AdapterSet(adapters)
