"""Denoising-condition construction.

A condition is a row sequence fed to the denoiser's cross-attention: the
prompt embedding block first, then the difficulty embedding block. The
difficulty encoder is the only trained piece here; the prompt embedder is a
frozen seeded lookup standing in for a pretrained text encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import IntegrityError
from .seeds import derive_seed

UNK_TOKEN = "<unk>"

PROVENANCES = ("text_and_difficulty", "difficulty_only", "text_only", "null")


class Vocabulary:
    """Whitespace tokenizer with a fixed token -> id table; unknowns map to id 0."""

    def __init__(self, token_to_id: dict[str, int]):
        if token_to_id.get(UNK_TOKEN) != 0:
            raise ValueError(f"vocabulary must map {UNK_TOKEN!r} to id 0")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("vocabulary ids must be unique")

    @classmethod
    def build(cls, class_names: Sequence[str], extra_tokens: Sequence[str] = ("photo", "of")) -> "Vocabulary":
        tokens = [UNK_TOKEN]
        for word in list(extra_tokens) + [w for name in class_names for w in name.lower().split()]:
            if word not in tokens:
                tokens.append(word)
        return cls({t: i for i, t in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise ValueError("cannot encode empty text")
        return [self.token_to_id.get(w, 0) for w in words]

    def decode(self, token_ids: Sequence[int]) -> str:
        return " ".join(self.id_to_token.get(int(t), UNK_TOKEN) for t in token_ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise IntegrityError(f"cannot load vocabulary from {path}: {exc}") from exc


class PromptEmbedder:
    """Frozen token + position lookup producing L x D prompt embeddings."""

    def __init__(self, vocab: Vocabulary, table: np.ndarray, positional: np.ndarray):
        self.vocab = vocab
        self.table = np.asarray(table, dtype=np.float32)
        self.positional = np.asarray(positional, dtype=np.float32)
        if self.table.shape[0] != len(vocab):
            raise ValueError("embedding table rows must match vocabulary size")
        if self.table.shape[1] != self.positional.shape[1]:
            raise ValueError("token and positional tables must share width")
        self.frozen = True

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    @property
    def max_len(self) -> int:
        return int(self.positional.shape[0])

    @classmethod
    def create(cls, vocab: Vocabulary, dim: int = 64, max_len: int = 16, seed: int = 0) -> "PromptEmbedder":
        rng = np.random.default_rng(derive_seed(seed, "prompt-embedder"))
        table = rng.normal(0.0, 0.25, size=(len(vocab), dim))
        positional = rng.normal(0.0, 0.1, size=(max_len, dim))
        return cls(vocab, table.astype(np.float32), positional.astype(np.float32))

    def save(self, path: str | Path) -> None:
        descriptor = {"component": "prompt_embedder", "dim": self.dim, "max_len": self.max_len,
                      "vocab": self.vocab.token_to_id}
        save_checkpoint(path, descriptor, {"table": self.table, "positional": self.positional})

    @classmethod
    def load(cls, path: str | Path) -> "PromptEmbedder":
        descriptor, arrays = load_checkpoint(path)
        return cls(Vocabulary(descriptor["vocab"]), arrays["table"], arrays["positional"])


def embed_prompt(embedder: PromptEmbedder, tokens: Sequence[int]) -> np.ndarray:
    """Row i = token embedding + positional embedding for slot i."""
    ids = [int(t) for t in tokens]
    if not ids:
        raise ValueError("prompt token list must be non-empty")
    if len(ids) > embedder.max_len:
        raise ValueError(f"prompt length {len(ids)} exceeds max {embedder.max_len}")
    if any(t < 0 or t >= len(embedder.vocab) for t in ids):
        raise ValueError("token id out of vocabulary range")
    return embedder.table[ids] + embedder.positional[: len(ids)]


class DifficultyEncoder(nn.Module):
    """MLP from (difficulty, one-hot class) to `heads` condition vectors.

    Output reshapes to heads x dim; each row joins the prompt block as one
    more cross-attention key/value entry.
    """

    def __init__(self, num_classes: int, heads: int = 50, dim: int = 64,
                 hidden_sizes: tuple[int, ...] | None = None):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if heads < 1 or dim < 1:
            raise ValueError("heads and dim must be >= 1")
        self.num_classes = num_classes
        self.heads = heads
        self.dim = dim
        if hidden_sizes is None:
            hidden_sizes = (4 * (num_classes + 1), 4 * (num_classes + 1))
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        layers: list[nn.Module] = []
        in_features = 1 + num_classes
        for h in self.hidden_sizes:
            layers += [nn.Linear(in_features, h), nn.SiLU()]
            in_features = h
        layers.append(nn.Linear(in_features, heads * dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, d: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if d.ndim != 1 or y.ndim != 1 or d.shape[0] != y.shape[0]:
            raise ValueError("d and y must be 1-D tensors of equal length")
        onehot = torch.nn.functional.one_hot(y.long(), self.num_classes).to(d.dtype)
        x = torch.cat([d[:, None], onehot], dim=1)
        return self.mlp(x).reshape(-1, self.heads, self.dim)

    def descriptor(self) -> dict:
        return {
            "component": "difficulty_encoder",
            "num_classes": self.num_classes,
            "heads": self.heads,
            "dim": self.dim,
            "hidden_sizes": list(self.hidden_sizes),
        }

    def save(self, path: str | Path) -> None:
        arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.state_dict().items()}
        save_checkpoint(path, self.descriptor(), arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DifficultyEncoder":
        descriptor, arrays = load_checkpoint(path)
        enc = cls(
            num_classes=int(descriptor["num_classes"]),
            heads=int(descriptor["heads"]),
            dim=int(descriptor["dim"]),
            hidden_sizes=tuple(descriptor["hidden_sizes"]),
        )
        enc.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        return enc


def create_difficulty_encoder(num_classes: int, heads: int = 50, dim: int = 64,
                              hidden_sizes: tuple[int, ...] | None = None, seed: int = 0) -> DifficultyEncoder:
    torch.manual_seed(derive_seed(seed, "difficulty-encoder"))
    return DifficultyEncoder(num_classes, heads=heads, dim=dim, hidden_sizes=hidden_sizes)


def encode_difficulty(encoder: DifficultyEncoder, d: float, y: int) -> np.ndarray:
    """Evaluate the encoder for one (difficulty, class) pair; returns heads x dim."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"difficulty must be in [0, 1], got {d}")
    if not 0 <= int(y) < encoder.num_classes:
        raise ValueError(f"class index {y} out of range for K={encoder.num_classes}")
    with torch.inference_mode():
        p = next(encoder.parameters())
        out = encoder(torch.tensor([float(d)], dtype=p.dtype), torch.tensor([int(y)]))
    return out[0].numpy().astype(np.float32)


@dataclass
class Condition:
    """Prompt block (rows [0, prompt_len)) followed by the difficulty block."""

    vectors: np.ndarray  # (rows, D) float32
    prompt_len: int
    provenance: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"condition vectors must be 2-D, got shape {self.vectors.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        rows = self.vectors.shape[0]
        if rows < 1:
            raise ValueError("condition must have at least one row")
        if self.provenance == "text_and_difficulty" and not 0 < self.prompt_len < rows:
            raise ValueError("text_and_difficulty requires both blocks non-empty")
        if self.provenance == "text_only" and self.prompt_len != rows:
            raise ValueError("text_only condition must be all prompt rows")
        if self.provenance in ("difficulty_only", "null") and self.prompt_len != 0:
            raise ValueError(f"{self.provenance} condition must have no prompt rows")

    @property
    def width(self) -> int:
        return int(self.vectors.shape[1])

    def prompt_block(self) -> np.ndarray:
        return self.vectors[: self.prompt_len]

    def difficulty_block(self) -> np.ndarray:
        return self.vectors[self.prompt_len :]


def build_condition(prompt_emb: np.ndarray, difficulty_emb: np.ndarray) -> Condition:
    """Row-concatenate prompt block then difficulty block."""
    prompt_emb = np.asarray(prompt_emb, dtype=np.float32)
    difficulty_emb = np.asarray(difficulty_emb, dtype=np.float32)
    if prompt_emb.ndim != 2 or difficulty_emb.ndim != 2:
        raise ValueError("both blocks must be 2-D arrays")
    if prompt_emb.shape[0] and difficulty_emb.shape[0] and prompt_emb.shape[1] != difficulty_emb.shape[1]:
        raise ValueError(
            f"block widths differ: {prompt_emb.shape[1]} vs {difficulty_emb.shape[1]}"
        )
    if difficulty_emb.shape[0] == 0:
        return Condition(vectors=prompt_emb.copy(), prompt_len=prompt_emb.shape[0], provenance="text_only")
    if prompt_emb.shape[0] == 0:
        return build_condition_difficulty_only(difficulty_emb)
    vectors = np.concatenate([prompt_emb, difficulty_emb], axis=0)
    return Condition(vectors=vectors, prompt_len=prompt_emb.shape[0], provenance="text_and_difficulty")


def build_condition_difficulty_only(difficulty_emb: np.ndarray) -> Condition:
    difficulty_emb = np.asarray(difficulty_emb, dtype=np.float32)
    if difficulty_emb.ndim != 2 or difficulty_emb.shape[0] < 1:
        raise ValueError("difficulty block must be a non-empty 2-D array")
    return Condition(vectors=difficulty_emb.copy(), prompt_len=0, provenance="difficulty_only")


def null_condition(dim: int, length: int = 1) -> Condition:
    """All-zero rows; the unconditional branch for guidance training/sampling."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    return Condition(vectors=np.zeros((length, dim), dtype=np.float32), prompt_len=0, provenance="null")
