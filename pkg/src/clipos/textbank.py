"""Prompt bank: M class prompts plus the trailing "unknown" prompt, one shared learnable context."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .backbone import Backbone, l2_normalize
from .errors import ConfigError, DataError, InputContractError, ResolutionError

UNKNOWN = "unknown"
CHECKPOINT_VERSION = 1


class PromptBank(nn.Module):
    """Learnable context vectors shared by every prompt.

    Row ``i < M`` of the embeddings is class ``class_names[i]``; row ``M`` is
    the unknown prompt. Class indices are 0-based throughout the package.
    """

    def __init__(self, backbone: Backbone, class_names, n_ctx=16, init_std=0.02, seed=0):
        super().__init__()
        class_names = list(class_names)
        if not class_names:
            raise ConfigError("class list is empty", "class_names")
        if len(set(class_names)) != len(class_names):
            raise ConfigError("class names must be unique", "class_names")
        if UNKNOWN in class_names:
            raise ConfigError(f"{UNKNOWN!r} is reserved for the unknown prompt", "class_names")
        if n_ctx < 1:
            raise ConfigError("must be >= 1", "n_ctx")
        backbone.check_vocabulary(class_names + [UNKNOWN])
        self.backbone = backbone
        self.class_names = class_names
        gen = torch.Generator().manual_seed(seed)
        ctx = torch.randn(n_ctx, backbone.token_dim, generator=gen, dtype=torch.float64) * init_std
        self.context = nn.Parameter(ctx.to(backbone.dtype))

    @property
    def num_id_classes(self) -> int:
        return len(self.class_names)

    @property
    def unknown_index(self) -> int:
        return len(self.class_names)

    @property
    def prompt_names(self) -> list[str]:
        return self.class_names + [UNKNOWN]

    @property
    def temperature(self) -> float:
        return self.backbone.temperature

    def forward(self) -> torch.Tensor:
        return embed_prompts(self)


def embed_prompts(bank: PromptBank) -> torch.Tensor:
    """(M+1, dim) row-normalized text embeddings, differentiable in ``bank.context``."""
    return l2_normalize(bank.backbone.encode_prompts(bank.context, bank.prompt_names))


def similarity(feature: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of one ``(dim,)`` or many ``(n, dim)`` features against every row."""
    if feature.shape[-1] != embeddings.shape[-1]:
        raise InputContractError(
            f"feature dim {feature.shape[-1]} != embedding dim {embeddings.shape[-1]}")
    return l2_normalize(feature) @ l2_normalize(embeddings).T


def save_checkpoint(path, bank: PromptBank, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "num_id_classes": bank.num_id_classes,
        "token_len": bank.context.shape[0],
        "dim": bank.context.shape[1],
        "class_names": list(bank.class_names),
        "context": bank.context.detach().cpu().clone(),
        **extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, backbone: Backbone):
    """Returns ``(bank, payload)``."""
    path = Path(path)
    if not path.is_file():
        raise ResolutionError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format {payload.get('format_version')!r} in {path}")
    if payload["dim"] != backbone.token_dim:
        raise DataError(f"checkpoint context dim {payload['dim']} != backbone token dim {backbone.token_dim}")
    bank = PromptBank(backbone, payload["class_names"], n_ctx=payload["token_len"])
    with torch.no_grad():
        bank.context.copy_(payload["context"].to(bank.context.dtype))
    return bank, payload
