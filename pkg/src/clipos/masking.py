"""Similarity maps and foreground/background partitions of the patch grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputContractError

log = logging.getLogger(__name__)

THRESHOLD = 0.5
DISCREPANCY = 0.1


@dataclass(frozen=True)
class RegionPartition:
    """Boolean ``mask`` over the grid; True cells form the foreground J."""

    mask: torch.Tensor

    @property
    def shape(self):
        return tuple(self.mask.shape)

    @property
    def foreground(self) -> set[tuple[int, int]]:
        return {tuple(ij) for ij in self.mask.nonzero().tolist()}

    @property
    def background(self) -> set[tuple[int, int]]:
        return {tuple(ij) for ij in (~self.mask).nonzero().tolist()}


def normalize_map(raw: torch.Tensor) -> torch.Tensor:
    """Min-max to [0, 1]; a constant map becomes 0.5 everywhere."""
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return torch.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def similarity_map(patches: torch.Tensor, class_embedding: torch.Tensor) -> torch.Tensor:
    """Per-cell cosine similarity to ``class_embedding``, min-max normalized."""
    if patches.dim() != 3:
        raise InputContractError(f"expected a (rows, cols, dim) grid, got {tuple(patches.shape)}")
    if patches.shape[-1] != class_embedding.shape[-1]:
        raise InputContractError("patch and class embedding dimensions differ")
    raw = F.cosine_similarity(patches, class_embedding.to(patches.dtype).expand_as(patches), dim=-1)
    return normalize_map(raw)


def clip_similarity_map(backbone, image: torch.Tensor, class_embedding: torch.Tensor) -> torch.Tensor:
    """Similarity map from the unmodified backbone path (original attention, no context)."""
    with torch.no_grad():
        feats = backbone.patch_features(image, surgery=False)
    return similarity_map(feats, class_embedding)


def surgery_similarity_map(backbone, image, class_embedding, context=None, vv=None) -> torch.Tensor:
    with torch.no_grad():
        feats = backbone.patch_features(image, surgery=True, context=context, vv=vv)
    return similarity_map(feats, class_embedding)


def combined_scores(smap, smap_clip, coef=DISCREPANCY) -> torch.Tensor:
    if smap.shape != smap_clip.shape:
        raise InputContractError(f"map shapes differ: {tuple(smap.shape)} vs {tuple(smap_clip.shape)}")
    return smap + (smap - smap_clip) * coef


def threshold_partition(smap: torch.Tensor, threshold=THRESHOLD) -> RegionPartition:
    return RegionPartition(smap > threshold)


def discrepancy_partition(smap, smap_clip, coef=DISCREPANCY, threshold=THRESHOLD) -> RegionPartition:
    return RegionPartition(combined_scores(smap, smap_clip, coef) > threshold)


def ensure_foreground(partition: RegionPartition, scores: torch.Tensor) -> RegionPartition:
    """Promote the single best-scoring cell when J came out empty."""
    if partition.mask.any():
        return partition
    log.warning("empty foreground after thresholding; falling back to the top-scoring cell")
    mask = torch.zeros_like(partition.mask)
    mask.view(-1)[int(scores.reshape(-1).argmax())] = True
    return RegionPartition(mask)


def topk_partition(patches, embeddings, true_class: int, k: int) -> RegionPartition:
    """Cells whose similarity ranks the true class within the top ``k`` of the ID classes.

    ``embeddings`` holds the M ID class rows only.
    """
    m = embeddings.shape[0]
    if not 1 <= k <= m:
        raise InputContractError(f"K must lie in [1, {m}], got {k}")
    if not 0 <= true_class < m:
        raise InputContractError(f"true class {true_class} outside [0, {m})")
    sims = F.normalize(patches, dim=-1) @ F.normalize(embeddings.to(patches.dtype), dim=-1).T
    better = (sims > sims[..., true_class:true_class + 1]).sum(dim=-1)
    return RegionPartition(better < k)


def export_mask(path, partition: RegionPartition, cell_size: int = 1) -> Path:
    """8-bit grayscale PNG, 255 for foreground cells and 0 for background."""
    from PIL import Image

    arr = partition.mask.cpu().numpy().astype(np.uint8) * 255
    arr = np.kron(arr, np.ones((cell_size, cell_size), dtype=np.uint8))
    path = Path(path)
    Image.fromarray(arr).save(path)
    return path


def write_scores(path, **maps) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for name, grid in maps.items():
            fh.write(f"# {name}\n")
            for row in grid.cpu().tolist():
                fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    return path
