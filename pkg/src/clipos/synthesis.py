"""Foreground pooling and cross-class mixup of pooled features into synthetic outliers."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import l2_normalize
from .errors import ConfigError, InputContractError

log = logging.getLogger(__name__)


@dataclass
class LambdaPolicy:
    """``uniform`` draws each pair's mixing weight from [low, high]; ``fixed`` uses ``value``."""

    kind: str = "uniform"
    low: float = 0.4
    high: float = 0.6
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed"):
            raise ConfigError(f"must be 'uniform' or 'fixed', got {self.kind!r}", "kind")
        if not 0 <= self.low <= self.high <= 1:
            raise ConfigError("need 0 <= low <= high <= 1", "low")
        if not 0 <= self.value <= 1:
            raise ConfigError("must lie in [0, 1]", "value")

    def draw(self, n: int, generator: torch.Generator | None, dtype=torch.float64) -> torch.Tensor:
        if self.kind == "fixed":
            return torch.full((n,), float(self.value), dtype=dtype)
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        return (self.low + (self.high - self.low) * u).to(dtype)


@dataclass
class SyntheticOutliers:
    """Row ``r`` is ``lambdas[r] * parent a + (1 - lambdas[r]) * parent b``."""

    raw: torch.Tensor
    lambdas: torch.Tensor
    class_a: torch.Tensor
    class_b: torch.Tensor

    @property
    def vectors(self) -> torch.Tensor:
        return l2_normalize(self.raw) if len(self) else self.raw

    def __len__(self):
        return self.raw.shape[0]

    def dump(self, path) -> Path:
        """JSON-lines provenance log: one record per outlier."""
        path = Path(path)
        with path.open("w") as fh:
            for vec, lam, a, b in zip(self.raw.tolist(), self.lambdas.tolist(),
                                      self.class_a.tolist(), self.class_b.tolist()):
                fh.write(json.dumps({"class_a": a, "class_b": b, "lambda": lam, "vector": vec}) + "\n")
        return path


def masked_pool(patches: torch.Tensor, region) -> torch.Tensor:
    """Mean of the patch embeddings inside ``region``, L2-normalized.

    ``region`` is a boolean (rows, cols) mask or an iterable of (i, j) cells.
    """
    if isinstance(region, torch.Tensor):
        mask = region.to(torch.bool)
        if mask.shape != patches.shape[:2]:
            raise InputContractError(f"region mask {tuple(mask.shape)} != grid {tuple(patches.shape[:2])}")
        cells = patches[mask]
    else:
        cells = list(region)
        if cells:
            rows, cols = zip(*cells)
            cells = patches[list(rows), list(cols)]
    if len(cells) == 0:
        raise InputContractError("cannot pool an empty region")
    return l2_normalize(cells.mean(dim=0))


def cross_class_pairs(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """All ordered sample pairs (i, j) whose labels differ."""
    labels = torch.as_tensor(labels)
    diff = labels[:, None] != labels[None, :]
    i, j = diff.nonzero(as_tuple=True)
    return i, j


def synthesize_outliers(features: torch.Tensor, labels, policy: LambdaPolicy,
                        generator: torch.Generator | None = None) -> SyntheticOutliers:
    """Mix every ordered cross-class pair of pooled foreground features."""
    labels = torch.as_tensor(labels)
    i, j = cross_class_pairs(labels)
    if len(i) == 0:
        log.warning("fewer than two classes in batch; no outliers synthesized")
        empty = features.new_zeros((0, features.shape[-1]))
        idx = torch.zeros(0, dtype=torch.long)
        return SyntheticOutliers(empty, features.new_zeros(0), idx, idx)
    lam = policy.draw(len(i), generator, dtype=features.dtype)
    raw = lam[:, None] * features[i] + (1 - lam[:, None]) * features[j]
    return SyntheticOutliers(raw, lam, labels[i], labels[j])
