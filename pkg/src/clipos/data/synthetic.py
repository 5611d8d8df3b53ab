"""Gaussian-cluster images for the toy backbone.

Each image is a latent patch grid rendered back to pixels through the toy
patch embedding: a rectangular foreground block carries the class concept,
the remaining cells a shared background concept. Class concepts are the toy
text encoder's word embeddings tilted by a class-specific random direction
(``skew``) plus a shared domain shift, so zero-shot alignment is partial and
prompt learning has something to fix. Near OOD blends two ID concepts, far
OOD points in a random direction; both sit off the ID clusters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError
from .datasets import write_manifest

ID_NAMES = ["crimson", "teal", "amber", "violet", "olive", "coral", "indigo", "ochre", "jade", "slate"]


@dataclass
class SyntheticConfig:
    n_classes: int = 3
    train_per_class: int = 5
    test_per_class: int = 100
    ood_per_set: int = 150
    fg_amp: float = 3.0
    bg_amp: float = 2.5
    shift: float = 0.5
    skew: float = 1.5
    noise: float = 0.6
    pixel_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(ID_NAMES):
            raise ConfigError(f"must lie in [2, {len(ID_NAMES)}]", "n_classes")


def _unit(v):
    return v / v.norm()


class SyntheticWorld:
    """Concept vectors and an image sampler tied to one toy backbone."""

    def __init__(self, backbone, cfg: SyntheticConfig):
        self.backbone = backbone
        self.cfg = cfg
        self.gen = torch.Generator().manual_seed(cfg.seed)
        dim = backbone.token_dim
        self.class_names = ID_NAMES[:cfg.n_classes]
        self.shift = cfg.shift * _unit(torch.randn(dim, generator=self.gen, dtype=torch.float64))
        self.background = cfg.bg_amp * _unit(torch.randn(dim, generator=self.gen, dtype=torch.float64))
        words = torch.stack([_unit(backbone.word_embedding(n)) for n in self.class_names])
        # class-specific tilt away from the word embedding: zero-shot prompts are only partly aligned
        tilt = torch.randn(cfg.n_classes, dim, generator=self.gen, dtype=torch.float64)
        self.directions = torch.stack([_unit(w + cfg.skew * _unit(t)) for w, t in zip(words, tilt)])
        self.concepts = torch.stack([self._concept(d) for d in self.directions])

    def _concept(self, direction):
        return self.cfg.fg_amp * _unit(direction) + self.shift

    def near_concept(self):
        """Blend of two distinct ID words: an outlier that sits between ID classes."""
        a, b = torch.randperm(self.cfg.n_classes, generator=self.gen)[:2].tolist()
        lam = 0.3 + 0.4 * float(torch.rand(1, generator=self.gen, dtype=torch.float64))
        return self._concept(lam * self.directions[a] + (1 - lam) * self.directions[b])

    def far_concept(self):
        return self._concept(torch.randn(self.backbone.token_dim, generator=self.gen, dtype=torch.float64))

    def image(self, concept) -> torch.Tensor:
        rows, cols = self.backbone.grid
        dim = self.backbone.token_dim
        g = self.gen
        h = int(torch.randint(max(1, rows // 2), rows, (1,), generator=g)) if rows > 1 else 1
        w = int(torch.randint(max(1, cols // 2), cols, (1,), generator=g)) if cols > 1 else 1
        top = int(torch.randint(0, rows - h + 1, (1,), generator=g))
        left = int(torch.randint(0, cols - w + 1, (1,), generator=g))
        latent = self.background.expand(rows, cols, dim).clone()
        latent[top:top + h, left:left + w] = concept
        latent += self.cfg.noise * torch.randn(rows, cols, dim, generator=g, dtype=torch.float64) / np.sqrt(dim)
        img = self.backbone.render(latent)
        return img + self.cfg.pixel_noise * torch.randn(img.shape, generator=g, dtype=torch.float64)


def generate_synthetic(backbone, out, cfg: SyntheticConfig | None = None) -> dict:
    """Write ``id/`` (train+test), ``ood_near/`` and ``ood_far/`` under ``out``; returns their roots."""
    cfg = cfg or SyntheticConfig()
    out = Path(out)
    world = SyntheticWorld(backbone, cfg)

    def save(path: Path, img):
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, img.numpy())

    id_root = out / "id"
    for split, count in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        for name, concept in zip(world.class_names, world.concepts):
            for k in range(count):
                save(id_root / split / name / f"{k:04d}.npy", world.image(concept))
    write_manifest(id_root, "synthetic-id", world.class_names)

    roots = {"id": id_root}
    for set_name, make in (("ood_near", world.near_concept), ("ood_far", world.far_concept)):
        root = out / set_name
        for k in range(cfg.ood_per_set):
            save(root / "test" / f"{k:04d}.npy", world.image(make()))
        write_manifest(root, set_name, [])
        roots[set_name] = root
    return roots
