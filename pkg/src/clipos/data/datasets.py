"""Folder-per-class datasets described by a ``manifest.yaml``, episodes and preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from ..errors import ConfigError, DataError, ResolutionError

MANIFEST = "manifest.yaml"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".npy"}


@dataclass
class DatasetSpec:
    name: str
    root: str
    split: str = "train"
    role: str = "id"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"must be 'train' or 'test', got {self.split!r}", "split")
        if self.role not in ("id", "ood"):
            raise ConfigError(f"must be 'id' or 'ood', got {self.role!r}", "role")


@dataclass
class Episode:
    """``shots`` images per class; ``samples`` are ``(path, class_index)`` with 0-based indices."""

    shots: int
    class_list: list
    samples: list
    seed: int


@dataclass
class PreprocessConfig:
    image_size: int
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    interpolation: str = "bicubic"

    def __post_init__(self):
        if int(self.image_size) < 1:
            raise ConfigError("must be >= 1", "image_size")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("mean and std need three entries with std > 0", "std")
        if self.interpolation not in ("bicubic", "bilinear", "nearest"):
            raise ConfigError(f"unsupported interpolation {self.interpolation!r}", "interpolation")

    @classmethod
    def for_backbone(cls, backbone, **overrides):
        base = dict(image_size=backbone.image_size, mean=tuple(backbone.mean), std=tuple(backbone.std))
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass
class Manifest:
    name: str
    root: Path
    classes: list = field(default_factory=list)
    splits: dict = field(default_factory=lambda: {"train": "train", "test": "test"})

    def split_dir(self, split: str) -> Path:
        return self.root / self.splits.get(split, split)


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / MANIFEST
    if not root.is_dir():
        raise ResolutionError(f"dataset root not found: {root}")
    if not path.is_file():
        return Manifest(name=root.name, root=root)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    splits = {"train": "train", "test": "test", **(raw.get("splits") or {})}
    return Manifest(name=raw.get("name", root.name), root=root,
                    classes=list(raw.get("classes") or []), splits=splits)


def write_manifest(root, name, classes, splits=None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    body = {"name": name, "classes": list(classes), "splits": splits or {"train": "train", "test": "test"}}
    path = root / MANIFEST
    path.write_text(yaml.safe_dump(body, sort_keys=False))
    return path


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def labeled_images(spec: DatasetSpec) -> tuple[list, list[str]]:
    """``[(path, class_index)]`` for an ID split, plus the ordered class list."""
    man = load_manifest(spec.root)
    if not man.classes:
        raise DataError(f"ID dataset {spec.name!r} has no class list in {Path(spec.root) / MANIFEST}")
    split = man.split_dir(spec.split)
    if not split.is_dir():
        raise ResolutionError(f"missing split directory for {spec.name!r}: {split}")
    samples = []
    for idx, cls in enumerate(man.classes):
        samples += [(p, idx) for p in _images_in(split / cls)]
    return samples, man.classes


def unlabeled_images(spec: DatasetSpec) -> list[Path]:
    """Every image of an OOD set; its labels are never read."""
    man = load_manifest(spec.root)
    split = man.split_dir(spec.split)
    images = _images_in(split if split.is_dir() else man.root)
    if not images:
        raise DataError(f"no images found for dataset {spec.name!r} under {man.root}")
    return images


def check_disjoint(id_classes, ood_spec: DatasetSpec):
    overlap = set(id_classes) & set(load_manifest(ood_spec.root).classes)
    if overlap:
        raise DataError(f"OOD set {ood_spec.name!r} shares classes with the ID set: {sorted(overlap)}")


def sample_episode(spec: DatasetSpec, shots: int, seed: int) -> Episode:
    """Per class, in manifest order, the first ``shots`` of a PCG64 permutation of the sorted files."""
    if spec.role != "id":
        raise DataError(f"episodes are drawn from ID data only; {spec.name!r} has role {spec.role!r}")
    if shots < 1:
        raise ConfigError("must be >= 1", "shots")
    samples, classes = labeled_images(spec)
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = []
    for idx, cls in enumerate(classes):
        paths = [p for p, c in samples if c == idx]
        if len(paths) < shots:
            raise DataError(f"class {cls!r} has {len(paths)} images, fewer than shots={shots}")
        order = rng.permutation(len(paths))[:shots]
        picked += [(paths[i], idx) for i in order]
    return Episode(shots=shots, class_list=list(classes), samples=picked, seed=seed)


def load_image(path, prep: PreprocessConfig) -> torch.Tensor:
    """``(3, S, S)`` normalized tensor. ``.npy`` files hold float CHW (or HWC) arrays."""
    path = Path(path)
    if not path.is_file():
        raise ResolutionError(f"image not found: {path}")
    size = int(prep.image_size)
    if path.suffix.lower() == ".npy":
        try:
            arr = np.load(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot decode {path}: {exc}") from exc
        if arr.ndim != 3 or 3 not in (arr.shape[0], arr.shape[-1]):
            raise DataError(f"{path}: expected a 3-channel array, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
        if x.shape[0] != 3:
            x = x.permute(2, 0, 1)
        if tuple(x.shape[1:]) != (size, size):
            x = torch.nn.functional.interpolate(x[None], size=(size, size), mode="bilinear",
                                                align_corners=False)[0]
    else:
        from PIL import Image, UnidentifiedImageError

        resample = {"bicubic": Image.BICUBIC, "bilinear": Image.BILINEAR, "nearest": Image.NEAREST}
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                w, h = im.size
                scale = size / min(w, h)
                nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
                im = im.resize((nw, nh), resample[prep.interpolation])
                left, top = (nw - size) // 2, (nh - size) // 2
                im = im.crop((left, top, left + size, top + size))
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode {path}: {exc}") from exc
        x = torch.from_numpy(arr).permute(2, 0, 1)
    mean = torch.tensor(prep.mean, dtype=x.dtype)[:, None, None]
    std = torch.tensor(prep.std, dtype=x.dtype)[:, None, None]
    return (x - mean) / std


def load_images(paths, prep: PreprocessConfig) -> torch.Tensor:
    return torch.stack([load_image(p, prep) for p in paths])
