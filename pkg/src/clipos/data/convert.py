"""Unpack CIFAR-10/100 python-pickle archives into the folder-per-class layout."""

from __future__ import annotations

import pickle
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from ..errors import DataError, ResolutionError
from .datasets import write_manifest

_LAYOUTS = {
    "cifar10": ("batches.meta", b"label_names", b"labels",
                ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5"],
                ["test_batch"]),
    "cifar100": ("meta", b"fine_label_names", b"fine_labels", ["train"], ["test"]),
}


def _unpickle(path: Path):
    try:
        with path.open("rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise DataError(f"cannot read CIFAR batch {path}: {exc}") from exc


def _find_root(src: Path) -> tuple[Path, str]:
    for marker, kind in (("batches.meta", "cifar10"), ("meta", "cifar100")):
        hits = sorted(src.rglob(marker))
        if hits:
            return hits[0].parent, kind
    raise DataError(f"no CIFAR metadata file (batches.meta or meta) under {src}")


def convert_cifar(src, out, name=None, limit_per_class=None) -> Path:
    """Write ``out/{train,test}/<class>/<n>.png`` plus ``out/manifest.yaml``.

    ``src`` may be the extracted directory or the ``.tar.gz`` archive itself.
    """
    from PIL import Image

    src, out = Path(src), Path(out)
    if not src.exists():
        raise ResolutionError(f"CIFAR source not found: {src}")
    with tempfile.TemporaryDirectory() as tmp:
        if src.is_file():
            try:
                with tarfile.open(src) as tar:
                    tar.extractall(tmp, filter="data")
            except tarfile.TarError as exc:
                raise DataError(f"cannot extract {src}: {exc}") from exc
            src = Path(tmp)
        root, kind = _find_root(src)
        meta_file, names_key, labels_key, train_files, test_files = _LAYOUTS[kind]
        classes = [n.decode() for n in _unpickle(root / meta_file)[names_key]]
        for split, files in (("train", train_files), ("test", test_files)):
            counts = dict.fromkeys(range(len(classes)), 0)
            for fname in files:
                if not (root / fname).is_file():
                    raise ResolutionError(f"missing CIFAR batch {root / fname}")
                batch = _unpickle(root / fname)
                data = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
                for img, label in zip(data, batch[labels_key]):
                    if limit_per_class is not None and counts[label] >= limit_per_class:
                        continue
                    target = out / split / classes[label]
                    target.mkdir(parents=True, exist_ok=True)
                    Image.fromarray(img).save(target / f"{counts[label]:05d}.png")
                    counts[label] += 1
    write_manifest(out, name or kind, classes)
    return out
