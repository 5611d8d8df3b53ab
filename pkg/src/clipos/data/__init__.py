from .datasets import (DatasetSpec, Episode, Manifest, PreprocessConfig, check_disjoint, labeled_images,
                       load_image, load_images, load_manifest, sample_episode, unlabeled_images,
                       write_manifest)
from .convert import convert_cifar
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "DatasetSpec", "Episode", "Manifest", "PreprocessConfig", "SyntheticConfig", "check_disjoint",
    "convert_cifar", "generate_synthetic", "labeled_images", "load_image", "load_images",
    "load_manifest", "sample_episode", "unlabeled_images", "write_manifest",
]
