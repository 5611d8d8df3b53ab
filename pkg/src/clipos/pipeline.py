"""End-to-end orchestration: episode features, training, evaluation, ablations and sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from . import plotting
from .backbone import Backbone, build_backbone
from .config import RunConfig
from .data import (DatasetSpec, Episode, PreprocessConfig, check_disjoint, labeled_images, load_images,
                   sample_episode, unlabeled_images)
from .errors import ConfigError
from .masking import (combined_scores, discrepancy_partition, ensure_foreground, similarity_map,
                      topk_partition)
from .objective import EpisodeFeatures, TrainResult, train, write_history
from .scoring import MetricsReport, evaluate
from .synthesis import masked_pool
from .textbank import PromptBank, embed_prompts, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_masking", "no_synthesis", "entropy_loss", "topk_masking")
BATCH = 64


def preprocess_for(cfg: RunConfig, backbone: Backbone) -> PreprocessConfig:
    p = cfg.preprocess
    return PreprocessConfig.for_backbone(backbone, image_size=p.image_size,
                                         mean=tuple(p.mean) if p.mean else None,
                                         std=tuple(p.std) if p.std else None,
                                         interpolation=p.interpolation)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}", "variant")
    changes = {
        "full": {},
        "no_masking": {"masking": {"method": "none"}},
        "no_synthesis": {"train": {"use_synthesis": False}},
        "entropy_loss": {"train": {"ood_loss": "entropy"}},
        "topk_masking": {"masking": {"method": "topk"}},
    }[variant]
    return cfg.replace(run_id=f"{cfg.run_id}-{variant}", **changes)


@dataclass
class ImageMasks:
    smap: torch.Tensor
    smap_clip: torch.Tensor
    scores: torch.Tensor
    mask: torch.Tensor


def compute_masks(backbone: Backbone, images, labels, class_embeddings, cfg: RunConfig):
    """Surgery-path patch features and one partition per image."""
    surgery = cfg.surgery
    context = cfg.context if surgery.apply_context else None
    with torch.no_grad():
        feats = backbone.patch_features(images, surgery=surgery.enabled, context=context,
                                        vv=backbone.vv_config(surgery.vv_scale))
        plain = backbone.patch_features(images, surgery=False)
    out = []
    for i, label in enumerate(labels):
        emb = class_embeddings[label]
        smap = similarity_map(feats[i], emb)
        smap_clip = similarity_map(plain[i], emb)
        if cfg.masking.method == "topk":
            k = min(cfg.masking.topk, class_embeddings.shape[0])
            part = topk_partition(plain[i], class_embeddings, int(label), k)
            scores = smap
        else:
            part = discrepancy_partition(smap, smap_clip, surgery.discrepancy)
            scores = combined_scores(smap, smap_clip, surgery.discrepancy)
        part = ensure_foreground(part, scores)
        out.append(ImageMasks(smap, smap_clip, scores, part.mask))
    return feats, out


def extract_episode_features(backbone: Backbone, episode: Episode, cfg: RunConfig,
                             prep: PreprocessConfig) -> EpisodeFeatures:
    paths = [p for p, _ in episode.samples]
    labels = torch.tensor([c for _, c in episode.samples], dtype=torch.long)
    images = load_images(paths, prep)
    if cfg.masking.method == "none":
        with torch.no_grad():
            fg = backbone.encode_image(images)
        return EpisodeFeatures(fg, labels, torch.zeros_like(fg), torch.zeros(len(labels), dtype=torch.bool),
                               list(episode.class_list))
    template = backbone.template_embeddings(episode.class_list)
    feats, masks = compute_masks(backbone, images, labels.tolist(), template, cfg)
    fg, bg, has_bg = [], [], []
    for i, m in enumerate(masks):
        fg.append(masked_pool(feats[i], m.mask))
        if (~m.mask).any():
            bg.append(masked_pool(feats[i], ~m.mask))
            has_bg.append(True)
        else:
            bg.append(torch.zeros_like(fg[-1]))
            has_bg.append(False)
    return EpisodeFeatures(torch.stack(fg), labels, torch.stack(bg), torch.tensor(has_bg),
                           list(episode.class_list))


def id_spec(cfg: RunConfig, split: str) -> DatasetSpec:
    if not cfg.data.id_root:
        raise ConfigError("no ID dataset configured", "data.id_root")
    return DatasetSpec("id", cfg.data.id_root, split=split, role="id")


def make_bank(cfg: RunConfig, backbone: Backbone, class_names) -> PromptBank:
    return PromptBank(backbone, class_names, n_ctx=cfg.train.n_ctx, init_std=cfg.train.ctx_init_std,
                      seed=cfg.seed)


def train_run(cfg: RunConfig, backbone: Backbone | None = None, out_dir=None) -> TrainResult:
    """Episode -> masks -> synthesis -> objective. Writes config, checkpoint and loss history."""
    backbone = backbone or build_backbone(cfg.backbone)
    prep = preprocess_for(cfg, backbone)
    episode = sample_episode(id_spec(cfg, "train"), cfg.data.shots, cfg.seed)
    feats = extract_episode_features(backbone, episode, cfg, prep)
    bank = make_bank(cfg, backbone, episode.class_list)
    result = train(bank, feats, cfg.train, cfg.synthesis)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.yaml")
        save_checkpoint(out / "checkpoint.pt", bank, seed=cfg.seed, config=cfg.to_dict(),
                        episode=[str(p) for p, _ in episode.samples])
        write_history(out / "loss.csv", result.history)
        plotting.loss_curve(result.history, out / "loss.png")
        if cfg.data.dump_outliers and result.outliers:
            for k, o in enumerate(result.outliers):
                o.dump(out / f"outliers_{k}.jsonl")
    return result


@dataclass
class TestSetFeatures:
    id_features: torch.Tensor
    id_labels: torch.Tensor
    class_names: list
    ood: dict


def encode_paths(backbone, paths, prep) -> torch.Tensor:
    chunks = []
    with torch.no_grad():
        for s in range(0, len(paths), BATCH):
            chunks.append(backbone.encode_image(load_images(paths[s:s + BATCH], prep)))
    return torch.cat(chunks)


def encode_test_sets(cfg: RunConfig, backbone: Backbone) -> TestSetFeatures:
    prep = preprocess_for(cfg, backbone)
    samples, classes = labeled_images(id_spec(cfg, "test"))
    if not cfg.data.ood:
        raise ConfigError("no OOD datasets configured", "data.ood")
    ood = {}
    for s in cfg.data.ood:
        spec = DatasetSpec(s.name, s.root, split="test", role="ood")
        check_disjoint(classes, spec)
        ood[s.name] = encode_paths(backbone, unlabeled_images(spec), prep)
    id_feats = encode_paths(backbone, [p for p, _ in samples], prep)
    return TestSetFeatures(id_feats, torch.tensor([c for _, c in samples]), classes, ood)


def evaluate_bank(cfg: RunConfig, bank: PromptBank, tests: TestSetFeatures) -> MetricsReport:
    if list(bank.class_names) != list(tests.class_names):
        raise ConfigError("checkpoint classes differ from the ID test set classes", "data.id_root")
    with torch.no_grad():
        emb = embed_prompts(bank)
    return evaluate(emb, bank.temperature, tests.id_features, tests.id_labels, tests.ood,
                    cfg.scoring.include_unknown)


def eval_run(cfg: RunConfig, checkpoint, backbone: Backbone | None = None, out_dir=None,
             tests: TestSetFeatures | None = None) -> MetricsReport:
    backbone = backbone or build_backbone(cfg.backbone)
    bank, _ = load_checkpoint(checkpoint, backbone)
    report = evaluate_bank(cfg, bank, tests or encode_test_sets(cfg, backbone))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "eval_config.yaml")
        report.write_csv(out / "metrics.csv")
        (out / "metrics.txt").write_text(report.table() + "\n")
    return report


def train_and_eval(cfg: RunConfig, backbone=None, tests=None, out_dir=None):
    backbone = backbone or build_backbone(cfg.backbone)
    tests = tests or encode_test_sets(cfg, backbone)
    result = train_run(cfg, backbone, out_dir)
    report = evaluate_bank(cfg, result.bank, tests)
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "metrics.csv")
        (Path(out_dir) / "metrics.txt").write_text(report.table() + "\n")
    return result, report


def ablate(cfg: RunConfig, variants=VARIANTS, out_dir=None) -> dict:
    backbone = build_backbone(cfg.backbone)
    tests = encode_test_sets(cfg, backbone)
    reports = {}
    for v in variants:
        vcfg = variant_config(cfg, v)
        sub = Path(out_dir) / v if out_dir is not None else None
        _, reports[v] = train_and_eval(vcfg, backbone, tests, sub)
    if out_dir is not None:
        write_table(Path(out_dir) / "ablation.csv", "variant", reports)
        plotting.ablation_bars(reports, Path(out_dir) / "ablation.png")
    return reports


def sweep_beta(cfg: RunConfig, betas, out_dir=None) -> dict:
    """Train and evaluate once per patch-context weight."""
    backbone = build_backbone(cfg.backbone)
    tests = encode_test_sets(cfg, backbone)
    reports = {}
    for b in betas:
        bcfg = cfg.replace(run_id=f"{cfg.run_id}-beta{b:g}", context={"beta_ctx": float(b)})
        _, reports[float(b)] = train_and_eval(bcfg, backbone, tests)
    if out_dir is not None:
        write_table(Path(out_dir) / "sweep_beta.csv", "beta", reports)
        plotting.beta_sweep(reports, Path(out_dir) / "sweep_beta.png")
    return reports


def write_table(path, key, reports: dict) -> Path:
    names = list(next(iter(reports.values())).per_dataset)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, *names, "avg", "id_accuracy"])
        for label, r in reports.items():
            label = f"{label:g}" if isinstance(label, float) else label
            w.writerow([label, *(f"{r.per_dataset[n]:.10f}" for n in names), f"{r.average:.10f}",
                        f"{r.id_accuracy:.10f}"])
    return Path(path)


def mask_images(cfg: RunConfig, paths, class_name, checkpoint=None, out_dir=".", backbone=None):
    """Mask PNG, score sidecar and heatmap figure per image."""
    backbone = backbone or build_backbone(cfg.backbone)
    prep = preprocess_for(cfg, backbone)
    if checkpoint is not None:
        bank, _ = load_checkpoint(checkpoint, backbone)
        names = bank.class_names
        with torch.no_grad():
            embeddings = embed_prompts(bank)[:bank.num_id_classes]
    else:
        names = [class_name]
        embeddings = backbone.template_embeddings(names)
    if class_name not in names:
        raise ConfigError(f"class {class_name!r} not in checkpoint classes {names}", "class")
    label = names.index(class_name)
    images = load_images(paths, prep)
    _, masks = compute_masks(backbone, images, [label] * len(paths), embeddings, cfg)
    from .masking import RegionPartition, export_mask, write_scores

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cell = backbone.image_size // backbone.grid[0]
    written = []
    for path, img, m in zip(paths, images, masks):
        stem = Path(path).stem
        export_mask(out / f"{stem}_mask.png", RegionPartition(m.mask), cell)
        write_scores(out / f"{stem}_scores.txt", smap=m.smap, smap_clip=m.smap_clip, combined=m.scores)
        plotting.mask_panel(img, prep, m, out / f"{stem}_heatmap.png", title=class_name)
        written.append(out / f"{stem}_mask.png")
    return written
