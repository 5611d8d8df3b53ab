"""Unknown-aware losses and the prompt-context training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputContractError, NumericError
from .synthesis import LambdaPolicy, SyntheticOutliers, synthesize_outliers
from .textbank import PromptBank, embed_prompts, similarity

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.002
    batch_size: int = 8
    beta_loss: float = 1.0
    seed: int = 0
    momentum: float = 0.0
    n_ctx: int = 16
    ctx_init_std: float = 0.02
    ood_loss: str = "unknown"
    use_synthesis: bool = True
    use_background: bool = True

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError("must be >= 1", "epochs")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", "learning_rate")
        if int(self.batch_size) < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if not self.beta_loss >= 0:
            raise ConfigError("must be >= 0", "beta_loss")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "momentum")
        if int(self.n_ctx) < 1:
            raise ConfigError("must be >= 1", "n_ctx")
        if self.ood_loss not in ("unknown", "entropy"):
            raise ConfigError(f"must be 'unknown' or 'entropy', got {self.ood_loss!r}", "ood_loss")


@dataclass
class LossReport:
    id_loss: float
    ood_loss: float
    total: float
    beta_loss: float


@dataclass
class EpisodeFeatures:
    """Frozen-backbone features of the few-shot training images.

    ``foreground`` holds one pooled J feature per image, ``background`` one
    pooled R feature (rows where ``has_background`` is False are unused).
    """

    foreground: torch.Tensor
    labels: torch.Tensor
    background: torch.Tensor
    has_background: torch.Tensor
    class_names: list = field(default_factory=list)

    def __len__(self):
        return self.labels.shape[0]


def _check_targets(embeddings, targets):
    m = embeddings.shape[0] - 1
    targets = torch.as_tensor(targets, dtype=torch.long)
    if ((targets < 0) | (targets >= m)).any():
        raise InputContractError(f"ID targets must lie in [0, {m}); index {m} is the unknown prompt")
    return targets


def id_loss_from_similarities(sims, targets, tau) -> torch.Tensor:
    """Cross-entropy over all M+1 temperature-scaled similarities."""
    sims = torch.as_tensor(sims)
    single = sims.dim() == 1
    logits = (sims[None] if single else sims) / tau
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    out = F.cross_entropy(logits, targets, reduction="none")
    return out[0] if single else out


def ood_loss_from_similarities(sims, tau) -> torch.Tensor:
    """Cross-entropy toward the last (unknown) column."""
    sims = torch.as_tensor(sims)
    single = sims.dim() == 1
    logits = (sims[None] if single else sims) / tau
    targets = torch.full((logits.shape[0],), logits.shape[1] - 1, dtype=torch.long)
    out = F.cross_entropy(logits, targets, reduction="none")
    return out[0] if single else out


def negative_entropy(probs) -> torch.Tensor:
    probs = torch.as_tensor(probs)
    return torch.where(probs > 0, probs * probs.log(), torch.zeros_like(probs)).sum(dim=-1)


def id_loss(feature, embeddings, true_class, tau) -> torch.Tensor:
    single = feature.dim() == 1
    targets = _check_targets(embeddings, [true_class] if single else true_class)
    out = id_loss_from_similarities(similarity(feature, embeddings), targets, tau)
    return out


def ood_loss(feature, embeddings, tau) -> torch.Tensor:
    return ood_loss_from_similarities(similarity(feature, embeddings), tau)


def entropy_max_loss(feature, id_embeddings, tau) -> torch.Tensor:
    """Negative Shannon entropy of the softmax over the M ID classes."""
    logits = similarity(feature, id_embeddings) / tau
    return (logits.softmax(-1) * logits.log_softmax(-1)).sum(-1)


def batch_loss(embeddings, fg, labels, ood_feats, cfg: TrainConfig, tau):
    """Mean ID term plus ``beta_loss`` times the mean OOD term over ``ood_feats``."""
    l_id = id_loss(fg, embeddings, labels, tau).mean()
    if ood_feats.shape[0] == 0:
        l_ood = l_id.new_zeros(())
    elif cfg.ood_loss == "unknown":
        l_ood = ood_loss(ood_feats, embeddings, tau).mean()
    else:
        m = embeddings.shape[0] - 1
        # shifted by ln M (same gradient) so the reported term stays nonnegative
        l_ood = (entropy_max_loss(ood_feats, embeddings[:m], tau) + math.log(m)).mean()
    total = l_id + cfg.beta_loss * l_ood
    return total, l_id, l_ood


def ood_features(feats: EpisodeFeatures, idx, cfg: TrainConfig, policy: LambdaPolicy,
                 generator) -> tuple[torch.Tensor, SyntheticOutliers | None]:
    parts, outliers = [], None
    if cfg.use_synthesis:
        outliers = synthesize_outliers(feats.foreground[idx], feats.labels[idx], policy, generator)
        if len(outliers):
            parts.append(outliers.vectors)
    if cfg.use_background:
        keep = idx[feats.has_background[idx]]
        if len(keep):
            parts.append(feats.background[keep])
    if not parts:
        return feats.foreground.new_zeros((0, feats.foreground.shape[1])), outliers
    return torch.cat(parts), outliers


def episode_loss(bank: PromptBank, feats: EpisodeFeatures, cfg: TrainConfig,
                 policy: LambdaPolicy, seed: int = 0) -> torch.Tensor:
    """Total loss over the whole episode as one batch, with a fixed draw of mixing weights."""
    gen = torch.Generator().manual_seed(seed)
    idx = torch.arange(len(feats))
    ood, _ = ood_features(feats, idx, cfg, policy, gen)
    total, _, _ = batch_loss(embed_prompts(bank), feats.foreground, feats.labels, ood, cfg, bank.temperature)
    return total


@dataclass
class TrainResult:
    bank: PromptBank
    history: list
    outliers: list = field(default_factory=list)


def train(bank: PromptBank, feats: EpisodeFeatures, cfg: TrainConfig,
          policy: LambdaPolicy | None = None) -> TrainResult:
    """SGD with cosine decay on the shared context only."""
    if not isinstance(feats, EpisodeFeatures):
        raise InputContractError("train() accepts episode features only")
    missing = set(range(bank.num_id_classes)) - set(feats.labels.tolist())
    if missing:
        raise InputContractError(f"episode lacks samples for classes {sorted(missing)}")
    policy = policy or LambdaPolicy()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(feats)
    steps = math.ceil(n / cfg.batch_size)
    opt = torch.optim.SGD([bank.context], lr=cfg.learning_rate, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps)
    history, dumps = [], []
    tau = bank.temperature
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums = [0.0, 0.0, 0.0]
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            ood, outliers = ood_features(feats, idx, cfg, policy, gen)
            total, l_id, l_ood = batch_loss(embed_prompts(bank), feats.foreground[idx],
                                            feats.labels[idx], ood, cfg, tau)
            if not torch.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, step {s + 1}: "
                                   f"id={float(l_id)}, ood={float(l_ood)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            sums[0] += float(l_id.detach())
            sums[1] += float(l_ood.detach())
            sums[2] += float(total.detach())
            if epoch == cfg.epochs - 1 and outliers is not None:
                dumps.append(outliers)
        id_mean, ood_mean = sums[0] / steps, sums[1] / steps
        report = LossReport(id_mean, ood_mean, id_mean + cfg.beta_loss * ood_mean, cfg.beta_loss)
        log.info("epoch %d: id=%.6f ood=%.6f total=%.6f", epoch + 1, report.id_loss,
                 report.ood_loss, report.total)
        history.append(report)
    return TrainResult(bank, history, dumps)


def write_history(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "id_loss", "ood_loss", "total"])
        for i, r in enumerate(history, 1):
            w.writerow([i, f"{r.id_loss:.10f}", f"{r.ood_loss:.10f}", f"{r.total:.10f}"])
    return path
