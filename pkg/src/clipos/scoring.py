"""MCM scoring, AUROC and the evaluation pass over ID and OOD test sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import InputContractError
from .textbank import similarity


def mcm_from_similarities(sims, num_id_classes: int, tau: float, include_unknown=False):
    """Max ID-class softmax probability and its argmax.

    ``sims`` is ``(..., M+1)`` with the unknown prompt last; by default the
    unknown column is dropped before the softmax.
    """
    sims = torch.as_tensor(sims)
    logits = sims / tau
    if not include_unknown:
        logits = logits[..., :num_id_classes]
    probs = logits.softmax(dim=-1)[..., :num_id_classes]
    score, pred = probs.max(dim=-1)
    return score, pred


def mcm_score(feature, embeddings, tau, include_unknown=False):
    """Returns ``(score, predicted_class)`` for one feature or tensors for a batch."""
    m = embeddings.shape[0] - 1
    score, pred = mcm_from_similarities(similarity(feature, embeddings), m, tau, include_unknown)
    if feature.dim() == 1:
        return float(score), int(pred)
    return score, pred


def auroc(scores_id, scores_ood) -> float:
    """P(random ID score > random OOD score), ties counted one half (midrank Mann-Whitney)."""
    a = np.asarray(scores_id, dtype=np.float64).ravel()
    b = np.asarray(scores_ood, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InputContractError("AUROC needs non-empty ID and OOD score lists")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


@dataclass
class MetricsReport:
    per_dataset: dict
    id_accuracy: float
    id_scores: np.ndarray = field(repr=False, default=None)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_dataset.values())))

    def rows(self):
        return [(name, value) for name, value in self.per_dataset.items()] + [("Avg", self.average)]

    def table(self) -> str:
        rows = self.rows()
        width = max(len(n) for n, _ in rows + [("dataset", 0)])
        lines = [f"{'dataset':<{width}}  AUROC", f"{'-' * width}  ------"]
        lines += [f"{name:<{width}}  {100 * v:6.2f}" for name, v in rows]
        lines.append(f"{'ID acc':<{width}}  {100 * self.id_accuracy:6.2f}")
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "auroc"])
            for name, value in self.rows():
                w.writerow([name, f"{value:.10f}"])
        return path


def score_features(features, embeddings, tau, include_unknown=False):
    score, pred = mcm_from_similarities(similarity(features, embeddings), embeddings.shape[0] - 1,
                                        tau, include_unknown)
    return score.detach().cpu().numpy(), pred.detach().cpu().numpy()


def evaluate(embeddings, tau, id_features, id_labels, ood_features: dict, include_unknown=False):
    """Per-OOD-set AUROC, macro average and ID top-1 accuracy from global image features."""
    if not ood_features:
        raise InputContractError("at least one OOD set is required")
    with torch.no_grad():
        id_scores, preds = score_features(id_features, embeddings, tau, include_unknown)
        per = {}
        for name, feats in ood_features.items():
            ood_scores, _ = score_features(feats, embeddings, tau, include_unknown)
            per[name] = auroc(id_scores, ood_scores)
    acc = float(np.mean(preds == np.asarray(id_labels)))
    return MetricsReport(per, acc, id_scores)
