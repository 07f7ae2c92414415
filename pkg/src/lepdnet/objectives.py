"""Diagnosis, segmentation and total losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import LABELS
from .errors import ConfigError, DomainError


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be nonnegative, got alpha={self.alpha}, beta={self.beta}")


def class_prior(label_indices: Sequence[int], n_classes: int = len(LABELS), kind: str = "empirical") -> np.ndarray:
    """Empirical label frequencies (or the uniform distribution)."""
    if kind == "uniform":
        return np.full(n_classes, 1.0 / n_classes)
    if kind != "empirical":
        raise ConfigError(f"smooth_prior must be 'empirical' or 'uniform', got {kind!r}")
    counts = np.bincount(np.asarray(label_indices, dtype=np.int64), minlength=n_classes).astype(np.float64)
    if counts.sum() == 0:
        raise ConfigError("cannot build a class prior from zero labels")
    return counts / counts.sum()


def smoothed_targets(labels: torch.Tensor, prior, eps: float) -> torch.Tensor:
    if not 0.0 <= eps < 1.0:
        raise DomainError(f"eps must lie in [0, 1), got {eps}")
    prior = torch.as_tensor(np.asarray(prior), dtype=torch.float64)
    n_classes = prior.shape[0]
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label index outside [0, {n_classes})")
    onehot = F.one_hot(labels.long(), n_classes).to(torch.float64)
    return (1.0 - eps) * onehot + eps * prior


def diagnosis_loss(logits: torch.Tensor, labels, prior, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy against targets smoothed toward ``prior``; batch mean."""
    targets = smoothed_targets(labels, prior, eps).to(logits.dtype)
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def dice_loss(seg_prob: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p m) + s) / (sum p + sum m + s)`` per sample, averaged.

    Accepts a single ``h x w`` map or a batch whose leading dim is the sample.
    """
    if seg_prob.shape != mask.shape:
        raise ConfigError(f"prediction {tuple(seg_prob.shape)} and mask {tuple(mask.shape)} differ")
    if smooth <= 0:
        raise ConfigError(f"dice smoothing must be > 0, got {smooth}")
    if seg_prob.dim() == 2:
        seg_prob, mask = seg_prob[None], mask[None]
    p = seg_prob.flatten(1)
    m = mask.flatten(1).to(p.dtype)
    dice = (2 * (p * m).sum(1) + smooth) / (p.sum(1) + m.sum(1) + smooth)
    return (1.0 - dice).mean()


def total_loss(l_dia, l_seg, l_d, weights: LossWeights):
    return l_dia + weights.alpha * l_seg + weights.beta * l_d
