"""Fine-grained pairwise distance learning (training only).

The pair attention matrices come from the token products of the two final
feature maps; their diagonals are compared with cosine similarity.
``Distance`` is ``1 - cos``: positives are pulled to distance 0, negatives
are hinged at ``max(0, 1 - Distance)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cre import attention_weights, to_tokens
from .errors import ConfigError

EPS = 1e-12


@dataclass
class PairWeights:
    w1: torch.Tensor
    w2: torch.Tensor

    @property
    def d1(self) -> torch.Tensor:
        return torch.diagonal(self.w1, dim1=-2, dim2=-1)

    @property
    def d2(self) -> torch.Tensor:
        return torch.diagonal(self.w2, dim1=-2, dim2=-1)


def pairwise_attention(z: torch.Tensor, z_hat: torch.Tensor) -> PairWeights:
    """Accepts token matrices (n, d) / (B, n, d) or feature maps (B, c, h, w)."""
    if z.shape != z_hat.shape:
        raise ConfigError(f"paired features differ in shape: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    if z.dim() == 4:
        z, z_hat = to_tokens(z), to_tokens(z_hat)
    return PairWeights(w1=attention_weights(z_hat, z), w2=attention_weights(z, z_hat))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    num = (a * b).sum(-1)
    den = torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=EPS)
    return num / den


def pair_distance(weights: PairWeights, same_class, literal_similarity: bool = False) -> torch.Tensor:
    """Per-pair D in [0, 1]; ``same_class`` is a bool or a bool tensor."""
    cos = cosine(weights.d1, weights.d2)
    dist = cos if literal_similarity else 1.0 - cos
    same = torch.as_tensor(same_class, dtype=torch.bool, device=cos.device)
    return torch.where(same, dist, torch.clamp(1.0 - dist, min=0.0))


def fpd_loss(z: torch.Tensor, z_hat: torch.Tensor, labels1, labels2, literal_similarity: bool = False) -> torch.Tensor:
    if z.shape[0] == 0:
        raise ConfigError("FPD loss needs a nonempty pair batch")
    labels1 = torch.as_tensor(labels1)
    labels2 = torch.as_tensor(labels2)
    if labels1.shape != labels2.shape or labels1.shape[0] != z.shape[0]:
        raise ConfigError("pair labels must align with the feature batch")
    d = pair_distance(pairwise_attention(z, z_hat), labels1 == labels2, literal_similarity)
    return d.mean()


def sample_partners(labels: np.ndarray, rng: np.random.Generator, balanced: bool = False) -> np.ndarray:
    """Partner index for every sample of a batch; never the sample itself.

    ``balanced`` picks a same-label partner with probability 1/2 whenever
    both kinds of partner exist.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ConfigError("pairing needs at least two samples")
    partners = np.empty(n, dtype=np.int64)
    for i in range(n):
        if balanced:
            others = np.array([j for j in range(n) if j != i])
            same = others[labels[others] == labels[i]]
            diff = others[labels[others] != labels[i]]
            if len(same) and len(diff):
                pool = same if rng.random() < 0.5 else diff
                partners[i] = pool[rng.integers(len(pool))]
                continue
        partners[i] = (i + 1 + rng.integers(n - 1)) % n
    return partners
