"""Cross-channel alignment of reconstructed embeddings with an in-batch InfoNCE loss."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .quantize import RqVae, rq_decode


class ProjectionHead(nn.Module):
    """Linear -> ReLU -> Linear into the shared space."""

    def __init__(self, input_dim: int, shared_dim: int = 64, hidden: int | None = None):
        super().__init__()
        hidden = hidden or shared_dim
        self.net = nn.Sequential(nn.Linear(input_dim, hidden), nn.ReLU(), nn.Linear(hidden, shared_dim))

    def forward(self, x):
        return self.net(x)


def info_nce(anchors: torch.Tensor, candidates: torch.Tensor, temperature: float = 0.1, symmetric: bool = False) -> torch.Tensor:
    """Mean ``-log softmax`` of the diagonal of the cosine-similarity matrix.

    Row ``i`` of ``candidates`` is the positive for anchor ``i``; every other
    row in the batch is a negative.
    """
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 items")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a_norm = anchors.norm(dim=-1)
    c_norm = candidates.norm(dim=-1)
    if (a_norm == 0).any() or (c_norm == 0).any():
        raise ValueError("zero-norm projection: cosine similarity undefined")
    sim = (anchors / a_norm[:, None]) @ (candidates / c_norm[:, None]).T
    target = torch.arange(n)
    loss = F.cross_entropy(sim / temperature, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(sim.T / temperature, target))
    return loss


def similarity_nce(sim: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """InfoNCE from a precomputed similarity matrix (positives on the diagonal)."""
    return F.cross_entropy(sim / temperature, torch.arange(sim.shape[0]))


def cca_loss(sem_codes, col_codes, sem_model: RqVae, col_model: RqVae,
             sem_head: ProjectionHead, col_head: ProjectionHead,
             temperature: float = 0.1, symmetric: bool = False) -> torch.Tensor:
    """Alignment loss over a batch of items given both channels' codes.

    Anchors are semantic reconstructions, positives and negatives the
    collaborative reconstructions of the same batch.
    """
    anchors = sem_head(rq_decode(sem_model, sem_codes))
    candidates = col_head(rq_decode(col_model, col_codes))
    return info_nce(anchors, candidates, temperature, symmetric)


def cca_loss_from_recon(sem_recon: torch.Tensor, col_recon: torch.Tensor,
                        sem_head: ProjectionHead, col_head: ProjectionHead,
                        temperature: float = 0.1, symmetric: bool = False) -> torch.Tensor:
    return info_nce(sem_head(sem_recon), col_head(col_recon), temperature, symmetric)
