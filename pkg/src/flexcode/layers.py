"""Small building blocks shared by the sequence encoder and the generator."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def mlp(dims: list[int], act=nn.ReLU) -> nn.Sequential:
    """Affine layers with ``act`` between them (none after the last)."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None, past=None, return_kv: bool = False):
        """Causal attention over ``x``; with ``past = (k, v, pad)`` the queries
        also attend to cached keys/values of an earlier prefix."""
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.view(b, t, h, d // h).transpose(1, 2) for z in (q, k, v))
        new_k, new_v = k, v
        blocked = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1).expand(b, 1, t, t)
        if pad_mask is not None:
            # pad_mask: (b, t) True where the key is padding
            blocked = blocked | pad_mask[:, None, None, :]
        if past is not None:
            pk, pv, ppad = past
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
            blocked = torch.cat([ppad[:, None, None, :].expand(b, 1, t, -1), blocked], dim=-1)
        # a query whose keys are all blocked would softmax over nothing
        blocked = blocked & ~blocked.all(dim=-1, keepdim=True)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        scores = scores.masked_fill(blocked, float("-inf"))
        att = F.softmax(scores, dim=-1)
        y = self.out((att @ v).transpose(1, 2).reshape(b, t, d))
        return (y, (new_k, new_v)) if return_kv else y


class Block(nn.Module):
    """Pre-norm transformer block with causal attention and a GELU feed-forward."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None, past=None, return_kv=False):
        a = self.attn(self.ln1(x), pad_mask, past, return_kv)
        a, kv = a if return_kv else (a, None)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.ln2(x)))
        return (x, kv) if return_kv else x
