"""Popularity-aware token allocation between the collaborative and semantic channels."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .layers import mlp
from .numerics import Adam


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def baseline_gate(pop: float, w: float, b: float) -> float:
    """Share of collaborative tokens ``sigmoid(w * log(pop) + b)``."""
    if pop <= 0:
        raise ValueError(f"popularity must be positive, got {pop}")
    return _sigmoid(w * math.log(pop) + b)


def baseline_allocate(g: float, total: int) -> tuple[int, int]:
    """Floor rule: ``L_col = floor(g * total)``, the rest semantic."""
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"gate value {g} outside [0, 1]")
    n_col = min(int(math.floor(g * total)), total)
    return n_col, total - n_col


def hard_allocate(alpha: float, total: int) -> tuple[int, int]:
    """Inference-time rounding (half-up) of ``alpha * total``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    n_col = min(int(math.floor(alpha * total + 0.5)), total)
    return n_col, total - n_col


def hard_allocate_batch(alpha: np.ndarray, total: int) -> np.ndarray:
    """Vectorised :func:`hard_allocate`; returns (N, 2) integer counts."""
    alpha = np.asarray(alpha, dtype=np.float64)
    n_col = np.minimum(np.floor(alpha * total + 0.5).astype(np.int64), total)
    return np.stack([n_col, total - n_col], axis=1)


def soft_masks(alpha: torch.Tensor | float, total: int, tau_m: float = 0.1):
    """Sigmoid masks over slots ``k = 1..total`` for both channels.

    ``alpha`` may be a scalar or a batch; the result has a trailing axis of
    length ``total``.
    """
    alpha = alpha if torch.is_tensor(alpha) else torch.as_tensor(alpha, dtype=torch.float64)
    k = torch.arange(1, total + 1, dtype=alpha.dtype) - 0.5
    col = torch.sigmoid((alpha[..., None] * total - k) / tau_m)
    sem = torch.sigmoid(((1 - alpha)[..., None] * total - k) / tau_m)
    return col, sem


class Router(nn.Module):
    """Shallow MLP from item features to two logits; ``alpha`` is the collaborative share."""

    def __init__(self, num_features: int = 4, hidden: int = 16, tau_r: float = 1.0):
        super().__init__()
        if tau_r <= 0:
            raise ValueError("tau_r must be positive")
        self.tau_r = tau_r
        self.net = mlp([num_features, hidden, 2])

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return route(self, x)


def route(router: Router, x: torch.Tensor) -> torch.Tensor:
    """``alpha = softmax(logits / tau_r)[col]`` per row of ``x``."""
    z = router.logits(x) / router.tau_r
    return torch.softmax(z, dim=-1)[..., 0]


def load_balance_loss(alpha: torch.Tensor, bands) -> torch.Tensor:
    """Mean over non-empty bands of ``2 * (a^2 + (1 - a)^2)`` for the band mean ``a``.

    Equals 1 exactly when every band averages 0.5.
    """
    alpha = torch.as_tensor(alpha)
    if alpha.numel() == 0:
        raise ValueError("load balancing needs a non-empty batch")
    bands = torch.as_tensor(np.asarray(bands), dtype=torch.long)
    terms = []
    for b in torch.unique(bands):
        mean = alpha[bands == b].mean()
        terms.append(2 * (mean**2 + (1 - mean) ** 2))
    return torch.stack(terms).mean()


def smoothness_loss(alpha: torch.Tensor, counts) -> torch.Tensor:
    """Mean squared difference of ``alpha`` between popularity-adjacent items.

    Items are ordered by ``log(1 + count)`` ascending, ties by position.
    """
    alpha = torch.as_tensor(alpha)
    if alpha.numel() < 2:
        return alpha.new_zeros(())
    key = np.log1p(np.asarray(counts, dtype=np.float64))
    order = torch.as_tensor(np.argsort(key, kind="stable"))
    a = alpha[order]
    return ((a[1:] - a[:-1]) ** 2).mean()


def fit_router_to_gate(router: Router, features: torch.Tensor, target: torch.Tensor, steps: int = 300, lr: float = 0.05) -> float:
    """Warm start: regress ``alpha`` onto a target share such as the baseline gate.

    Returns the final mean squared error.
    """
    opt = Adam([(router, lr)])
    err = float("nan")
    for _ in range(steps):
        loss = ((route(router, features) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        err = float(loss.detach())
    return err


def write_allocations(path, item_ids, alpha: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, a, (c, s) in zip(item_ids, alpha, counts):
            fh.write(f"{item}\t{float(a)!r}\t{int(c)}\t{int(s)}\n")
