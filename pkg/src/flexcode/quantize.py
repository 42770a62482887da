"""Residual-quantization autoencoder over item embeddings, one per channel."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import mlp
from .numerics import Adam, DivergenceError, resolve_dtype, seed_everything, stop_gradient

log = logging.getLogger(__name__)


class RqVae(nn.Module):
    """Encoder MLP -> greedy residual quantizer over ``levels`` codebooks -> decoder MLP."""

    def __init__(self, input_dim: int, code_dim: int, codebook_size: int, levels: int,
                 hidden: int = 128, beta: float = 0.25, channel: str = "semantic"):
        super().__init__()
        if codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.channel = channel
        self.beta = beta
        self.encoder = mlp([input_dim, hidden, code_dim])
        self.decoder = mlp([code_dim, hidden, input_dim])
        self.codebooks = nn.Parameter(torch.randn(levels, codebook_size, code_dim) * 0.1)
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def levels(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def code_dim(self) -> int:
        return self.codebooks.shape[2]


def nearest_code(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest codeword per row; ties go to the lowest index."""
    d = (residual * residual).sum(-1, keepdim=True) - 2 * residual @ codebook.T + (codebook * codebook).sum(-1)
    return d.argmin(dim=-1)


@dataclass
class ResidualTrace:
    """Per-level quantities of one greedy pass.

    ``residuals[j]`` is the input to level ``j`` (``residuals[0]`` is the
    encoder output) and ``quantized[j]`` the codeword chosen there.
    """

    residuals: list[torch.Tensor]
    quantized: list[torch.Tensor]

    @property
    def final_residual_norm(self) -> torch.Tensor:
        last = self.residuals[0] - sum(self.quantized)
        return last.norm(dim=-1)


def quantize_latent(model: RqVae, z: torch.Tensor, levels: int | None = None) -> tuple[torch.Tensor, ResidualTrace]:
    """Greedy residual quantization of encoder outputs ``z``.

    The residual passed to the next level subtracts a detached codeword, so
    each codebook is only pulled toward its own level's residuals.
    """
    levels = model.levels if levels is None else levels
    residual = z
    codes, residuals, quantized = [], [], []
    for j in range(levels):
        book = model.codebooks[j]
        idx = nearest_code(stop_gradient(residual), stop_gradient(book))
        q = book[idx]
        codes.append(idx)
        residuals.append(residual)
        quantized.append(q)
        residual = residual - stop_gradient(q)
    return torch.stack(codes, dim=-1), ResidualTrace(residuals, quantized)


@torch.no_grad()
def rq_encode(model: RqVae, embedding: torch.Tensor | np.ndarray, levels: int | None = None):
    """Codes ``(N, levels)`` and the residual trace for a batch of embeddings."""
    x = torch.as_tensor(embedding, dtype=model.codebooks.dtype)
    squeeze = x.dim() == 1
    if squeeze:
        x = x[None]
    codes, trace = quantize_latent(model, model.encoder(x), levels)
    return (codes[0], trace) if squeeze else (codes, trace)


def code_sum(model: RqVae, codes: torch.Tensor) -> torch.Tensor:
    codes = torch.as_tensor(codes, dtype=torch.long)
    if codes.dim() == 1:
        codes = codes[None]
    if codes.shape[-1] > model.levels:
        raise ValueError(f"{codes.shape[-1]} codes given but the model has {model.levels} levels")
    if (codes < 0).any() or (codes >= model.codebook_size).any():
        raise IndexError(f"code index outside [0, {model.codebook_size})")
    levels = torch.arange(codes.shape[-1])
    return model.codebooks[levels, codes].sum(dim=-2)


def rq_decode(model: RqVae, codes) -> torch.Tensor:
    """Decoder applied to the sum of the selected codewords."""
    return model.decoder(code_sum(model, codes))


def rqvae_loss(model: RqVae, batch: torch.Tensor, levels: int | None = None):
    """Reconstruction plus per-level codebook and commitment terms.

    The decoder sees ``z + sg(q - z)`` (straight-through), so its gradient
    reaches the encoder as if quantization were the identity. Returns
    ``(loss, components, codes, recon)``.
    """
    z = model.encoder(batch)
    codes, trace = quantize_latent(model, z, levels)
    q = sum(trace.quantized)
    z_q = z + stop_gradient(q - z)
    recon = model.decoder(z_q)
    rec = ((batch - recon) ** 2).sum(-1).mean()
    codebook_term = batch.new_zeros(())
    commit_term = batch.new_zeros(())
    for r, qj in zip(trace.residuals, trace.quantized):
        codebook_term = codebook_term + ((stop_gradient(r) - qj) ** 2).sum(-1).mean()
        commit_term = commit_term + ((r - stop_gradient(qj)) ** 2).sum(-1).mean()
    loss = rec + codebook_term + model.beta * commit_term
    parts = {"reconstruction": rec, "codebook": codebook_term, "commitment": commit_term}
    return loss, parts, codes, recon


# ---------------------------------------------------------------------------
# training helpers


@torch.no_grad()
def init_codebooks(model: RqVae, data: torch.Tensor, gen: torch.Generator) -> None:
    """Seed each level's codebook with residuals of the data at that level."""
    residual = model.encoder(data)
    k = model.codebook_size
    for j in range(model.levels):
        pick = torch.randint(len(residual), (k,), generator=gen)
        noise = torch.randn(k, model.code_dim, generator=gen, dtype=residual.dtype) * 1e-3
        model.codebooks[j] = residual[pick] + noise
        idx = nearest_code(residual, model.codebooks[j])
        residual = residual - model.codebooks[j][idx]
    model.initialized.fill_(True)


@torch.no_grad()
def reset_dead_codes(model: RqVae, data: torch.Tensor, used: torch.Tensor, gen: torch.Generator) -> int:
    """Move codewords not used in ``used`` (levels, K) onto random level residuals."""
    _, trace = quantize_latent(model, model.encoder(data))
    total = 0
    for j in range(model.levels):
        dead = torch.nonzero(used[j] == 0).flatten()
        if len(dead) == 0:
            continue
        res = trace.residuals[j]
        pick = torch.randint(len(res), (len(dead),), generator=gen)
        scale = res.std() * 0.01 + 1e-6
        model.codebooks[j, dead] = res[pick] + torch.randn(len(dead), model.code_dim, generator=gen, dtype=res.dtype) * scale
        total += len(dead)
    return total


@dataclass
class QuantizerReport:
    losses: list[float]
    reconstruction_mse: float
    perplexity: list[float]
    resets: int


def build_rqvae(input_dim: int, config, channel: str, levels: int | None = None) -> RqVae:
    return RqVae(input_dim, config.d_code, config.codebook_size, levels or config.levels,
                 hidden=config.rq_hidden, beta=config.beta, channel=channel).to(resolve_dtype(config.dtype))


def train_rqvae(vectors: np.ndarray, config, seed: int, channel: str = "semantic", levels: int | None = None):
    """Fit one quantizer on an embedding matrix. Returns ``(model, report)``."""
    gen = seed_everything(seed)
    model = build_rqvae(vectors.shape[1], config, channel, levels)
    data = torch.as_tensor(vectors, dtype=model.codebooks.dtype)
    init_codebooks(model, data, gen)
    opt = Adam([(model, config.rq_lr)])
    losses, resets = [], 0
    n = len(data)
    for epoch in range(config.rq_epochs):
        used = torch.zeros(model.levels, model.codebook_size, dtype=torch.long)
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.rq_batch):
            batch = data[order[start:start + config.rq_batch]]
            loss, _, codes, _ = rqvae_loss(model, batch)
            if not torch.isfinite(loss):
                raise DivergenceError(f"{channel} quantizer loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            for j in range(model.levels):
                used[j] += torch.bincount(codes[:, j], minlength=model.codebook_size)
        losses.append(total / n)
        if config.dead_code_reset and epoch < config.rq_epochs - 1:
            resets += reset_dead_codes(model, data, used, gen)
    usage = codebook_usage(model, vectors)
    return model, QuantizerReport(losses, reconstruction_mse(model, vectors), usage.perplexity, resets)


@torch.no_grad()
def reconstruction_mse(model: RqVae, vectors: np.ndarray) -> float:
    x = torch.as_tensor(vectors, dtype=model.codebooks.dtype)
    codes, _ = rq_encode(model, x)
    return float(((x - rq_decode(model, codes)) ** 2).sum(-1).mean())


@dataclass
class Usage:
    counts: np.ndarray
    perplexity: list[float]


def usage_from_codes(codes: np.ndarray, codebook_size: int) -> Usage:
    codes = np.asarray(codes)
    counts = np.stack([np.bincount(codes[:, j], minlength=codebook_size) for j in range(codes.shape[1])])
    perp = []
    for row in counts:
        p = row[row > 0] / row.sum()
        perp.append(float(np.exp(-(p * np.log(p)).sum())))
    return Usage(counts, perp)


def codebook_usage(model: RqVae, vectors: np.ndarray) -> Usage:
    """Per-level code histogram and perplexity ``exp(entropy)``."""
    codes, _ = rq_encode(model, vectors)
    return usage_from_codes(codes.numpy(), model.codebook_size)


def write_codes(path, item_ids, channel: str, codes: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, row in zip(item_ids, np.asarray(codes)):
            fh.write(f"{item}\t{channel}\t{','.join(str(int(c)) for c in row)}\n")


def read_codes(path) -> dict[tuple[str, str], list[int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            item, channel, payload = line.rstrip("\n").split("\t")
            out[(item, channel)] = [int(c) for c in payload.split(",")]
    return out
