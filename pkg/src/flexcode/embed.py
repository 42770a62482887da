"""Continuous item embeddings: semantic vectors from files, collaborative vectors from a SASRec-style encoder."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SequenceDataset
from .layers import Block
from .numerics import Adam, DivergenceError, resolve_dtype, seed_everything

log = logging.getLogger(__name__)

CHANNELS = ("semantic", "collaborative")


@dataclass(frozen=True)
class EmbeddingTable:
    """Read-only ``(items, d)`` matrix keyed by external item id."""

    channel: str
    item_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.item_ids):
            raise ValueError("vectors must be (len(item_ids), d)")
        if not np.isfinite(vec).all():
            raise ValueError("embedding table contains non-finite values")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "_index", {it: i for i, it in enumerate(self.item_ids)})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.item_ids).encode())
        h.update(np.ascontiguousarray(self.vectors).tobytes())
        return h.hexdigest()

    def rows(self, item_ids: Sequence[str]) -> np.ndarray:
        """Matrix of vectors in the order of ``item_ids``."""
        missing = [it for it in item_ids if it not in self._index]
        if missing:
            raise KeyError(f"{len(missing)} items missing from {self.channel} table, e.g. {missing[0]!r}")
        return self.vectors[[self._index[it] for it in item_ids]]


def embed_item(table: EmbeddingTable, item_id: str) -> np.ndarray:
    try:
        return table.vectors[table._index[item_id]]
    except KeyError:
        raise KeyError(f"item {item_id!r} not in {table.channel} table") from None


def load_semantic_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingTable:
    """Read ``item_id<TAB>v1,v2,...`` rows."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    ids, rows = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                item, payload = line.split("\t")
                vec = [float(v) for v in payload.split(",")]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed embedding row") from None
            if expected_dim is None:
                expected_dim = len(vec)
            if len(vec) != expected_dim:
                raise ValueError(f"{path}:{lineno}: item {item!r} has {len(vec)} values, expected {expected_dim}")
            ids.append(item)
            rows.append(vec)
    if not rows:
        raise ValueError(f"{path}: no embeddings")
    return EmbeddingTable("semantic", tuple(ids), np.array(rows))


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item, vec in zip(table.item_ids, table.vectors):
            fh.write(item + "\t" + ",".join(repr(float(v)) for v in vec) + "\n")


class CfEncoder(nn.Module):
    """Causal self-attentive next-item model; item rows double as collaborative embeddings."""

    def __init__(self, num_items: int, dim: int, layers: int = 2, heads: int = 2, max_len: int = 50, dropout: float = 0.1):
        super().__init__()
        self.num_items = num_items
        self.max_len = max_len
        # row 0 is padding
        self.item_emb = nn.Embedding(num_items + 1, dim, padding_idx=0)
        self.pos_emb = nn.Embedding(max_len, dim)
        self.blocks = nn.ModuleList([Block(dim, heads, dropout) for _ in range(layers)])
        self.ln = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        nn.init.normal_(self.item_emb.weight, std=0.1)
        with torch.no_grad():
            self.item_emb.weight[0].zero_()

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        """Hidden states for left-padded item sequences (ids shifted by +1)."""
        t = seqs.shape[1]
        pad = seqs == 0
        x = self.item_emb(seqs) * self.item_emb.embedding_dim**0.5
        x = self.drop(x + self.pos_emb(torch.arange(t, device=seqs.device)))
        for blk in self.blocks:
            x = blk(x, pad)
        return self.ln(x)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.item_emb.weight[1:].T

    def item_vectors(self) -> np.ndarray:
        return self.item_emb.weight[1:].detach().to(torch.float64).numpy().copy()


def _pad_left(seqs: list[Sequence[int]], length: int) -> torch.Tensor:
    out = torch.zeros(len(seqs), length, dtype=torch.long)
    for r, s in enumerate(seqs):
        s = list(s)[-length:]
        if s:
            out[r, length - len(s):] = torch.tensor(s, dtype=torch.long)
    return out


def next_item_pairs(dataset: SequenceDataset, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-padded (inputs, targets) over each user's training prefix, ids shifted by +1."""
    inputs, targets = [], []
    for u in range(dataset.num_users):
        seq = [i + 1 for i in dataset.train_sequence(u)]
        if len(seq) < 2:
            continue
        seq = seq[-(max_len + 1):]
        inputs.append(seq[:-1])
        targets.append(seq[1:])
    return _pad_left(inputs, max_len), _pad_left(targets, max_len)


def train_cf_encoder(dataset: SequenceDataset, config, seed: int):
    """Fit the encoder with full-softmax next-item cross-entropy.

    Returns ``(encoder, table, history, losses)``; ``history`` stacks the item
    embedding matrix after every epoch, shape (epochs, items, d).
    """
    gen = seed_everything(seed)
    dtype = resolve_dtype(config.dtype)
    model = CfEncoder(dataset.num_items, config.d_col, config.cf_layers, config.cf_heads,
                      config.cf_max_len, config.cf_dropout).to(dtype)
    inputs, targets = next_item_pairs(dataset, config.cf_max_len)
    opt = Adam([(model, config.cf_lr)])
    history, losses = [], []
    n = len(inputs)
    for epoch in range(config.cf_epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, config.cf_batch):
            idx = order[start:start + config.cf_batch]
            x, y = inputs[idx], targets[idx]
            mask = y > 0
            logits = model.logits(model(x))
            loss = F.cross_entropy(logits[mask], y[mask] - 1)
            if not torch.isfinite(loss):
                raise DivergenceError(f"collaborative encoder loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * int(mask.sum())
            count += int(mask.sum())
        losses.append(total / max(count, 1))
        history.append(model.item_vectors())
        log.debug("cf epoch %d loss %.4f", epoch, losses[-1])
    model.eval()
    table = EmbeddingTable("collaborative", dataset.item_ids, model.item_vectors())
    return model, table, np.stack(history) if history else np.zeros((0, dataset.num_items, config.d_col)), losses


@torch.no_grad()
def next_item_accuracy(model: CfEncoder, dataset: SequenceDataset) -> float:
    """Top-1 accuracy of predicting every training-prefix transition."""
    model.eval()
    inputs, targets = next_item_pairs(dataset, model.max_len)
    mask = targets > 0
    pred = model.logits(model(inputs)).argmax(-1) + 1
    return float((pred[mask] == targets[mask]).float().mean())
