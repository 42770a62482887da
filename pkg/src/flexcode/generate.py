"""Token layout, autoregressive generator and trie-constrained beam search."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import Block

log = logging.getLogger(__name__)

COL, SEM = 0, 1
NULL_CHANNEL = -1
SEG_COL, SEG_SEM, SEG_NULL, SEG_SPECIAL = 0, 1, 2, 3


@dataclass(frozen=True)
class TokenVocab:
    """Ids 0..3 are PAD, BOS, EOS, NULL; then one block of ``K`` ids per (channel, level)."""

    levels: int
    codebook_size: int

    PAD = 0
    BOS = 1
    EOS = 2
    NULL = 3
    SPECIALS = 4

    @property
    def size(self) -> int:
        return 2 * self.levels * self.codebook_size + self.SPECIALS

    def token(self, channel: int, level: int, index) -> int:
        """Token id of code ``index`` at 0-based ``level`` of ``channel``."""
        if channel not in (COL, SEM) or not 0 <= level < self.levels:
            raise ValueError(f"bad channel/level ({channel}, {level})")
        if np.any(np.asarray(index) < 0) or np.any(np.asarray(index) >= self.codebook_size):
            raise ValueError("code index out of range")
        return self.SPECIALS + (channel * self.levels + level) * self.codebook_size + index

    def decode(self, token: int) -> tuple[int, int, int] | None:
        """Inverse of :meth:`token`; ``None`` for special ids."""
        if token < self.SPECIALS or token >= self.size:
            return None
        block, index = divmod(token - self.SPECIALS, self.codebook_size)
        channel, level = divmod(block, self.levels)
        return channel, level, index

    def segment(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        seg = np.full(tokens.shape, SEG_SPECIAL, dtype=np.int64)
        body = tokens >= self.SPECIALS
        seg[body] = (tokens[body] - self.SPECIALS) // (self.levels * self.codebook_size)
        seg[tokens == self.NULL] = SEG_NULL
        return seg


def tokenize_item(codes_col: Sequence[int], codes_sem: Sequence[int], allocation: tuple[int, int], vocab: TokenVocab) -> list[int]:
    """Collaborative codes left-aligned, semantic codes right-aligned, NULL in between."""
    total = vocab.levels
    n_col, n_sem = allocation
    if len(codes_col) != total or len(codes_sem) != total:
        raise ValueError(f"both code lists must have length {total}")
    if n_col < 0 or n_sem < 0 or n_col + n_sem > total:
        raise ValueError(f"allocation {allocation} does not fit a budget of {total}")
    out = [vocab.token(COL, j, int(codes_col[j])) for j in range(n_col)]
    out += [vocab.NULL] * (total - n_col - n_sem)
    out += [vocab.token(SEM, j, int(codes_sem[j])) for j in range(n_sem)]
    return out


def item_layouts(codes_col: np.ndarray, codes_sem: np.ndarray, allocations: np.ndarray, vocab: TokenVocab) -> np.ndarray:
    """(items, L) token matrix for all items."""
    return np.array([tokenize_item(c, s, tuple(a), vocab) for c, s, a in zip(codes_col, codes_sem, allocations)],
                    dtype=np.int64).reshape(len(allocations), vocab.levels)


def slot_levels(allocations: np.ndarray, total: int) -> tuple[np.ndarray, np.ndarray]:
    """Per slot: channel (COL/SEM/NULL_CHANNEL) and 0-based level, shape (items, L)."""
    allocations = np.asarray(allocations)
    k = np.arange(total)[None, :]
    n_col = allocations[:, :1]
    n_sem = allocations[:, 1:2]
    channel = np.full((len(allocations), total), NULL_CHANNEL, dtype=np.int64)
    level = np.zeros((len(allocations), total), dtype=np.int64)
    is_col = k < n_col
    is_sem = k >= total - n_sem
    channel[is_col] = COL
    channel[is_sem] = SEM
    level[is_col] = np.broadcast_to(k, channel.shape)[is_col]
    level[is_sem] = (k - (total - n_sem))[is_sem]
    return channel, level


def slot_mask_values(m_col: torch.Tensor, m_sem: torch.Tensor, channel: np.ndarray, level: np.ndarray) -> torch.Tensor:
    """Pick each slot's soft-mask value from the per-level masks; NULL slots get 1."""
    channel_t = torch.as_tensor(channel)
    level_t = torch.as_tensor(level)
    col = m_col.gather(1, level_t)
    sem = m_sem.gather(1, level_t)
    ones = torch.ones_like(col)
    return torch.where(channel_t == COL, col, torch.where(channel_t == SEM, sem, ones))


class Generator(nn.Module):
    """Causal transformer over flattened item-slot tokens."""

    def __init__(self, vocab: TokenVocab, dim: int = 128, layers: int = 2, heads: int = 4,
                 max_items: int = 20, dropout: float = 0.1):
        super().__init__()
        self.vocab = vocab
        self.max_items = max_items
        self.max_len = 1 + (max_items + 1) * vocab.levels
        self.tok_emb = nn.Embedding(vocab.size, dim)
        self.pos_emb = nn.Embedding(self.max_len, dim)
        self.slot_emb = nn.Embedding(vocab.levels + 1, dim)
        self.seg_emb = nn.Embedding(4, dim)
        self.blocks = nn.ModuleList([Block(dim, heads, dropout) for _ in range(layers)])
        self.ln = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab.size)
        self.drop = nn.Dropout(dropout)
        for emb in (self.tok_emb, self.pos_emb, self.slot_emb, self.seg_emb):
            nn.init.normal_(emb.weight, std=0.02)

    def forward(self, tokens: torch.Tensor, mask_values: torch.Tensor | None = None) -> torch.Tensor:
        """Next-token logits for left-padded ``tokens`` (b, t).

        ``mask_values`` (b, t) blends each input embedding with the NULL
        embedding: ``m * emb(token) + (1 - m) * emb(NULL)``.
        """
        pad = tokens == self.vocab.PAD
        pos = ((~pad).long().cumsum(1) - 1).clamp(min=0)
        x = self._embed(tokens, pos, pad, mask_values)
        for blk in self.blocks:
            x = blk(x, pad)
        return self.head(self.ln(x))

    def _embed(self, tokens, pos, pad, mask_values=None):
        # slot 0..L-1 for code tokens, L for BOS/PAD
        slot = torch.where(pos == 0, torch.full_like(pos, self.vocab.levels), (pos - 1) % self.vocab.levels)
        slot = slot.masked_fill(pad, self.vocab.levels)
        seg = torch.as_tensor(self.vocab.segment(tokens.numpy()))
        x = self.tok_emb(tokens)
        if mask_values is not None:
            m = mask_values.unsqueeze(-1).to(x.dtype)
            x = m * x + (1 - m) * self.tok_emb.weight[self.vocab.NULL]
        x = x + self.pos_emb(pos) + self.slot_emb(slot) + self.seg_emb(seg)
        return self.drop(x)

    def encode_prompt(self, tokens: torch.Tensor):
        """Logits after the last prompt token plus a per-layer key/value cache."""
        pad = tokens == self.vocab.PAD
        pos = ((~pad).long().cumsum(1) - 1).clamp(min=0)
        x = self._embed(tokens, pos, pad)
        kvs = []
        for blk in self.blocks:
            x, kv = blk(x, pad, return_kv=True)
            kvs.append(kv)
        cache = {"kv": kvs, "pad": pad, "length": (~pad).sum(1)}
        return self.head(self.ln(x[:, -1])), cache

    def extend(self, cache, owners: torch.Tensor, extra: torch.Tensor) -> torch.Tensor:
        """Logits after ``extra`` (r, j) tokens appended to cached prompt ``owners[r]``.

        Matches :meth:`forward` on the concatenated sequence.
        """
        j = extra.shape[1]
        pos = cache["length"][owners, None] + torch.arange(j)[None, :]
        x = self._embed(extra, pos, torch.zeros_like(extra, dtype=torch.bool))
        ppad = cache["pad"][owners]
        for blk, (k, v) in zip(self.blocks, cache["kv"]):
            x = blk(x, past=(k[owners], v[owners], ppad))
        return self.head(self.ln(x[:, -1]))


# ---------------------------------------------------------------------------
# training batches


@dataclass
class SequenceBatch:
    """Flattened item windows, left-padded.

    ``items`` holds item indices per window (-1 padding); token sequences are
    produced on the fly from the current layouts.
    """

    items: np.ndarray


def training_windows(sequences: Sequence[Sequence[int]], max_items: int) -> np.ndarray:
    """Cut each sequence into windows of at most ``max_items`` items from the end.

    Windows shorter than 2 items carry no target and are dropped.
    """
    windows = []
    for seq in sequences:
        seq = list(seq)
        end = len(seq)
        while end >= 2:
            start = max(0, end - max_items)
            windows.append(seq[start:end])
            if start == 0:
                break
            end = start + 1  # keep one item of overlap as context
    out = np.full((len(windows), max_items), -1, dtype=np.int64)
    for r, w in enumerate(windows):
        out[r, max_items - len(w):] = w
    return out


def window_tokens(windows: np.ndarray, layouts: np.ndarray, vocab: TokenVocab):
    """Tokens (b, 1 + n*L), target-slot mask and item index per position."""
    b, n = windows.shape
    total = vocab.levels
    valid = windows >= 0
    safe = np.where(valid, windows, 0)
    toks = layouts[safe]  # (b, n, L)
    toks = np.where(valid[..., None], toks, vocab.PAD).reshape(b, n * total)
    item_pos = np.repeat(np.where(valid, windows, -1), total, axis=1)
    # BOS right before the first real item of each row
    first = valid.argmax(axis=1)
    tokens = np.concatenate([np.full((b, 1), vocab.PAD), toks], axis=1)
    item_pos = np.concatenate([np.full((b, 1), -1), item_pos], axis=1)
    tokens[np.arange(b), first * total] = vocab.BOS
    # targets: every slot of every item after the first in the window
    is_target = np.zeros_like(tokens, dtype=bool)
    col_idx = np.arange(1, n * total + 1)
    item_of_col = (col_idx - 1) // total
    is_target[:, 1:] = valid[:, item_of_col] & (item_of_col[None, :] > first[:, None])
    return tokens, is_target, item_pos


def arg_loss(generator: Generator, windows: np.ndarray, layouts: np.ndarray, item_masks: torch.Tensor | None = None) -> torch.Tensor:
    """Teacher-forced cross-entropy, averaged over target slots.

    ``item_masks`` (items, L) gives the soft-mask value of every item slot;
    it scales the input embeddings only, never the targets.
    """
    vocab = generator.vocab
    tokens, is_target, item_pos = window_tokens(windows, layouts, vocab)
    if not is_target.any():
        return generator.head.weight.new_zeros(())
    tok = torch.as_tensor(tokens)
    mask_values = None
    if item_masks is not None:
        b, t = tokens.shape
        slot = np.zeros_like(tokens)
        slot[:, 1:] = (np.arange(t - 1) % vocab.levels)[None, :]
        safe_item = np.where(item_pos >= 0, item_pos, 0)
        mv = item_masks[torch.as_tensor(safe_item), torch.as_tensor(slot)]
        mask_values = torch.where(torch.as_tensor(item_pos >= 0), mv, torch.ones_like(mv))
    logits = generator(tok, mask_values)
    # position p predicts token p+1
    pred = logits[:, :-1]
    tgt = tok[:, 1:]
    sel = torch.as_tensor(is_target[:, 1:])
    return F.cross_entropy(pred[sel], tgt[sel])


# ---------------------------------------------------------------------------
# constrained decoding


class CodeTrie:
    """Prefix tree over item token tuples; leaves hold item lists."""

    def __init__(self, layouts: np.ndarray, popularity: np.ndarray | None = None):
        layouts = np.asarray(layouts)
        self.depth = layouts.shape[1]
        self.children: dict[tuple[int, ...], list[int]] = {}
        self.leaves: dict[tuple[int, ...], list[int]] = {}
        pop = np.zeros(len(layouts)) if popularity is None else np.asarray(popularity)
        for item, row in enumerate(layouts):
            key = tuple(int(t) for t in row)
            self.leaves.setdefault(key, []).append(item)
        for key in self.leaves:
            self.leaves[key].sort(key=lambda i: (-pop[i], i))
            for d in range(self.depth):
                kids = self.children.setdefault(key[:d], [])
                if key[d] not in kids:
                    kids.append(key[d])
        for kids in self.children.values():
            kids.sort()
        self._child_tensors = {k: torch.tensor(v, dtype=torch.long) for k, v in self.children.items()}

    def child_tokens(self, prefix: tuple[int, ...]) -> torch.Tensor:
        return self._child_tensors[prefix]

    def items(self, key: tuple[int, ...]) -> list[int]:
        return self.leaves.get(tuple(key), [])

    def collision_stats(self) -> dict[str, object]:
        sizes = Counter(len(v) for v in self.leaves.values())
        return {
            "leaves": len(self.leaves),
            "collisions": sum(len(v) - 1 for v in self.leaves.values()),
            "items_per_leaf": dict(sorted(sizes.items())),
        }


def build_trie(layouts: np.ndarray, popularity: np.ndarray | None = None) -> CodeTrie:
    return CodeTrie(layouts, popularity)


def history_tokens(history: Sequence[int], layouts: np.ndarray, vocab: TokenVocab, max_items: int) -> list[int]:
    hist = list(history)[-max_items:]
    out = [vocab.BOS]
    for i in hist:
        out.extend(int(t) for t in layouts[i])
    return out


@dataclass
class Recommendation:
    items: list[int]
    scores: list[float]
    tuples: list[tuple[int, ...]]

    @property
    def top_score(self) -> float:
        return self.scores[0] if self.scores else float("-inf")


@torch.no_grad()
def _beam_search_batch(generator: Generator, prompts: list[list[int]], trie: CodeTrie, beam_width: int):
    """Batched beam search; returns per prompt a list of (tuple, logprob) best first.

    The prompts are encoded once; later steps only run the partial code tuple
    against the cached prompt keys and values.
    """
    vocab = generator.vocab
    n = len(prompts)
    width = max(len(p) for p in prompts)
    tok = torch.full((n, width), vocab.PAD, dtype=torch.long)
    for r, seq in enumerate(prompts):
        tok[r, width - len(seq):] = torch.tensor(seq)
    first, cache = generator.encode_prompt(tok)
    first = F.log_softmax(first.double(), dim=-1)
    beams = [[((), 0.0)] for _ in range(n)]
    for step in range(trie.depth):
        owners = [(p, prefix, score) for p, bs in enumerate(beams) for prefix, score in bs]
        if step == 0:
            logp = first
        else:
            idx = torch.tensor([p for p, _, _ in owners])
            extra = torch.tensor([list(prefix) for _, prefix, _ in owners], dtype=torch.long)
            logp = F.log_softmax(generator.extend(cache, idx, extra).double(), dim=-1)
        cands: list[list[tuple[float, tuple[int, ...]]]] = [[] for _ in range(n)]
        for r, (p, prefix, score) in enumerate(owners):
            kids = trie.child_tokens(prefix)
            lp = logp[r, kids]
            for t, v in zip(kids.tolist(), lp.tolist()):
                cands[p].append((score + v, prefix + (t,)))
        for p in range(n):
            # ties resolved by token tuple for determinism
            cands[p].sort(key=lambda c: (-c[0], c[1]))
            beams[p] = [(prefix, s) for s, prefix in cands[p][:beam_width]]
    return beams


def generate_items(generator: Generator, histories: Sequence[Sequence[int]], layouts: np.ndarray,
                   trie: CodeTrie, beam_width: int = 20, k: int = 10, batch_size: int = 64) -> list[Recommendation]:
    """Top-``k`` (or more) items per history via trie-constrained beam search.

    Completed beams are ranked by total log-probability; a leaf shared by
    several items lists them by training popularity.
    """
    if beam_width < k:
        raise ValueError("beam_width must be >= k")
    generator.eval()
    vocab = generator.vocab
    out = []
    for start in range(0, len(histories), batch_size):
        chunk = histories[start:start + batch_size]
        if any(len(h) == 0 for h in chunk):
            raise ValueError("history must be non-empty")
        prompts = [history_tokens(h, layouts, vocab, generator.max_items) for h in chunk]
        for beams in _beam_search_batch(generator, prompts, trie, beam_width):
            items, scores, tuples = [], [], []
            for prefix, score in beams:
                leaf = trie.items(prefix)
                assert leaf, "beam ended outside the trie"
                for item in leaf:
                    items.append(item)
                    scores.append(score)
                    tuples.append(prefix)
            out.append(Recommendation(items, scores, tuples))
    return out


def write_recommendations(path, user_ids, item_ids, recs: Sequence[Recommendation], k: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, rec in zip(user_ids, recs):
            for rank, (item, score) in enumerate(zip(rec.items[:k], rec.scores[:k]), 1):
                fh.write(f"{user}\t{rank}\t{item_ids[item]}\t{score!r}\n")
