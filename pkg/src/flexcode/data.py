"""Interaction logs, k-core filtering, leave-last-out splits and item statistics."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataFormatError("user and item ids must be non-empty")
        if self.timestamp < 0:
            raise DataFormatError(f"negative timestamp {self.timestamp}")


def load_interactions(path: str | Path) -> list[Interaction]:
    """Parse ``user<TAB>item<TAB>timestamp`` rows; ``#`` lines are comments."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            try:
                rows.append(Interaction(user, item, stamp))
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no interactions")
    log.info("loaded %d interactions from %s", len(rows), path)
    return rows


def write_interactions(interactions: Iterable[Interaction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# user_id\titem_id\ttimestamp\n")
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.timestamp}\n")


def k_core_filter(interactions: Sequence[Interaction], k: int) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes.

    The surviving rows keep their input order. The k-core is unique, so the
    order of removals does not matter.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    alive = list(interactions)
    while True:
        users = Counter(it.user_id for it in alive)
        items = Counter(it.item_id for it in alive)
        kept = [it for it in alive if users[it.user_id] >= k and items[it.item_id] >= k]
        if len(kept) == len(alive):
            break
        alive = kept
    if not alive:
        log.warning("%d-core filtering removed every interaction", k)
    return alive


@dataclass(frozen=True)
class SequenceDataset:
    """Per-user chronological item sequences over dense integer ids.

    ``n_train[u]`` is the length of user ``u``'s training prefix once
    :func:`leave_last_out_split` has run; the validation item sits at
    ``sequences[u][n_train[u]]`` and the test item right after it.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    sequences: tuple[tuple[int, ...], ...]
    timestamps: tuple[tuple[int, ...], ...]
    n_train: tuple[int, ...] | None = None
    dropped_users: int = 0

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}

    @property
    def is_split(self) -> bool:
        return self.n_train is not None

    def _require_split(self):
        if self.n_train is None:
            raise ValueError("dataset has not been split; call leave_last_out_split first")

    def train_sequence(self, u: int) -> tuple[int, ...]:
        self._require_split()
        return self.sequences[u][: self.n_train[u]]

    def valid_item(self, u: int) -> int:
        self._require_split()
        return self.sequences[u][self.n_train[u]]

    def test_item(self, u: int) -> int:
        self._require_split()
        return self.sequences[u][self.n_train[u] + 1]

    def test_history(self, u: int) -> tuple[int, ...]:
        """Everything before the test item: train prefix plus validation item."""
        self._require_split()
        return self.sequences[u][: self.n_train[u] + 1]


def build_dataset(interactions: Sequence[Interaction]) -> SequenceDataset:
    """Group by user and sort by timestamp; ties keep input order.

    Users and items are indexed in order of first appearance in the input.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for pos, it in enumerate(interactions):
        u = users.setdefault(it.user_id, len(users))
        i = items.setdefault(it.item_id, len(items))
        per_user[u].append((it.timestamp, pos, i))
    seqs, stamps = [], []
    for u in range(len(users)):
        rows = sorted(per_user[u])
        seqs.append(tuple(r[2] for r in rows))
        stamps.append(tuple(r[0] for r in rows))
    return SequenceDataset(tuple(users), tuple(items), tuple(seqs), tuple(stamps))


def leave_last_out_split(dataset: SequenceDataset) -> SequenceDataset:
    """Last item is the test target, second-to-last the validation target.

    Users with fewer than 3 interactions are dropped (counted in
    ``dropped_users``). Item indexing is left untouched.
    """
    keep = [u for u, s in enumerate(dataset.sequences) if len(s) >= 3]
    dropped = dataset.num_users - len(keep)
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)
    return SequenceDataset(
        user_ids=tuple(dataset.user_ids[u] for u in keep),
        item_ids=dataset.item_ids,
        sequences=tuple(dataset.sequences[u] for u in keep),
        timestamps=tuple(dataset.timestamps[u] for u in keep),
        n_train=tuple(len(dataset.sequences[u]) - 2 for u in keep),
        dropped_users=dataset.dropped_users + dropped,
    )


def write_split_manifest(dataset: SequenceDataset, path: str | Path) -> None:
    dataset._require_split()
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, user in enumerate(dataset.user_ids):
            valid = dataset.item_ids[dataset.valid_item(u)]
            test = dataset.item_ids[dataset.test_item(u)]
            fh.write(f"{user}\t{dataset.n_train[u]}\t{valid}\t{test}\n")


def dataset_interactions(dataset: SequenceDataset) -> list[Interaction]:
    """Flatten back to rows, user by user in chronological order."""
    rows = []
    for u, user in enumerate(dataset.user_ids):
        for i, ts in zip(dataset.sequences[u], dataset.timestamps[u]):
            rows.append(Interaction(user, dataset.item_ids[i], ts))
    return rows


@dataclass(frozen=True)
class ItemStats:
    """Per-item popularity features, computed on the training split only."""

    counts: np.ndarray
    freq: np.ndarray
    age: np.ndarray
    sparsity: np.ndarray
    uncertainty: np.ndarray
    rank: np.ndarray = field(repr=False)

    @property
    def num_items(self) -> int:
        return len(self.counts)

    def features(self) -> np.ndarray:
        """Router input rows ``[log(1+f), age, sparsity, uncertainty]``."""
        return np.stack([np.log1p(self.freq), self.age, self.sparsity, self.uncertainty], axis=1)


def popularity_order(counts: np.ndarray) -> np.ndarray:
    """Item indices by count descending, ties by ascending index."""
    counts = np.asarray(counts)
    return np.lexsort((np.arange(len(counts)), -counts))


def _rank_normalize(values: np.ndarray) -> np.ndarray:
    n = len(values)
    if n <= 1:
        return np.zeros(n)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n)
    # equal values share their mean rank
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks / (n - 1)


def embedding_uncertainty(history: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Rank-normalised trace of each item's embedding variance across checkpoints.

    ``history`` has shape (checkpoints, items, dim).
    """
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 3 or hist.shape[0] < 2:
        return np.zeros(hist.shape[1] if hist.ndim == 3 else 0)
    trace = hist.var(axis=0).sum(axis=1)
    return _rank_normalize(trace)


def compute_item_stats(dataset: SequenceDataset, cf_embedding_history=None) -> ItemStats:
    dataset._require_split()
    n = dataset.num_items
    counts = np.zeros(n, dtype=np.int64)
    first_seen = np.full(n, -1, dtype=np.int64)
    t_min, t_max = None, None
    for u in range(dataset.num_users):
        k = dataset.n_train[u]
        for i, ts in zip(dataset.sequences[u][:k], dataset.timestamps[u][:k]):
            counts[i] += 1
            if first_seen[i] < 0 or ts < first_seen[i]:
                first_seen[i] = ts
            t_min = ts if t_min is None else min(t_min, ts)
            t_max = ts if t_max is None else max(t_max, ts)

    top = counts.max() if n else 0
    freq = counts / top if top > 0 else np.zeros(n)
    age = np.zeros(n)
    if t_min is not None and t_max > t_min:
        seen = first_seen >= 0
        age[seen] = (t_max - first_seen[seen]) / (t_max - t_min)
    sparsity = 1.0 / (1.0 + counts)
    if cf_embedding_history is None:
        uncertainty = np.zeros(n)
    else:
        uncertainty = embedding_uncertainty(cf_embedding_history)
    order = popularity_order(counts)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    return ItemStats(counts, freq.astype(np.float64), age, sparsity, uncertainty, rank)


def popularity_bands(stats: ItemStats | np.ndarray, num_bands: int) -> np.ndarray:
    """Band index per item: popularity-sorted items cut into near-equal groups.

    Band 0 holds the most popular items. With more bands than items, each
    item gets its own band and the trailing bands stay empty.
    """
    if num_bands < 1:
        raise ValueError("num_bands must be >= 1")
    counts = stats.counts if isinstance(stats, ItemStats) else np.asarray(stats)
    order = popularity_order(counts)
    bands = np.empty(len(counts), dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, num_bands)):
        bands[chunk] = b
    return bands


def head_tail_partition(stats: ItemStats | np.ndarray, head_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Top ``ceil(head_fraction * n)`` items by count form the head."""
    if not 0.0 < head_fraction < 1.0:
        raise ValueError("head_fraction must lie strictly between 0 and 1")
    counts = stats.counts if isinstance(stats, ItemStats) else np.asarray(stats)
    order = popularity_order(counts)
    n_head = math.ceil(head_fraction * len(counts))
    return np.sort(order[:n_head]), np.sort(order[n_head:])


# ---------------------------------------------------------------------------
# synthetic long-tail generator


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic long-tail world.

    Users alternate between a head mode and a tail mode (a two-state Markov
    chain whose stationary tail probability is ``tail_share``). In head mode
    the next item usually comes from the previous head item's co-consumption
    group (groups are drawn independently of content), otherwise from global
    popularity;
    in tail mode it is the unseen tail item closest in content to the user's
    preference, ``taste + drift * content(previous tail item)``.
    ``semantic_weight`` interpolates tail choices between popularity
    sampling (0) and pure nearest neighbour (1).
    """

    num_items: int = 2000
    num_users: int = 1000
    zipf_exponent: float = 1.2
    latent_dim: int = 32
    semantic_weight: float = 0.9
    head_fraction: float = 0.2
    tail_share: float = 0.4
    tail_persistence: float = 0.6
    drift: float = 1.0
    num_topics: int = 16
    topic_spread: float = 0.35
    taste_noise: float = 0.3
    semantic_temperature: float = 0.1
    head_groups: int = 40
    stickiness: float = 0.85
    min_length: int = 12
    max_length: int = 30

    def validate(self) -> None:
        if self.num_items < 2 or self.num_users < 1:
            raise ValueError("need at least 2 items and 1 user")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 <= self.semantic_weight <= 1.0:
            raise ValueError("semantic_weight must lie in [0, 1]")
        if not 0.0 < self.head_fraction < 1.0:
            raise ValueError("head_fraction must lie in (0, 1)")
        if not 0.0 <= self.tail_share <= 1.0:
            raise ValueError("tail_share must lie in [0, 1]")
        if not 0.0 <= self.tail_persistence < 1.0:
            raise ValueError("tail_persistence must lie in [0, 1)")
        if self.drift < 0:
            raise ValueError("drift must be >= 0")
        if not 0.0 <= self.stickiness <= 1.0:
            raise ValueError("stickiness must lie in [0, 1]")
        if self.semantic_temperature <= 0 or self.num_topics < 1 or self.head_groups < 1:
            raise ValueError("semantic_temperature, num_topics and head_groups must be positive")
        if not 3 <= self.min_length <= self.max_length:
            raise ValueError("need 3 <= min_length <= max_length")


@dataclass
class SynthWorld:
    """Everything the generator drew, for oracles and diagnostics."""

    semantic: np.ndarray
    taste: np.ndarray
    zipf_weight: np.ndarray
    is_head: np.ndarray
    group: np.ndarray  # co-consumption group of each head item, -1 for tail
    interactions: list[Interaction]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def tail_query(taste: np.ndarray, prev_tail: np.ndarray | None, drift: float) -> np.ndarray:
    if prev_tail is None or drift == 0:
        return taste
    return _unit(taste + drift * prev_tail)


def _tail_choice(config, tail_sem, taste, prev_tail, tail_logpop, seen, rng) -> int:
    w = config.semantic_weight
    sims = tail_sem @ tail_query(taste, prev_tail, config.drift)
    score = w * sims / config.semantic_temperature
    if w < 1.0:
        score = score + (1.0 - w) * (tail_logpop + rng.gumbel(size=len(tail_sem)))
    score = np.where(seen, -np.inf, score)
    return int(np.argmax(score))


def synth_world(config: SynthConfig, seed: int) -> SynthWorld:
    config.validate()
    rng = np.random.default_rng(seed)
    n, d = config.num_items, config.latent_dim

    # popularity rank is a random permutation of item ids
    perm = rng.permutation(n)
    zipf = np.empty(n)
    zipf[perm] = 1.0 / np.arange(1, n + 1) ** config.zipf_exponent
    zipf /= zipf.sum()
    n_head = math.ceil(config.head_fraction * n)
    is_head = np.zeros(n, dtype=bool)
    is_head[perm[:n_head]] = True
    head = np.flatnonzero(is_head)
    tail = np.flatnonzero(~is_head)

    centers = _unit(rng.normal(size=(config.num_topics, d)))
    topic = rng.integers(config.num_topics, size=n)
    semantic = _unit(centers[topic] + config.topic_spread * rng.normal(size=(n, d)) / math.sqrt(d))

    head_p = zipf[head] / zipf[head].sum()
    group = np.full(n, -1, dtype=np.int64)
    group[head] = rng.permutation(len(head)) % min(config.head_groups, len(head))
    members = {g: head[group[head] == g] for g in np.unique(group[head])}
    member_p = {g: zipf[m] / zipf[m].sum() for g, m in members.items()}

    users = config.num_users
    user_topic = rng.integers(config.num_topics, size=users)
    taste = _unit(centers[user_topic] + config.taste_noise * rng.normal(size=(users, d)) / math.sqrt(d))
    tail_logpop = np.log(zipf[tail] / zipf[tail].sum())

    # head -> tail switching rate that makes tail_share the stationary share
    stay = config.tail_persistence
    share = config.tail_share if len(tail) else 0.0
    enter = 1.0 if share >= 1.0 else min(1.0, share * (1.0 - stay) / (1.0 - share))

    rows = []
    for u in range(users):
        length = int(rng.integers(config.min_length, config.max_length + 1))
        start = int(rng.integers(0, 10_000)) * 100
        seen = np.zeros(len(tail), dtype=bool)
        prev_head = int(rng.choice(head, p=head_p))
        prev_tail = None
        in_tail = rng.random() < share
        for t in range(length):
            if t > 0:
                in_tail = rng.random() < (stay if in_tail else enter)
            if in_tail and not seen.all():
                pos = _tail_choice(config, semantic[tail], taste[u], prev_tail, tail_logpop, seen, rng)
                seen[pos] = True
                item = int(tail[pos])
                prev_tail = semantic[item]
            else:
                if rng.random() < config.stickiness:
                    g = group[prev_head]
                    item = int(rng.choice(members[g], p=member_p[g]))
                else:
                    item = int(rng.choice(head, p=head_p))
                prev_head = item
            rows.append(Interaction(f"u{u}", f"i{item}", start + t))
    return SynthWorld(semantic, taste, zipf, is_head, group, rows)


def synth_longtail(config: SynthConfig, seed: int, k_core: int = 5):
    """Synthetic dataset with k-core filtering and leave-last-out splits applied.

    Returns ``(dataset, semantic_vectors, stats)`` where ``semantic_vectors``
    is row-aligned with ``dataset.item_ids``.
    """
    world = synth_world(config, seed)
    rows = k_core_filter(world.interactions, k_core) if k_core > 1 else world.interactions
    dataset = leave_last_out_split(build_dataset(rows))
    sem = np.stack([world.semantic[int(i[1:])] for i in dataset.item_ids]) if dataset.num_items else np.zeros((0, config.latent_dim))
    return dataset, sem, compute_item_stats(dataset)
