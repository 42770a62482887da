"""Offline ranking metrics, head/tail breakdowns, ablations and token-budget sweeps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import VARIANTS, Config
from .data import ItemStats, SequenceDataset, head_tail_partition
from .generate import generate_items
from .pipeline import Bundle, Prepared, StageCache, train_bundle

log = logging.getLogger(__name__)


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(target in list(ranked[:k]))


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    """Single-relevant-item NDCG: ``1 / log2(rank + 1)`` inside the cutoff."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for rank, item in enumerate(ranked[:k], 1):
        if item == target:
            return 1.0 / math.log2(rank + 1)
    return 0.0


@dataclass
class EvalReport:
    overall: dict[str, float]
    head: dict[str, float]
    tail: dict[str, float]
    num_users: int
    num_head_users: int
    num_tail_users: int
    hits: list[dict] = field(repr=False, default_factory=list)
    label: str = "full"
    seed: int = 0
    config_hash: str = ""

    def metric(self, name: str, part: str = "overall") -> float:
        return getattr(self, part)[name]

    def to_text(self) -> str:
        lines = [f"label = {self.label}", f"seed = {self.seed}", f"config_hash = {self.config_hash}",
                 f"users = {self.num_users}", f"head_users = {self.num_head_users}", f"tail_users = {self.num_tail_users}"]
        for part in ("overall", "head", "tail"):
            for name, value in getattr(self, part).items():
                lines.append(f"{part}.{name} = {value!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("hits")
        return d


def metric_names(ks: Sequence[int]) -> list[str]:
    return [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]


def score_rankings(rankings: Sequence[Sequence[int]], targets: Sequence[int], head: set[int],
                   ks: Sequence[int] = (5, 10), label: str = "", seed: int = 0, config_hash: str = "") -> EvalReport:
    """Average per-user metrics overall and over head/tail target users."""
    names = metric_names(ks)
    rows = []
    for ranked, target in zip(rankings, targets):
        row = {"target": int(target), "head": int(target) in head}
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(ranked, target, k)
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, target, k)
        rows.append(row)

    def mean(sel):
        picked = [r for r in rows if sel(r)]
        return {n: (float(np.mean([r[n] for r in picked])) if picked else 0.0) for n in names}

    n_head = sum(r["head"] for r in rows)
    return EvalReport(mean(lambda r: True), mean(lambda r: r["head"]), mean(lambda r: not r["head"]),
                      len(rows), n_head, len(rows) - n_head, rows, label, seed, config_hash)


def evaluate(bundle: Bundle, dataset: SequenceDataset, stats: ItemStats | None = None,
             ks: Sequence[int] | None = None, head_fraction: float | None = None, users: Sequence[int] | None = None,
             label: str | None = None) -> tuple[EvalReport, list]:
    """Generate for every test user and score against the held-out item.

    Head/tail membership of the target follows training-split popularity.
    """
    cfg = bundle.config
    ks = tuple(ks or cfg.ks)
    stats = stats or bundle.stats
    head_fraction = cfg.head_fraction if head_fraction is None else head_fraction
    users = list(range(dataset.num_users)) if users is None else list(users)
    head = set(head_tail_partition(stats, head_fraction)[0].tolist())
    histories = [dataset.test_history(u) for u in users]
    targets = [dataset.test_item(u) for u in users]
    recs = generate_items(bundle.generator, histories, bundle.layouts, bundle.trie,
                          beam_width=max(cfg.beam_width, max(ks)), k=max(ks))
    report = score_rankings([r.items for r in recs], targets, head, ks, label or bundle.variant,
                            bundle.seed, cfg.fingerprint())
    return report, recs


def run_ablation(variant: str, prep: Prepared, config: Config, seed: int, cache: StageCache | None = None) -> EvalReport:
    """Train and evaluate one variant; everything but the variant switch is shared."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    bundle, _, _ = train_bundle(prep, config, seed, variant, cache)
    report, _ = evaluate(bundle, prep.dataset, bundle.stats, label=variant)
    return report


def budget_sweep(prep: Prepared, config: Config, budgets: Sequence[int], seed: int,
                 variants: Sequence[str] = ("sid_only", "cid_only", "fixed_split", "full"),
                 cache: StageCache | None = None, metric: str = "ndcg@10") -> dict[str, dict[int, float]]:
    """``metric`` per variant per token budget; tokenizers and generator retrained for every budget."""
    if any(b < 2 for b in budgets):
        raise ValueError("token budgets must be >= 2")
    table: dict[str, dict[int, float]] = {v: {} for v in variants}
    for budget in budgets:
        cfg = config.replace(levels=budget)
        for v in variants:
            table[v][budget] = run_ablation(v, prep, cfg, seed, cache).metric(metric)
    return table


def format_sweep(table: dict[str, dict[int, float]]) -> str:
    budgets = sorted(next(iter(table.values())).keys()) if table else []
    lines = ["variant\t" + "\t".join(f"L={b}" for b in budgets)]
    for v, row in table.items():
        lines.append(v + "\t" + "\t".join(f"{row[b]:.4f}" for b in budgets))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"metrics_{report.label}"
    text_path = out / f"{stem}.txt"
    json_path = out / f"{stem}.json"
    text_path.write_text(report.to_text(), encoding="utf-8")
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return text_path, json_path
