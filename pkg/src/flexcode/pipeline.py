"""Staged training: collaborative encoder, dual quantizers with alignment, then joint fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .align import ProjectionHead, cca_loss
from .config import Config
from .data import (
    ItemStats,
    SequenceDataset,
    build_dataset,
    compute_item_stats,
    head_tail_partition,
    k_core_filter,
    leave_last_out_split,
    load_interactions,
    popularity_bands,
    synth_longtail,
)
from .embed import EmbeddingTable, load_semantic_embeddings, train_cf_encoder
from .generate import (
    CodeTrie,
    Generator,
    TokenVocab,
    arg_loss,
    build_trie,
    item_layouts,
    slot_levels,
    slot_mask_values,
    training_windows,
)
from .numerics import Adam, DivergenceError, resolve_dtype, seed_everything
from .quantize import RqVae, build_rqvae, init_codebooks, reset_dead_codes, rq_encode, rqvae_loss, usage_from_codes
from .route import Router, baseline_gate, fit_router_to_gate, hard_allocate_batch, load_balance_loss, route, smoothness_loss, soft_masks

log = logging.getLogger(__name__)

FORCED_ALPHA = {"sid_only": 0.0, "cid_only": 1.0, "fixed_split": 0.5}

CF_KEYS = ("dtype", "d_col", "cf_layers", "cf_heads", "cf_max_len", "cf_epochs", "cf_lr", "cf_batch", "cf_dropout")
RQ_KEYS = CF_KEYS + ("codebook_size", "d_code", "levels", "rq_hidden", "rq_epochs", "rq_lr", "rq_batch",
                     "beta", "dead_code_reset", "d_shared", "cca_temperature", "cca_symmetric")


@dataclass
class Prepared:
    dataset: SequenceDataset
    semantic: EmbeddingTable
    stats: ItemStats


def prepare_synth(config: Config, seed: int) -> Prepared:
    dataset, sem, stats = synth_longtail(config.synth_config(), seed, k_core=config.k_core)
    return Prepared(dataset, EmbeddingTable("semantic", dataset.item_ids, sem), stats)


def prepare_files(config: Config) -> Prepared:
    if not config.interactions_path:
        raise ValueError("config.interactions_path is empty")
    rows = load_interactions(config.interactions_path)
    rows = k_core_filter(rows, config.k_core)
    dataset = leave_last_out_split(build_dataset(rows))
    if not config.semantic_path:
        raise ValueError("config.semantic_path is empty")
    table = load_semantic_embeddings(config.semantic_path)
    # fails loudly if any item lacks a semantic vector
    table = EmbeddingTable("semantic", dataset.item_ids, table.rows(dataset.item_ids))
    return Prepared(dataset, table, compute_item_stats(dataset))


def effective_lambda_cca(config: Config, variant: str) -> float:
    return 0.0 if variant == "no_alignment" else config.lambda_cca


def standardize(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale so the mean squared row norm is 1; returns the scale used."""
    scale = float(np.sqrt((x**2).sum(1).mean())) or 1.0
    return x / scale, scale


def gate_targets(counts: np.ndarray, head_fraction: float, slope: float) -> np.ndarray:
    """Baseline popularity gate, centred on the head/tail boundary count."""
    order = np.sort(counts)[::-1]
    boundary = order[max(math.ceil(head_fraction * len(counts)) - 1, 0)]
    bias = -slope * math.log(boundary + 1.0)
    return np.array([baseline_gate(c + 1.0, slope, bias) for c in counts])


@dataclass
class Bundle:
    config: Config
    seed: int
    variant: str
    vocab: TokenVocab
    sem_model: RqVae
    col_model: RqVae
    sem_head: ProjectionHead
    col_head: ProjectionHead
    router: Router
    generator: Generator
    stats: ItemStats
    features: np.ndarray
    codes_sem: np.ndarray
    codes_col: np.ndarray
    alpha: np.ndarray
    allocations: np.ndarray
    layouts: np.ndarray
    trie: CodeTrie
    traces: dict[str, list[float]] = field(default_factory=dict)

    def refresh(self, sem_x: torch.Tensor, col_x: torch.Tensor) -> None:
        """Recompute codes, routing, layouts and trie from the current parameters."""
        self.codes_sem = rq_encode(self.sem_model, sem_x)[0].numpy()
        self.codes_col = rq_encode(self.col_model, col_x)[0].numpy()
        with torch.no_grad():
            self.alpha = current_alpha(self.router, self.features, self.variant, self.sem_model.codebooks.dtype).numpy()
        self.allocations = hard_allocate_batch(self.alpha, self.vocab.levels)
        self.layouts = item_layouts(self.codes_col, self.codes_sem, self.allocations, self.vocab)
        self.trie = build_trie(self.layouts, self.stats.counts)


def current_alpha(router: Router, features: np.ndarray, variant: str, dtype) -> torch.Tensor:
    forced = FORCED_ALPHA.get(variant)
    if forced is not None:
        return torch.full((len(features),), forced, dtype=dtype)
    return route(router, torch.as_tensor(features, dtype=dtype))


def joint_objective(parts: dict[str, torch.Tensor], config: Config, lambda_cca: float | None = None) -> torch.Tensor:
    """Weighted sum of the six training terms."""
    lam = config.lambda_cca if lambda_cca is None else lambda_cca
    return (parts["scl"] + parts["ccl"] + lam * parts["cca"] + config.lambda_arg * parts["arg"]
            + config.lambda_lb * parts["lb"] + config.lambda_smooth * parts["smooth"])


def joint_terms(bundle: Bundle, sem_x: torch.Tensor, col_x: torch.Tensor, item_batch: np.ndarray,
                windows: np.ndarray, bands: np.ndarray) -> dict[str, torch.Tensor]:
    """All loss components for one joint step, using the bundle's current layouts."""
    cfg = bundle.config
    dtype = bundle.sem_model.codebooks.dtype
    idx = torch.as_tensor(item_batch)
    scl, _, codes_s, _ = rqvae_loss(bundle.sem_model, sem_x[idx])
    ccl, _, codes_c, _ = rqvae_loss(bundle.col_model, col_x[idx])
    if len(item_batch) >= 2:
        cca = cca_loss(codes_s, codes_c, bundle.sem_model, bundle.col_model, bundle.sem_head, bundle.col_head,
                       cfg.cca_temperature, cfg.cca_symmetric)
    else:
        cca = scl.new_zeros(())
    alpha = current_alpha(bundle.router, bundle.features, bundle.variant, dtype)
    m_col, m_sem = soft_masks(alpha, bundle.vocab.levels, cfg.tau_m)
    channel, level = slot_levels(bundle.allocations, bundle.vocab.levels)
    masks = slot_mask_values(m_col, m_sem, channel, level)
    arg = arg_loss(bundle.generator, windows, bundle.layouts, masks)
    lb = load_balance_loss(alpha, bands)
    smooth = smoothness_loss(alpha, bundle.stats.counts)
    return {"scl": scl, "ccl": ccl, "cca": cca, "arg": arg, "lb": lb, "smooth": smooth}


class StageCache(dict):
    """In-memory memo of expensive stages keyed by config fingerprint and seed."""


def _train_cf(prep: Prepared, config: Config, seed: int, cache: StageCache | None):
    key = ("cf", config.fingerprint(*CF_KEYS), seed)
    if cache is not None and key in cache:
        return cache[key]
    _, table, history, losses = train_cf_encoder(prep.dataset, config, seed)
    out = (table, history, losses)
    if cache is not None:
        cache[key] = out
    return out


def train_quantizers(sem_x: torch.Tensor, col_x: torch.Tensor, config: Config, seed: int, lambda_cca: float):
    """Both quantizers and projection heads under ``L_SCL + L_CCL + lambda * L_CCA``."""
    gen = seed_everything(seed)
    dtype = sem_x.dtype
    sem = build_rqvae(sem_x.shape[1], config, "semantic")
    col = build_rqvae(col_x.shape[1], config, "collaborative")
    sem_head = ProjectionHead(sem_x.shape[1], config.d_shared).to(dtype)
    col_head = ProjectionHead(col_x.shape[1], config.d_shared).to(dtype)
    init_codebooks(sem, sem_x, gen)
    init_codebooks(col, col_x, gen)
    opt = Adam([(sem, config.rq_lr), (col, config.rq_lr), (sem_head, config.rq_lr), (col_head, config.rq_lr)])
    n = len(sem_x)
    trace = {"scl": [], "ccl": [], "cca": []}
    for epoch in range(config.rq_epochs):
        used_s = torch.zeros(sem.levels, sem.codebook_size, dtype=torch.long)
        used_c = torch.zeros_like(used_s)
        order = torch.randperm(n, generator=gen)
        sums = {k: 0.0 for k in trace}
        for start in range(0, n, config.rq_batch):
            idx = order[start:start + config.rq_batch]
            scl, _, cs, _ = rqvae_loss(sem, sem_x[idx])
            ccl, _, cc, _ = rqvae_loss(col, col_x[idx])
            loss = scl + ccl
            cca = scl.new_zeros(())
            if lambda_cca > 0 and len(idx) >= 2:
                cca = cca_loss(cs, cc, sem, col, sem_head, col_head, config.cca_temperature, config.cca_symmetric)
                loss = loss + lambda_cca * cca
            if not torch.isfinite(loss):
                raise DivergenceError(f"quantizer stage: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for j in range(sem.levels):
                used_s[j] += torch.bincount(cs[:, j], minlength=sem.codebook_size)
                used_c[j] += torch.bincount(cc[:, j], minlength=col.codebook_size)
            for k, v in (("scl", scl), ("ccl", ccl), ("cca", cca)):
                sums[k] += v.item() * len(idx)
        for k in trace:
            trace[k].append(sums[k] / n)
        if config.dead_code_reset and epoch < config.rq_epochs - 1:
            reset_dead_codes(sem, sem_x, used_s, gen)
            reset_dead_codes(col, col_x, used_c, gen)
    return sem, col, sem_head, col_head, trace


def _train_rq(sem_x, col_x, config: Config, seed: int, lambda_cca: float, cache: StageCache | None):
    key = ("rq", config.fingerprint(*RQ_KEYS), lambda_cca, seed)
    if cache is not None and key in cache:
        return copy.deepcopy(cache[key])
    out = train_quantizers(sem_x, col_x, config, seed, lambda_cca)
    if cache is not None:
        cache[key] = copy.deepcopy(out)
    return out


def train_bundle(prep: Prepared, config: Config, seed: int | None = None, variant: str | None = None,
                 cache: StageCache | None = None) -> tuple[Bundle, torch.Tensor, torch.Tensor]:
    """Run all three stages. Returns the bundle plus the standardized channel inputs."""
    seed = config.seed if seed is None else seed
    variant = config.variant if variant is None else variant
    if variant not in ("full", "no_alignment") and variant not in FORCED_ALPHA:
        raise ValueError(f"unknown variant {variant!r}")
    dtype = resolve_dtype(config.dtype)
    dataset = prep.dataset

    # stage 1: collaborative embeddings and the uncertainty feature
    col_table, history, cf_losses = _train_cf(prep, config, seed, cache)
    stats = compute_item_stats(dataset, history)
    sem_np, _ = standardize(prep.semantic.vectors)
    col_np, _ = standardize(col_table.vectors)
    sem_x = torch.as_tensor(sem_np, dtype=dtype)
    col_x = torch.as_tensor(col_np, dtype=dtype)

    # stage 2: quantizers with cross-codebook alignment
    lam = effective_lambda_cca(config, variant)
    sem, col, sem_head, col_head, rq_trace = _train_rq(sem_x, col_x, config, seed, lam, cache)

    # stage 3: router + generator, co-trained with the quantizer terms
    gen = seed_everything(seed + 1)
    vocab = TokenVocab(config.levels, config.codebook_size)
    features = stats.features()
    router = Router(features.shape[1], config.router_hidden, config.tau_r).to(dtype)
    if variant not in FORCED_ALPHA and config.router_warm_start:
        target = torch.as_tensor(gate_targets(stats.counts, config.head_fraction, config.gate_slope), dtype=dtype)
        fit_router_to_gate(router, torch.as_tensor(features, dtype=dtype), target)
    generator = Generator(vocab, config.gen_dim, config.gen_layers, config.gen_heads,
                          config.gen_context, config.gen_dropout).to(dtype)
    bundle = Bundle(config, seed, variant, vocab, sem, col, sem_head, col_head, router, generator, stats,
                    features, None, None, None, None, None, None)
    bundle.refresh(sem_x, col_x)

    windows = training_windows([dataset.train_sequence(u) for u in range(dataset.num_users)], config.gen_context)
    bands = popularity_bands(stats, config.num_bands)
    q_lr = config.rq_lr * config.joint_quantizer_lr_scale
    groups = [(generator, config.gen_lr), (sem, q_lr), (col, q_lr), (sem_head, q_lr), (col_head, q_lr)]
    if variant not in FORCED_ALPHA:
        groups.append((router, config.router_lr))
    opt = Adam(groups)
    traces = {"cf": cf_losses, **{f"rq_{k}": v for k, v in rq_trace.items()}}
    for k in ("scl", "ccl", "cca", "arg", "lb", "smooth", "total"):
        traces[f"joint_{k}"] = []
    n_items = dataset.num_items
    for epoch in range(config.gen_epochs):
        generator.train()
        order = torch.randperm(len(windows), generator=gen).numpy()
        sums = {k: 0.0 for k in ("scl", "ccl", "cca", "arg", "lb", "smooth", "total")}
        steps = 0
        for start in range(0, len(windows), config.gen_batch):
            wb = windows[order[start:start + config.gen_batch]]
            items = torch.randint(n_items, (min(config.rq_batch, n_items),), generator=gen).numpy()
            parts = joint_terms(bundle, sem_x, col_x, items, wb, bands)
            total = joint_objective(parts, config, lam)
            if not torch.isfinite(total):
                raise DivergenceError(f"joint stage: non-finite loss at epoch {epoch}, step {steps}")
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += float(v.detach()) if torch.is_tensor(v) else float(v)
            sums["total"] += float(total.detach())
            steps += 1
        for k, v in sums.items():
            traces[f"joint_{k}"].append(v / max(steps, 1))
        generator.eval()
        bundle.refresh(sem_x, col_x)
        log.info("joint epoch %d: arg %.4f total %.4f", epoch, traces["joint_arg"][-1], traces["joint_total"][-1])
    bundle.traces = traces
    return bundle, sem_x, col_x


# ---------------------------------------------------------------------------
# persistence


def save_bundle(bundle: Bundle, path: str | Path, extra_meta: dict | None = None) -> None:
    tensors = {}
    for name in ("sem_model", "col_model", "sem_head", "col_head", "router", "generator"):
        tensors.update(checkpoint.module_tensors(name, getattr(bundle, name)))
    for name in ("features", "codes_sem", "codes_col", "alpha", "allocations", "layouts"):
        tensors[f"array.{name}"] = getattr(bundle, name)
    st = bundle.stats
    for name in ("counts", "freq", "age", "sparsity", "uncertainty", "rank"):
        tensors[f"stats.{name}"] = getattr(st, name)
    meta = {
        "config": bundle.config.dumps(),
        "config_hash": bundle.config.fingerprint(),
        "seed": bundle.seed,
        "variant": bundle.variant,
        "sem_dim": bundle.sem_model.encoder[0].in_features,
        "col_dim": bundle.col_model.encoder[0].in_features,
        **(extra_meta or {}),
    }
    checkpoint.save_tensors(path, tensors, meta)


def load_bundle(path: str | Path) -> tuple[Bundle, dict]:
    from .config import loads

    tensors, meta = checkpoint.load_tensors(path)
    config = loads(meta["config"])
    dtype = resolve_dtype(config.dtype)
    vocab = TokenVocab(config.levels, config.codebook_size)
    sem = build_rqvae(meta["sem_dim"], config, "semantic")
    col = build_rqvae(meta["col_dim"], config, "collaborative")
    sem_head = ProjectionHead(meta["sem_dim"], config.d_shared).to(dtype)
    col_head = ProjectionHead(meta["col_dim"], config.d_shared).to(dtype)
    features = tensors["array.features"]
    router = Router(features.shape[1], config.router_hidden, config.tau_r).to(dtype)
    generator = Generator(vocab, config.gen_dim, config.gen_layers, config.gen_heads,
                          config.gen_context, config.gen_dropout).to(dtype)
    for name, mod in (("sem_model", sem), ("col_model", col), ("sem_head", sem_head),
                      ("col_head", col_head), ("router", router), ("generator", generator)):
        checkpoint.load_module(name, mod, tensors)
        mod.eval()
    stats = ItemStats(*(tensors[f"stats.{n}"] for n in ("counts", "freq", "age", "sparsity", "uncertainty", "rank")))
    layouts = tensors["array.layouts"]
    bundle = Bundle(config, meta["seed"], meta["variant"], vocab, sem, col, sem_head, col_head, router, generator,
                    stats, features, tensors["array.codes_sem"], tensors["array.codes_col"], tensors["array.alpha"],
                    tensors["array.allocations"], layouts, build_trie(layouts, stats.counts))
    return bundle, meta


def quantizer_usage(bundle: Bundle) -> dict[str, list[float]]:
    return {
        "semantic": usage_from_codes(bundle.codes_sem, bundle.vocab.codebook_size).perplexity,
        "collaborative": usage_from_codes(bundle.codes_col, bundle.vocab.codebook_size).perplexity,
    }


def head_items(bundle: Bundle) -> np.ndarray:
    return head_tail_partition(bundle.stats, bundle.config.head_fraction)[0]
