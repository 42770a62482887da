"""Command line: synth, prepare, train, eval, ablate, sweep.

Every command reads a flat config file (``--config``), writes into ``--out``
and leaves a ``run_manifest.json`` recording the config hash and output
hashes. Identical config and seed give identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import VARIANTS, Config, load_config
from .data import (
    build_dataset,
    compute_item_stats,
    dataset_interactions,
    leave_last_out_split,
    load_interactions,
    synth_world,
    write_interactions,
    write_split_manifest,
)
from .embed import EmbeddingTable, load_semantic_embeddings, write_embeddings
from .evaluate import budget_sweep, evaluate, format_sweep, run_ablation, write_report
from .generate import write_recommendations
from .pipeline import Prepared, StageCache, load_bundle, prepare_files, prepare_synth, save_bundle, train_bundle
from .quantize import write_codes
from .route import write_allocations

log = logging.getLogger("flexcode")

PREPARED = ("interactions.tsv", "semantic.tsv", "split_manifest.tsv")


class StaleCheckpointError(RuntimeError):
    pass


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out: Path, command: str, config: Config, seed: int, files: list[Path], extra: dict | None = None) -> Path:
    """Record what produced ``files``; merges with an existing manifest."""
    path = out / "run_manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {"runs": {}}
    data["runs"][command] = {
        "config_hash": config.fingerprint(),
        "seed": seed,
        "outputs": {str(f.relative_to(out)): _sha(f) for f in files},
        **(extra or {}),
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_prepared(prep: Prepared, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in PREPARED]
    write_interactions(dataset_interactions(prep.dataset), paths[0])
    write_embeddings(prep.semantic, paths[1])
    write_split_manifest(prep.dataset, paths[2])
    return paths


def load_prepared(out: Path) -> Prepared:
    """Read back what ``prepare`` wrote; the data is already filtered and split."""
    for name in PREPARED:
        if not (out / name).exists():
            raise FileNotFoundError(f"{out / name} missing; run `prepare` first")
    dataset = leave_last_out_split(build_dataset(load_interactions(out / "interactions.tsv")))
    table = load_semantic_embeddings(out / "semantic.tsv")
    table = EmbeddingTable("semantic", dataset.item_ids, table.rows(dataset.item_ids))
    return Prepared(dataset, table, compute_item_stats(dataset))


def bundle_path(out: Path, variant: str, seed: int) -> Path:
    return out / f"bundle_{variant}_s{seed}.ckpt"


def cmd_synth(cfg: Config, seed: int, out: Path) -> list[Path]:
    """Raw synthetic log plus content vectors, before any filtering."""
    out.mkdir(parents=True, exist_ok=True)
    world = synth_world(cfg.synth_config(), seed)
    ids = tuple(f"i{i}" for i in range(len(world.semantic)))
    paths = [out / "raw_interactions.tsv", out / "raw_semantic.tsv"]
    write_interactions(world.interactions, paths[0])
    write_embeddings(EmbeddingTable("semantic", ids, world.semantic), paths[1])
    _manifest(out, "synth", cfg, seed, paths)
    return paths


def cmd_prepare(cfg: Config, seed: int, out: Path, synth: bool) -> list[Path]:
    prep = prepare_synth(cfg, seed) if synth else prepare_files(cfg)
    paths = _write_prepared(prep, out)
    d = prep.dataset
    _manifest(out, "prepare", cfg, seed, paths, {"users": d.num_users, "items": d.num_items,
                                                 "dropped_users": d.dropped_users, "synthetic": synth})
    return paths


def _export(bundle, item_ids, out: Path, stem: str) -> list[Path]:
    paths = [out / f"{stem}_codes_collaborative.tsv", out / f"{stem}_codes_semantic.tsv", out / f"{stem}_allocations.tsv"]
    write_codes(paths[0], item_ids, "collaborative", bundle.codes_col)
    write_codes(paths[1], item_ids, "semantic", bundle.codes_sem)
    write_allocations(paths[2], item_ids, bundle.alpha, bundle.allocations)
    return paths


def cmd_train(cfg: Config, seed: int, out: Path) -> Path:
    prep = load_prepared(out)
    bundle, _, col_x = train_bundle(prep, cfg, seed, cfg.variant)
    path = bundle_path(out, cfg.variant, seed)
    save_bundle(bundle, path)
    stem = f"{cfg.variant}_s{seed}"
    files = [path] + _export(bundle, prep.dataset.item_ids, out, stem)
    traces = out / f"{stem}_traces.json"
    traces.write_text(json.dumps(bundle.traces, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    emb = out / f"{stem}_collaborative.tsv"
    write_embeddings(EmbeddingTable("collaborative", prep.dataset.item_ids, col_x.double().numpy()), emb)
    files += [traces, emb]
    _manifest(out, f"train:{stem}", cfg, seed, files, {"trie": bundle.trie.collision_stats()})
    return path


def cmd_eval(cfg: Config, seed: int, out: Path) -> list[Path]:
    path = bundle_path(out, cfg.variant, seed)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `train` first")
    bundle, meta = load_bundle(path)
    if meta["config_hash"] != cfg.fingerprint():
        raise StaleCheckpointError(
            f"{path} was trained with config {meta['config_hash']}, current config is {cfg.fingerprint()}; retrain")
    prep = load_prepared(out)
    report, recs = evaluate(bundle, prep.dataset, bundle.stats)
    stem = f"metrics_{cfg.variant}_s{seed}"
    text, js = write_report(report, out, stem)
    rec_path = out / f"recommendations_{cfg.variant}_s{seed}.tsv"
    write_recommendations(rec_path, prep.dataset.user_ids, prep.dataset.item_ids, recs, max(cfg.ks))
    files = [text, js, rec_path]
    _manifest(out, f"eval:{cfg.variant}_s{seed}", cfg, seed, files)
    return files


def cmd_ablate(cfg: Config, seed: int, out: Path, variants: list[str]) -> Path:
    prep = load_prepared(out)
    cache = StageCache()
    lines = ["variant\toverall\thead\ttail"]
    files = []
    for v in variants:
        rep = run_ablation(v, prep, cfg.replace(variant=v), seed, cache)
        files.extend(write_report(rep, out, f"ablation_{v}_s{seed}"))
        lines.append(f"{v}\t{rep.overall['ndcg@10']!r}\t{rep.head['ndcg@10']!r}\t{rep.tail['ndcg@10']!r}")
    table = out / f"ablation_s{seed}.tsv"
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _manifest(out, f"ablate:s{seed}", cfg, seed, files + [table])
    return table


def cmd_sweep(cfg: Config, seed: int, out: Path, budgets: list[int], variants: list[str]) -> Path:
    prep = load_prepared(out)
    table = budget_sweep(prep, cfg, budgets, seed, variants, StageCache())
    path = out / f"sweep_s{seed}.tsv"
    path.write_text(format_sweep(table), encoding="utf-8")
    _manifest(out, f"sweep:s{seed}", cfg, seed, [path], {"budgets": budgets})
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexcode", description="Popularity-aware dual-codebook generative recommender")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("synth", "write a raw synthetic long-tail log"),
                        ("prepare", "filter, split and write the dataset"),
                        ("train", "train one variant"),
                        ("eval", "evaluate a trained variant (or run a budget sweep with --sweep)"),
                        ("ablate", "train and evaluate several variants"),
                        ("sweep", "token-budget sweep")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", type=Path, required=True)
        if name == "prepare":
            s.add_argument("--synth", action="store_true", help="generate a synthetic dataset instead of reading files")
        if name in ("train", "eval", "ablate", "sweep"):
            s.add_argument("--variant", default=None,
                           help="variant name; ablate/sweep accept a comma list (default: all)")
        if name in ("eval", "sweep"):
            s.add_argument("--sweep", type=_int_list, default=None, help="token budgets, e.g. 3,4,5,6")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    variant_arg = getattr(args, "variant", None)
    multi = args.command in ("ablate", "sweep")
    variants = [v.strip() for v in variant_arg.split(",")] if variant_arg else None
    if variants:
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            print(f"error: unknown variant {bad[0]!r}; choose from {', '.join(VARIANTS)}", file=sys.stderr)
            return 2
    try:
        single = variants[0] if variants and not multi else None
        cfg = load_config(args.config, seed=args.seed, variant=single)
        seed = cfg.seed
        out = args.out
        if args.command == "synth":
            paths = cmd_synth(cfg, seed, out)
        elif args.command == "prepare":
            paths = cmd_prepare(cfg, seed, out, args.synth)
        elif args.command == "train":
            paths = [cmd_train(cfg, seed, out)]
        elif args.command == "eval" and args.sweep:
            paths = [cmd_sweep(cfg, seed, out, args.sweep, variants or [cfg.variant])]
        elif args.command == "eval":
            paths = cmd_eval(cfg, seed, out)
        elif args.command == "ablate":
            paths = [cmd_ablate(cfg, seed, out, variants or list(VARIANTS))]
        else:
            budgets = args.sweep or [3, 4, 5, 6]
            paths = [cmd_sweep(cfg, seed, out, budgets, variants or ["sid_only", "cid_only", "fixed_split", "full"])]
    except (FileNotFoundError, ValueError, StaleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
