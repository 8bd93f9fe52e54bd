"""Command-line surface: one subcommand per pipeline stage.

Every subcommand reads and writes only the files named in its flags, exits
0 on success and nonzero with a one-line `error: ...` on stderr otherwise.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config, with_seed
from .pipeline import (GridContext, GridRunner, derive_seed, downstream_finetune,
                       evaluate, pretrain_base, split_language, upstream_finetune)
from .pruning import global_l1_prune, iou as mask_iou
from .reports import (read_grid_csv, write_downstream_averages, write_grid_csv,
                      write_iou_matrix, write_upstream_averages)
from .synthlang import read_corpus_jsonl, write_corpus_jsonl


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _finetune_corpus(cfg: ExperimentConfig, corpus_dir: str | None):
    if corpus_dir:
        return read_corpus_jsonl(corpus_dir)
    return cfg.build_corpora()[1]


def _metadata(cfg: ExperimentConfig, stage: str, language: str | None,
              epoch: int) -> dict:
    return {"language": language, "stage": stage, "seed": cfg.seed, "epoch": epoch}


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.corpus:
        corpus = read_corpus_jsonl(args.corpus)
    else:
        corpus = cfg.build_corpora()[0]
    if args.export_corpus:
        write_corpus_jsonl(corpus, args.export_corpus)
    base = pretrain_base(corpus["train"], cfg.model,
                         replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain")))
    save_checkpoint(args.out, base,
                    metadata=_metadata(cfg, "base", None, cfg.pretrain.epochs))
    print(f"pretrained base -> {args.out}")
    return 0


def cmd_upstream(args) -> int:
    cfg = _load_config(args)
    base, _, _ = load_checkpoint(args.base)
    corpus = _finetune_corpus(cfg, args.corpus)
    result = upstream_finetune(
        base, args.language, corpus,
        replace(cfg.upstream, seed=derive_seed(cfg.seed, "upstream", args.language)))
    save_checkpoint(args.out, result.best,
                    metadata=_metadata(cfg, "upstream", args.language, result.best_epoch))
    best = min(result.val_losses) if result.val_losses else float("nan")
    print(f"upstream {args.language}: best_epoch={result.best_epoch} "
          f"best_val_loss={best:.6g} -> {args.out}")
    return 0


def cmd_prune(args) -> int:
    model, _, meta = load_checkpoint(args.model)
    os.makedirs(args.out, exist_ok=True)
    for sparsity in args.sparsity:
        mask = global_l1_prune(model, sparsity)
        meta_out = {"language": meta.get("language"), "stage": "mask",
                    "seed": meta.get("seed"), "epoch": meta.get("epoch"),
                    "sparsity": sparsity}
        out_path = os.path.join(args.out, f"mask_s{sparsity:.2f}.ckpt")
        save_checkpoint(out_path, model, mask=mask, metadata=meta_out)
        print(f"mask sparsity={sparsity:g} -> {out_path}")
    return 0


def cmd_downstream(args) -> int:
    cfg = _load_config(args)
    model, _, model_meta = load_checkpoint(args.model)
    _, mask, _ = load_checkpoint(args.mask)
    if mask is None:
        raise CheckpointError(f"{args.mask} has no mask section")
    corpus = _finetune_corpus(cfg, args.corpus)
    matched = model_meta.get("language") == args.language
    result = downstream_finetune(
        model, mask, args.language, corpus,
        replace(cfg.downstream,
                seed=derive_seed(cfg.seed, "downstream", args.language)),
        matched)
    test = split_language(corpus["test"], args.language)
    cer_value = evaluate(result.model, test)
    save_checkpoint(args.out, result.model, mask=mask,
                    metadata=_metadata(cfg, "downstream", args.language,
                                       result.epochs_run))
    print(f"downstream {args.language}: cer={cer_value:.2f} "
          f"epochs_run={result.epochs_run} best_val_loss={result.best_val_loss:.6g} "
          f"-> {args.out}")
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    pretrain_corpus, corpus = cfg.build_corpora()
    write_corpus_jsonl(corpus, os.path.join(args.out, "corpus"))

    if args.base:
        base, _, _ = load_checkpoint(args.base)
    else:
        base = pretrain_base(pretrain_corpus["train"], cfg.model,
                             replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain")))
        save_checkpoint(os.path.join(args.out, "base.ckpt"), base,
                        metadata=_metadata(cfg, "base", None, cfg.pretrain.epochs))

    runner = GridRunner(GridContext(base=base, corpus=corpus,
                                    upstream_config=cfg.upstream,
                                    downstream_config=cfg.downstream))
    results = runner.run(cfg.experiment_specs())

    for (language, seed), up in sorted(runner.upstream_cache.items()):
        save_checkpoint(os.path.join(args.out, f"upstream_{language}_seed{seed}.ckpt"),
                        up.best, metadata=_metadata(cfg, "upstream", language, up.best_epoch))
    for (languages, sparsity, seed), mask in sorted(runner.mask_cache.items()):
        label = "+".join(languages)
        save_checkpoint(
            os.path.join(args.out, f"mask_{label}_s{sparsity:.2f}_seed{seed}.ckpt"),
            runner.upstream_cache[(languages[0], seed)].best, mask=mask,
            metadata={"language": label, "stage": "mask", "seed": seed,
                      "epoch": None, "sparsity": sparsity})

    write_grid_csv(results, os.path.join(args.out, "grid.csv"))
    write_upstream_averages(results, os.path.join(args.out, "upstream_avg.csv"))
    write_downstream_averages(results, os.path.join(args.out, "downstream_avg.csv"))

    failed = [r for r in results if r.error is not None]
    for r in failed:
        print(f"cell failed: {r.upstream}/{r.downstream} mask={r.mask_source} "
              f"sparsity={r.sparsity:g} seed={r.seed}: {r.error}", file=sys.stderr)
    print(f"grid: {len(results)} cells, {len(failed)} failed -> {args.out}")
    return 0 if len(failed) < len(results) else 1


def _iou_matrix(paths: list[str]) -> tuple[list[str], list[list[float]]]:
    labels, masks = [], []
    for path in paths:
        _, mask, _ = load_checkpoint(path)
        if mask is None:
            raise CheckpointError(f"{path} has no mask section")
        labels.append(os.path.splitext(os.path.basename(path))[0])
        masks.append(mask)
    matrix = [[mask_iou(a, b) for b in masks] for a in masks]
    return labels, matrix


def cmd_iou(args) -> int:
    labels, matrix = _iou_matrix(args.mask)
    write_iou_matrix(labels, matrix, args.out)
    print(f"iou matrix over {len(labels)} masks -> {args.out}")
    return 0


def cmd_report(args) -> int:
    results = read_grid_csv(args.grid)
    os.makedirs(args.out, exist_ok=True)
    write_grid_csv(results, os.path.join(args.out, "grid.csv"))
    skipped_up = write_upstream_averages(results, os.path.join(args.out, "upstream_avg.csv"))
    skipped_down = write_downstream_averages(results,
                                             os.path.join(args.out, "downstream_avg.csv"))
    for name in skipped_up:
        print(f"upstream {name}: incomplete grid, skipped in averages", file=sys.stderr)
    for name in skipped_down:
        print(f"downstream {name}: incomplete grid, skipped in averages", file=sys.stderr)
    if args.mask:
        labels, matrix = _iou_matrix(args.mask)
        write_iou_matrix(labels, matrix, os.path.join(args.out, "iou_matrix.csv"))
    print(f"report on {len(results)} rows -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subnetlab",
        description="language-specific subnetwork experiments on synthetic corpora")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        for flag, kwargs in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kwargs)
        p.set_defaults(fn=fn)
        return p

    config = dict(required=True, help="experiment config JSON")
    seed = dict(type=int, default=None, help="override the config seed")
    corpus = dict(default=None, help="read corpus JSONL from this directory")

    add("pretrain", cmd_pretrain, config=config, seed=seed, corpus=corpus,
        export_corpus=dict(default=None, help="also write the corpus JSONL here"),
        out=dict(required=True, help="output base checkpoint"))
    add("upstream", cmd_upstream, config=config, seed=seed, corpus=corpus,
        base=dict(required=True, help="base checkpoint"),
        language=dict(required=True), out=dict(required=True))
    add("prune", cmd_prune,
        model=dict(required=True, help="model checkpoint to rank"),
        sparsity=dict(type=float, action="append", required=True,
                      help="target sparsity (repeatable)"),
        out=dict(required=True, help="output directory for mask checkpoints"))
    add("downstream", cmd_downstream, config=config, seed=seed, corpus=corpus,
        model=dict(required=True), mask=dict(required=True),
        language=dict(required=True), out=dict(required=True))
    add("grid", cmd_grid, config=config, seed=seed,
        base=dict(default=None, help="reuse this base checkpoint"),
        out=dict(required=True, help="output directory"))
    add("iou", cmd_iou,
        mask=dict(action="append", required=True, help="mask checkpoint (repeatable)"),
        out=dict(required=True, help="output CSV"))
    add("report", cmd_report,
        grid=dict(required=True, help="grid.csv produced by the grid command"),
        mask=dict(action="append", default=None,
                  help="mask checkpoints for the IOU matrix (repeatable)"),
        out=dict(required=True, help="output directory"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
