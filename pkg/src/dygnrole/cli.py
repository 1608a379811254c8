"""Command-line entry point.

Subcommands cover the whole pipeline: ingest, gen-synth, precompute,
pretrain, finetune, evaluate, probe. Every run writes a manifest (config
echo, seed, input digests, wall time) into its run directory. Exit codes:
0 success, 2 configuration/validation error, 3 I/O error, 4 numeric
failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from dygnrole import __version__
from dygnrole.analysis import (
    global_asymmetry,
    sample_probe_events,
    structural_probe_asymmetry,
)
from dygnrole.checkpointing import load_checkpoint, load_into_module
from dygnrole.config import RunConfig
from dygnrole.encoder import DyGnRoleEncoder, EncoderConfig
from dygnrole.exceptions import ConfigError, DataIOError, DygError, NumericError
from dygnrole.features import (
    CountVocabularySet,
    build_vocabularies_for_split,
    load_feature_matrices,
)
from dygnrole.finetune import finetune_loop, load_finetuned_model, _evaluate, assemble_event_tensors
from dygnrole.graph import SplitSpec, chronological_split, ingest_edges
from dygnrole.pretrain import cache_digest, precompute_batches, pretrain_loop, read_batch_cache
from dygnrole.synth import generate, write_dataset
from dygnrole.utils import read_json, sha256_of_file, write_json

logger = logging.getLogger("dygnrole")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _run_dir(args, command: str) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = os.environ.get("DYG_RUN_DIR", "runs")
    return Path(root) / command


def _require_files(*paths) -> dict[str, str]:
    """Fail fast (before any output is created) when an input is missing."""
    digests = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if not p.exists():
            raise ConfigError(f"input file not found: {p}")
        digests[str(p)] = sha256_of_file(p)
    return digests


def _write_manifest(
    run_dir: Path, command: str, config: RunConfig, inputs: dict, outputs: list,
    started: float,
) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "wall_time_s": round(time.time() - started, 3),
        "version": __version__,
    }
    write_json(run_dir / "manifest.json", manifest)


def _load_vocabs(
    args, config: RunConfig, graph, split_ranges
) -> CountVocabularySet:
    """Load the persisted vocabulary or rebuild it from the training split."""
    vocab_path = getattr(args, "vocab", None)
    if vocab_path:
        return CountVocabularySet.load(vocab_path)
    train_range, _, _ = split_ranges
    logger.info("no vocabulary file given; rebuilding from the training split")
    return build_vocabularies_for_split(
        graph, train_range, config.max_seq_len, config.n_min
    )


def _write_metrics_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ---- commands --------------------------------------------------------------


def cmd_ingest(args, config: RunConfig) -> int:
    inputs = _require_files(args.edges)
    started = time.time()
    graph = ingest_edges(args.edges, num_nodes_hint=args.num_nodes)
    run_dir = _run_dir(args, "ingest")
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "num_events": graph.num_events,
        "num_nodes": graph.num_nodes,
        "t_min": float(graph.timestamps.min()) if graph.num_events else None,
        "t_max": float(graph.timestamps.max()) if graph.num_events else None,
        "has_labels": graph.labels is not None,
        "num_classes_observed": graph.num_classes_observed,
    }
    write_json(run_dir / "ingest_summary.json", summary)
    logger.info("ingested %d events over %d nodes", graph.num_events, graph.num_nodes)
    _write_manifest(run_dir, "ingest", config, inputs, ["ingest_summary.json"], started)
    return EXIT_OK


def cmd_gen_synth(args, config: RunConfig) -> int:
    started = time.time()
    run_dir = _run_dir(args, "gen-synth")
    out_dir = Path(args.out_dir) if args.out_dir else run_dir / "data"
    dataset = generate(config.synth_config())
    paths = write_dataset(dataset, out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    logger.info(
        "generated %d edges / %d nodes / %d classes into %s",
        config.synth_edges, config.synth_nodes, config.synth_classes, out_dir,
    )
    _write_manifest(run_dir, "gen-synth", config, {}, list(paths.values()), started)
    return EXIT_OK


def cmd_precompute(args, config: RunConfig) -> int:
    inputs = _require_files(args.edges)
    started = time.time()
    graph = ingest_edges(args.edges)
    splits = chronological_split(graph, SplitSpec(config.train_end, config.val_end))
    split_range = {"train": splits[0], "val": splits[1]}[args.split]

    run_dir = _run_dir(args, "precompute")
    cache_dir = Path(args.cache_dir) if args.cache_dir else run_dir
    cache_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    cache_path = cache_dir / f"{args.split}.dgnb"
    n_batches = precompute_batches(
        graph, split_range, config.max_seq_len, config.batch_size,
        cache_path, split_name=args.split,
    )
    outputs.append(cache_path)
    logger.info("cached %d %s batches", n_batches, args.split)

    if args.split == "train":
        vocabs = build_vocabularies_for_split(
            graph, splits[0], config.max_seq_len, config.n_min
        )
        vocab_path = cache_dir / "vocab.json"
        vocabs.save(vocab_path)
        outputs.append(vocab_path)
        logger.info("vocabulary sizes (src_w, src_c, dst_w, dst_c): %s", vocabs.sizes)

    run_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(run_dir, "precompute", config, inputs, outputs, started)
    return EXIT_OK


def cmd_pretrain(args, config: RunConfig) -> int:
    cache_dir = Path(args.cache_dir)
    train_cache = cache_dir / "train.dgnb"
    val_cache = cache_dir / "val.dgnb"
    vocab_path = cache_dir / "vocab.json"
    inputs = _require_files(
        args.edges, args.node_features, args.edge_features,
        train_cache, val_cache, vocab_path,
    )
    started = time.time()

    graph = ingest_edges(args.edges)
    feats = load_feature_matrices(args.node_features, args.edge_features)
    vocabs = CountVocabularySet.load(vocab_path)

    # guard against caches built with a different k/batch/split geometry
    for split_name, path in (("train", train_cache), ("val", val_cache)):
        _, k, digest = read_batch_cache(path)
        expected = cache_digest(
            config.max_seq_len, config.batch_size, split_name,
            graph.num_events, graph.num_nodes,
        )
        if digest != expected:
            raise ConfigError(
                f"{path}: cache digest mismatch; re-run precompute with the "
                f"current config"
            )

    run_dir = _run_dir(args, "pretrain")
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = Path(args.out) if args.out else run_dir / "pretrain.dgnc"

    encoder_config = config.encoder_config(
        feats.d_f_node, feats.d_f_edge, vocabs.sizes
    )
    result = pretrain_loop(
        encoder_config, feats, vocabs, train_cache, val_cache, checkpoint_path,
        seed=config.seed, tau=config.tau, lr=config.lr,
        weight_decay=config.weight_decay, max_epochs=config.pretrain_max_epochs,
        patience=config.pretrain_patience,
    )
    metrics_path = run_dir / "pretrain_metrics.jsonl"
    _write_metrics_jsonl(metrics_path, result.history)
    logger.info(
        "pretraining done: best val MRR %.4f after %d epochs (early stop: %s)",
        result.best_val_mrr, result.epochs_run, result.stopped_early,
    )
    _write_manifest(
        run_dir, "pretrain", config, inputs, [checkpoint_path, metrics_path], started
    )
    return EXIT_OK


def cmd_finetune(args, config: RunConfig) -> int:
    config = config.apply_ablation(args.ablation)
    if config.use_pretrain and not args.from_checkpoint:
        raise ConfigError(
            "finetune requires --from-checkpoint unless --ablation pretrain"
        )
    init_checkpoint = args.from_checkpoint if config.use_pretrain else None
    inputs = _require_files(
        args.edges, args.node_features, args.edge_features, args.label_meta,
        init_checkpoint, getattr(args, "vocab", None),
    )
    started = time.time()

    graph = ingest_edges(args.edges)
    feats = load_feature_matrices(args.node_features, args.edge_features)
    splits = chronological_split(graph, SplitSpec(config.train_end, config.val_end))
    vocabs = _load_vocabs(args, config, graph, splits)
    num_classes = int(read_json(args.label_meta)["num_classes"])

    if init_checkpoint is not None:
        _, ckpt_config, _ = load_checkpoint(init_checkpoint)
        encoder_config = EncoderConfig.from_dict(ckpt_config["encoder"])
        expected = config.encoder_config(
            feats.d_f_node, feats.d_f_edge, vocabs.sizes
        )
        if encoder_config != expected:
            raise ConfigError(
                "pretrained checkpoint architecture does not match the run "
                f"config/ablation: checkpoint={encoder_config.to_dict()}, "
                f"expected={expected.to_dict()}"
            )
    else:
        encoder_config = config.encoder_config(
            feats.d_f_node, feats.d_f_edge, vocabs.sizes
        )

    run_dir = _run_dir(args, "finetune")
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = Path(args.out) if args.out else run_dir / "finetune.dgnc"

    result = finetune_loop(
        encoder_config, graph, feats, vocabs,
        splits[0], splits[1], splits[2],
        num_classes=num_classes,
        protocol=config.finetune_protocol(),
        seed=config.seed,
        checkpoint_path=checkpoint_path,
        init_checkpoint=init_checkpoint,
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    metrics_path = run_dir / "finetune_metrics.jsonl"
    _write_metrics_jsonl(metrics_path, result.history)
    summary = {
        "seed": config.seed,
        "ablation": args.ablation,
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_val_macro_f1,
        "test_macro_f1": result.test_macro_f1,
        "test_weighted_f1": result.test_weighted_f1,
        "epochs_run": result.epochs_run,
    }
    summary_path = run_dir / "summary.json"
    write_json(summary_path, summary)
    logger.info(
        "finetuning done: test macro F1 %.4f / weighted F1 %.4f",
        result.test_macro_f1, result.test_weighted_f1,
    )
    _write_manifest(
        run_dir, "finetune", config, inputs,
        [checkpoint_path, metrics_path, summary_path], started,
    )
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig) -> int:
    inputs = _require_files(
        args.checkpoint, args.edges, args.node_features, args.edge_features,
        getattr(args, "vocab", None),
    )
    started = time.time()
    graph = ingest_edges(args.edges)
    feats = load_feature_matrices(args.node_features, args.edge_features)
    splits = chronological_split(graph, SplitSpec(config.train_end, config.val_end))
    vocabs = _load_vocabs(args, config, graph, splits)

    model, ckpt_config, _ = load_finetuned_model(args.checkpoint)
    split_range = dict(zip(("train", "val", "test"), splits))[args.split]
    if len(split_range) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    src, dst, labels = assemble_event_tensors(
        graph, feats, vocabs, split_range, model.encoder.config.max_seq_len
    )
    metrics = _evaluate(
        model, src, dst, labels, ckpt_config["num_classes"], config.batch_size
    )
    run_dir = _run_dir(args, "evaluate")
    run_dir.mkdir(parents=True, exist_ok=True)
    out = {
        "split": args.split,
        "num_events": len(split_range),
        "macro_f1": metrics["macro_f1"],
        "weighted_f1": metrics["weighted_f1"],
        "loss": metrics["loss"],
    }
    out_path = run_dir / "eval_metrics.json"
    write_json(out_path, out)
    logger.info(
        "%s: macro F1 %.4f / weighted F1 %.4f over %d events",
        args.split, out["macro_f1"], out["weighted_f1"], out["num_events"],
    )
    _write_manifest(run_dir, "evaluate", config, inputs, [out_path], started)
    return EXIT_OK


def load_backbone(path: str | Path) -> tuple[DyGnRoleEncoder, dict, int]:
    """Load the encoder from either a pretraining or finetuning checkpoint."""
    _, ckpt_config, seed = load_checkpoint(path)
    kind = ckpt_config.get("kind")
    if kind == "finetune":
        model, cfg, seed = load_finetuned_model(path)
        return model.encoder, cfg, seed
    if kind == "pretrain":
        encoder = DyGnRoleEncoder(EncoderConfig.from_dict(ckpt_config["encoder"]))
        load_into_module(path, encoder)
        return encoder, ckpt_config, seed
    raise DataIOError(f"{path}: unknown checkpoint kind {kind!r}")


def cmd_probe(args, config: RunConfig) -> int:
    inputs = _require_files(
        args.checkpoint, args.edges, args.node_features, args.edge_features,
        getattr(args, "vocab", None),
    )
    started = time.time()
    graph = ingest_edges(args.edges)
    feats = load_feature_matrices(args.node_features, args.edge_features)
    splits = chronological_split(graph, SplitSpec(config.train_end, config.val_end))
    vocabs = _load_vocabs(args, config, graph, splits)

    encoder, _, _ = load_backbone(args.checkpoint)
    samples = sample_probe_events(graph, splits[2], args.samples, config.seed)
    probe_fn = {
        "global": global_asymmetry,
        "structural": structural_probe_asymmetry,
    }[args.kind]
    report = probe_fn(encoder, graph, feats, vocabs, samples)

    run_dir = _run_dir(args, "probe")
    run_dir.mkdir(parents=True, exist_ok=True)
    out_path = Path(args.out) if args.out else run_dir / "report.json"
    write_json(out_path, report.to_dict())
    logger.info(
        "%s asymmetry: mean %.6f (std %.6f) over %d samples (%d skipped)",
        args.kind, report.mean_score, report.std, report.num_samples, report.skipped,
    )
    _write_manifest(run_dir, "probe", config, inputs, [out_path], started)
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dygnrole",
        description="Role-aware dynamic-graph transformer pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config key",
        )
        p.add_argument("--run-dir", help="output directory (default $DYG_RUN_DIR/<cmd>)")
        p.add_argument("--seed", type=int, help="master seed override")

    p = sub.add_parser("ingest", help="parse and summarize an edge CSV")
    common(p)
    p.add_argument("--edges", required=True, help="CSV with header src,dst,timestamp[,label]")
    p.add_argument("--num-nodes", type=int, help="minimum node count")

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled temporal graph")
    common(p)
    p.add_argument("--nodes", type=int, help="number of nodes")
    p.add_argument("--edges", type=int, help="number of edges")
    p.add_argument("--classes", type=int, help="number of label classes")
    p.add_argument("--beta", type=float, help="planted role-bias strength in [0,1]")
    p.add_argument("--out-dir", help="dataset output directory")

    p = sub.add_parser("precompute", help="build the contrastive batch cache")
    common(p)
    p.add_argument("--edges", required=True)
    p.add_argument("--split", choices=("train", "val"), required=True)
    p.add_argument("--cache-dir", help="cache output directory (default run dir)")

    p = sub.add_parser("pretrain", help="TCLP pretraining from cached batches")
    common(p)
    p.add_argument("--edges", required=True)
    p.add_argument("--node-features", required=True)
    p.add_argument("--edge-features", required=True)
    p.add_argument("--cache-dir", required=True, help="directory with train.dgnb/val.dgnb/vocab.json")
    p.add_argument("--out", help="checkpoint path (default run dir/pretrain.dgnc)")

    p = sub.add_parser("finetune", help="label-constrained future edge classification")
    common(p)
    p.add_argument("--edges", required=True)
    p.add_argument("--node-features", required=True)
    p.add_argument("--edge-features", required=True)
    p.add_argument("--label-meta", required=True, help="JSON with num_classes")
    p.add_argument("--from-checkpoint", help="pretraining checkpoint to start from")
    p.add_argument("--vocab", help="vocabulary JSON (default: rebuild from train split)")
    p.add_argument(
        "--ablation", choices=("nfe", "rspe", "cls", "pretrain", "none"),
        default="none",
    )
    p.add_argument("--out", help="checkpoint path (default run dir/finetune.dgnc)")

    p = sub.add_parser("evaluate", help="evaluate a finetuned checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--node-features", required=True)
    p.add_argument("--edge-features", required=True)
    p.add_argument("--vocab", help="vocabulary JSON (default: rebuild from train split)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("probe", help="run a role-asymmetry probe")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--node-features", required=True)
    p.add_argument("--edge-features", required=True)
    p.add_argument("--vocab", help="vocabulary JSON (default: rebuild from train split)")
    p.add_argument("--kind", choices=("global", "structural"), required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", help="report path (default run dir/report.json)")

    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "gen-synth": cmd_gen_synth,
    "precompute": cmd_precompute,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
}


def _config_from_args(args) -> RunConfig:
    config = RunConfig.load(args.config, args.overrides)
    if args.seed is not None:
        config = config.with_overrides([f"seed={args.seed}"])
    if args.command == "gen-synth":
        for flag, key in (
            ("nodes", "synth_nodes"), ("edges", "synth_edges"),
            ("classes", "synth_classes"), ("beta", "synth_beta"),
        ):
            value = getattr(args, flag, None)
            if value is not None:
                config = config.with_overrides([f"{key}={value}"])
    return config


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config_from_args(args)
        torch.manual_seed(config.seed)
        np.random.seed(config.seed % (2**32))
        return COMMANDS[args.command](args, config)
    except (ConfigError,) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataIOError, OSError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except DygError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
