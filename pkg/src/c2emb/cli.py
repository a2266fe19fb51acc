"""Command line entry point: train, embed, eval, merge, inspect.

Diagnostics go to stderr and the exit status is 0 only on full success;
reports and inspection output go to stdout, everything else to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import CliConfig, load_config
from .data import TemplateRegistry, load_jsonl
from .errors import C2Error, CheckpointError, ConfigError
from .estimator import embedding_fn
from .evaluation import evaluate, load_task
from .model import EmbeddingModel
from .serialization import (
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
    save_embeddings,
)
from .trainer import merge_checkpoints, train

__all__ = ["main"]


def _registry_for(cfg: CliConfig) -> TemplateRegistry:
    if cfg.templates is None:
        return TemplateRegistry.builtin()
    return TemplateRegistry.load(cfg.templates)


def _load_model(cfg: CliConfig, checkpoint: Path) -> EmbeddingModel:
    """Restore a model from a checkpoint, refusing architecture mismatches."""
    ck = load_checkpoint(checkpoint)
    model = EmbeddingModel.create(cfg.model, seed=cfg.run.seed)
    expect = cfg.model.digest()
    if ck.config_hash != expect:
        raise CheckpointError(
            f"{checkpoint} was written for model config {ck.config_hash[:12]}, "
            f"but this config hashes to {expect[:12]}")
    model.load_state(ck.params)
    return model


def _require(value, name: str):
    if value is None:
        raise ConfigError(f"{name} must be set for this command")
    return value


# ── Commands ────────────────────────────────────────────────────────────────

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=args.seed))
    train_path = _require(cfg.train_data, "data.train")
    out_dir = _require(cfg.output_dir, "data.output_dir")
    if not train_path.is_file():
        raise ConfigError(f"data.train does not exist: {train_path}")
    registry = _registry_for(cfg)
    examples = load_jsonl(train_path, registry)

    out_dir.mkdir(parents=True, exist_ok=True)
    model = EmbeddingModel.create(cfg.model, seed=cfg.run.seed)
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as log:
        train(examples, model, cfg.run, registry,
              checkpoint_dir=out_dir, log_stream=log,
              config_hash=cfg.model.digest())
    return 0


def cmd_embed(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else _require(
        cfg.checkpoint, "data.checkpoint")
    registry = _registry_for(cfg)
    registry.get(args.task)  # unknown task fails here, listing known ones
    model = _load_model(cfg, ckpt)

    with open(args.input, encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh]
    embed = embedding_fn(model, registry, normalize=not args.no_normalize)
    matrix = embed(texts, args.task, args.side)
    save_embeddings(args.out, matrix)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else _require(
        cfg.checkpoint, "data.checkpoint")
    task_dirs = ([Path(d) for d in args.tasks] if args.tasks is not None
                 else list(cfg.eval_tasks))
    if not task_dirs:
        raise ConfigError("no eval tasks: pass --tasks or set eval.tasks")
    registry = _registry_for(cfg)
    tasks = [load_task(d) for d in task_dirs]
    for task in tasks:
        registry.get(task.name)  # fail fast before embedding anything
    model = _load_model(cfg, ckpt)

    report = evaluate(embedding_fn(model, registry), tasks,
                      k=args.k if args.k is not None else cfg.eval_k)
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def cmd_merge(args) -> int:
    try:
        weights = [float(w) for w in args.weights.split(",")]
    except ValueError:
        raise ConfigError(f"--weights must be comma-separated numbers, "
                          f"got {args.weights!r}")
    if len(args.checkpoints) < 2:
        raise ConfigError("merge needs at least 2 checkpoints")
    checkpoints = [load_checkpoint(p) for p in args.checkpoints]
    merged = merge_checkpoints(checkpoints, weights)
    save_checkpoint(merged, args.out)
    return 0


def cmd_inspect(args) -> int:
    summary = inspect_checkpoint(args.checkpoint)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


# ── Parser ──────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c2",
        description="Contrastive code embedding pipeline: train, embed, "
                    "evaluate, merge, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the root seed from the config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="embed one text per input line")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--side", required=True, choices=["query", "doc"])
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--no-normalize", action="store_true",
                   help="skip unit-norm scaling of output rows")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("eval", help="score retrieval tasks, report to stdout")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", nargs="*", default=None, metavar="DIR")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("merge", help="weighted-average checkpoints")
    p.add_argument("--weights", required=True,
                   help="comma-separated, e.g. 1,1,1,1")
    p.add_argument("checkpoints", nargs="+", metavar="CKPT")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("inspect", help="summarize a checkpoint as JSON")
    p.add_argument("checkpoint", metavar="CKPT")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except C2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
