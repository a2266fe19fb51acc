"""Contrastive training: losses, schedule, optimizer, and checkpoint merging.

Two objectives share a temperature: an in-batch loss that treats every other
document in the (globally gathered) batch as a negative, and a per-query
loss over explicit hard negatives.  Batches are group-homogeneous, so one
dataset weight scales the whole step.  Multi-process data parallelism is
modeled exactly: the batch is split into world_size shards whose embeddings
are gathered in rank order before the in-batch loss, which makes the result
independent of the shard count.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (
    DOC_SIDE,
    QUERY_SIDE,
    ExampleBatch,
    TemplateRegistry,
    TrainingExample,
    make_batches,
    render,
    tokenize,
)
from .errors import CheckpointError, ContractError, ShapeError, TrainingDivergedError
from .model import EmbeddingModel
from .serialization import Checkpoint, save_checkpoint
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat_rows,
    diag_part,
    l2_normalize_rows,
    logsumexp_rows,
    matmul,
    scale,
    slice_cols,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "RunConfig", "CODE_EDIT_DATASET",
    "in_batch_loss", "hard_negative_loss", "global_gather", "step_loss",
    "AdamW", "lr_at", "train", "merge_checkpoints",
]

CODE_EDIT_DATASET = "CodeEditSearchRetrieval"


@dataclass(frozen=True)
class RunConfig:
    learning_rate: float = 1e-4
    epochs: int = 3
    batch_size: int = 32
    tau: float = 0.05
    k_hard: int = 7
    world_size: int = 1
    seed: int = 0
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    drop_last: bool = False
    loss_weights: dict[str, float] = field(default_factory=dict)
    code_edit_weight: float = 1.0
    n_checkpoints: int = 4
    merge_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.k_hard < 0:
            raise ContractError(f"k_hard must be non-negative, got {self.k_hard}")
        if self.world_size < 1:
            raise ContractError(f"world_size must be positive, got {self.world_size}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ContractError(
                f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.n_checkpoints < 1:
            raise ContractError(f"n_checkpoints must be positive, got {self.n_checkpoints}")
        for name, w in self.loss_weights.items():
            if w < 0:
                raise ContractError(f"loss weight for {name!r} must be non-negative, got {w}")
        if self.code_edit_weight < 0:
            raise ContractError(
                f"code_edit_weight must be non-negative, got {self.code_edit_weight}")
        if self.merge_weights is not None:
            object.__setattr__(self, "merge_weights", tuple(self.merge_weights))

    def weight_for(self, dataset: str) -> float:
        if dataset in self.loss_weights:
            return float(self.loss_weights[dataset])
        if dataset == CODE_EDIT_DATASET:
            return float(self.code_edit_weight)
        return 1.0

    def digest(self) -> str:
        payload = dataclasses.asdict(self)
        if payload["merge_weights"] is not None:
            payload["merge_weights"] = list(payload["merge_weights"])
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


# ── Losses ──────────────────────────────────────────────────────────────────

def in_batch_loss(queries: Tensor, docs: Tensor, tau: float) -> Tensor:
    """Mean over queries of -log softmax of the aligned document.

    Rows are normalized internally, so cosine similarity over tau gives the
    logits.  Every document in ``docs`` serves as a candidate for every
    query; row i's positive is row i.
    """
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if queries.ndim != 2 or queries.shape != docs.shape:
        raise ShapeError(
            f"queries and docs must share a (B, d) shape, got "
            f"{queries.shape} and {docs.shape}")
    b = queries.shape[0]
    logits = scale(matmul(l2_normalize_rows(queries),
                          transpose(l2_normalize_rows(docs))), 1.0 / tau)
    per_query = sub(logsumexp_rows(logits), diag_part(logits))   # (B, 1)
    return scale(sum_all(per_query), 1.0 / b)


def hard_negative_loss(query: Tensor, positive: Tensor, negatives: Tensor,
                       tau: float) -> Tensor:
    """-log softmax of the positive against explicit negatives, one query."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if query.shape != positive.shape or query.ndim != 2 or query.shape[0] != 1:
        raise ShapeError(
            f"query and positive must both be (1, d), got "
            f"{query.shape} and {positive.shape}")
    if negatives.ndim != 2 or negatives.shape[0] < 1 or \
            negatives.shape[1] != query.shape[1]:
        raise ShapeError(
            f"negatives must be (k>=1, {query.shape[1]}), got {negatives.shape}")
    candidates = concat_rows([positive, negatives])              # (1+k, d)
    logits = scale(matmul(l2_normalize_rows(query),
                          transpose(l2_normalize_rows(candidates))), 1.0 / tau)
    return sum_all(sub(logsumexp_rows(logits), slice_cols(logits, 0, 1)))


def global_gather(blocks: Sequence[Tensor]) -> Tensor:
    """Concatenate per-rank embedding blocks in rank order; P=1 is identity."""
    blocks = list(blocks)
    if not blocks:
        raise ContractError("global_gather needs at least one block")
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1:
        raise ShapeError(f"rank blocks must share one shape, got {sorted(shapes)}")
    if len(blocks) == 1:
        return blocks[0]
    return concat_rows(blocks)


def step_loss(batch: ExampleBatch, model: EmbeddingModel, config: RunConfig,
              registry: TemplateRegistry) -> Tensor:
    """Weighted (in-batch + mean hard-negative) loss for one batch."""
    b = len(batch)
    if b == 0:
        raise ContractError("empty batch")
    if b % config.world_size != 0:
        raise ContractError(
            f"batch size {b} is not divisible by world_size {config.world_size}")
    dataset, _ = batch.group_key
    template = registry.get(dataset)
    max_len = model.config.max_len

    def embed_side(text: str, side: str) -> Tensor:
        ids = tokenize(render(text, template, side), max_len)
        mask = np.ones(len(ids), dtype=bool)
        return model.embed_tokens(np.asarray(ids), mask, normalize=False).values

    q_rows = [embed_side(ex.query, QUERY_SIDE) for ex in batch.examples]
    d_rows = [embed_side(ex.positive, DOC_SIDE) for ex in batch.examples]

    shard = b // config.world_size
    q_all = global_gather([concat_rows(q_rows[r * shard:(r + 1) * shard])
                           for r in range(config.world_size)])
    d_all = global_gather([concat_rows(d_rows[r * shard:(r + 1) * shard])
                           for r in range(config.world_size)])
    loss = in_batch_loss(q_all, d_all, config.tau)

    hard_terms = []
    for i, ex in enumerate(batch.examples):
        negs = ex.hard_negatives[:config.k_hard]
        if not negs:
            continue
        neg_rows = concat_rows([embed_side(n, DOC_SIDE) for n in negs])
        hard_terms.append(hard_negative_loss(q_rows[i], d_rows[i], neg_rows, config.tau))
    if hard_terms:
        acc = hard_terms[0]
        for t in hard_terms[1:]:
            acc = add(acc, t)
        loss = add(loss, scale(acc, 1.0 / b))  # queries without negatives count as 0

    return scale(loss, config.weight_for(dataset))


# ── Optimizer and schedule ──────────────────────────────────────────────────

class AdamW:
    """Adam with decoupled weight decay; both terms scale with lr."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = list(params)
        self.params = params
        self.beta1, self.beta2 = float(beta1), float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup over the first fraction of steps, then constant."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warmup = int(math.ceil(total_steps * warmup_fraction))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


def _checkpoint_steps(total_steps: int, n_checkpoints: int) -> list[int]:
    """Evenly spaced 1-based step indices, always ending at the last step."""
    raw = {max(1, round(total_steps * k / n_checkpoints))
           for k in range(1, n_checkpoints + 1)}
    raw.add(total_steps)
    return sorted(raw)


# ── Training loop ───────────────────────────────────────────────────────────

def train(examples: Iterable[TrainingExample], model: EmbeddingModel,
          config: RunConfig, registry: TemplateRegistry, *,
          checkpoint_dir=None, log_stream=None,
          config_hash: str | None = None) -> list[Checkpoint]:
    """Run the full schedule, returning the periodic checkpoints.

    One JSON line per step goes to ``log_stream`` (stdout by default):
    {"step", "dataset", "language", "loss", "lr"}.  When the config carries
    ``merge_weights``, the weighted merge of the periodic checkpoints is
    appended as the final element, flagged ``merged``.
    """
    examples = list(examples)
    if not examples:
        raise ContractError("no training examples")
    stream = sys.stdout if log_stream is None else log_stream
    if config_hash is None:
        # model digest, not run digest: the hash answers "which architecture
        # can load these parameters"
        config_hash = model.config.digest()

    per_epoch = len(make_batches(examples, config.batch_size,
                                 seed=[config.seed, 0], drop_last=config.drop_last))
    if per_epoch == 0:
        raise ContractError("no full batches to train on (drop_last removed everything)")
    total_steps = config.epochs * per_epoch
    ckpt_steps = set(_checkpoint_steps(total_steps, config.n_checkpoints))
    if config.merge_weights is not None and len(config.merge_weights) != len(ckpt_steps):
        raise ContractError(
            f"merge_weights has {len(config.merge_weights)} entries but the run "
            f"produces {len(ckpt_steps)} checkpoints")

    opt = AdamW(model.trainable_parameters(), beta1=config.beta1, beta2=config.beta2,
                eps=config.adam_eps, weight_decay=config.weight_decay)
    checkpoints: list[Checkpoint] = []
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(config.epochs):
        batches = make_batches(examples, config.batch_size,
                               seed=[config.seed, epoch], drop_last=config.drop_last)
        for batch in batches:
            lr = lr_at(step, total_steps, config.learning_rate, config.warmup_fraction)
            opt.zero_grad()
            with Tape() as tape:
                loss = step_loss(batch, model, config, registry)
            loss_value = loss.item()
            step += 1
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            backward(loss, tape)
            opt.step(lr)
            record = {"step": step, "dataset": batch.group_key[0],
                      "language": batch.group_key[1], "loss": loss_value, "lr": lr}
            stream.write(json.dumps(record) + "\n")
            if step in ckpt_steps:
                ck = Checkpoint(params=model.state_arrays(), step=step,
                                config_hash=config_hash, merged=False,
                                seed=config.seed, lora=model.lora_meta())
                checkpoints.append(ck)
                if out_dir is not None:
                    save_checkpoint(ck, out_dir / f"checkpoint_{step:06d}.c2pm")

    if config.merge_weights is not None:
        merged = merge_checkpoints(checkpoints, config.merge_weights)
        checkpoints.append(merged)
        if out_dir is not None:
            save_checkpoint(merged, out_dir / "merged.c2pm")
    return checkpoints


# ── Checkpoint merging ──────────────────────────────────────────────────────

def merge_checkpoints(checkpoints: Sequence[Checkpoint],
                      weights: Sequence[float]) -> Checkpoint:
    """Weighted parameter average; weights are normalized to sum to 1.

    A weight of exactly 1 after normalization copies that checkpoint's
    parameters bit-for-bit.  The accumulation runs in a canonical order
    fixed by (weight, parameter digest), so permuting the inputs together
    with their weights cannot change the result.
    """
    checkpoints = list(checkpoints)
    weights = [float(w) for w in weights]
    if not checkpoints:
        raise ContractError("merge needs at least one checkpoint")
    if len(weights) != len(checkpoints):
        raise ContractError(
            f"{len(checkpoints)} checkpoints but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ContractError(f"merge weights must be non-negative, got {weights}")
    total = sum(weights)
    if total <= 0:
        raise ContractError("merge weights must not all be zero")
    norm = [w / total for w in weights]

    names = sorted(checkpoints[0].params)
    for ck in checkpoints[1:]:
        if sorted(ck.params) != names:
            raise CheckpointError("checkpoints do not hold the same parameter names")
        for n in names:
            if ck.params[n].shape != checkpoints[0].params[n].shape:
                raise CheckpointError(
                    f"parameter {n!r} has shape {ck.params[n].shape} in one "
                    f"checkpoint and {checkpoints[0].params[n].shape} in another")

    order = sorted(range(len(checkpoints)),
                   key=lambda i: (-norm[i], checkpoints[i].content_digest()))
    ref = order[0]
    if norm[ref] == 1.0:
        params = {n: checkpoints[ref].params[n].copy() for n in names}
    else:
        # anchor on the heaviest checkpoint: theta_ref + sum w_i (theta_i - theta_ref)
        params = {}
        for n in names:
            base = checkpoints[ref].params[n]
            delta = np.zeros_like(base)
            for i in order[1:]:
                delta += norm[i] * (checkpoints[i].params[n] - base)
            params[n] = base + delta

    head = checkpoints[ref]
    return Checkpoint(params=params, step=max(ck.step for ck in checkpoints),
                      config_hash=head.config_hash, merged=True,
                      seed=head.seed, lora=head.lora)
