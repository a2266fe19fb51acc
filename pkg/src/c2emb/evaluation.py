"""Retrieval evaluation: task files on disk, cosine ranking, binary-relevance metrics.

A task directory looks like

    <task-name>/
        queries.jsonl     {"id": ..., "text": ...} per line
        corpus.jsonl      {"id": ..., "text": ...} per line
        qrels.tsv         query-id <TAB> doc-id per line

The directory basename is the task name and must resolve to a prompt template
at evaluation time.  Relevance is binary: a (query, doc) pair is relevant iff
it appears in qrels.tsv.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Set

import numpy as np

from .errors import ContractError, DataFormatError, NumericDegeneracyError, ShapeError

__all__ = [
    "EvalTask",
    "load_task",
    "rank",
    "ndcg_at_k",
    "mrr_at_k",
    "recall_at_k",
    "evaluate",
]

# (texts, task_name, side) -> (len(texts), d) embedding matrix
EmbedFn = Callable[[Sequence[str], str, str], np.ndarray]


# ── Task container ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EvalTask:
    """One retrieval task: labelled queries against a fixed document corpus."""

    name: str
    queries: Mapping[str, str]          # query id -> query text
    corpus: Mapping[str, str]           # doc id -> doc text
    qrels: Mapping[str, frozenset[str]] = field(repr=False)  # query id -> relevant doc ids

    def __post_init__(self):
        if not self.name:
            raise ContractError("task name must be non-empty")
        if not self.queries:
            raise DataFormatError(f"task {self.name!r}: no queries")
        if not self.corpus:
            raise DataFormatError(f"task {self.name!r}: no corpus documents")
        for qid in self.queries:
            rel = self.qrels.get(qid)
            if not rel:
                raise DataFormatError(
                    f"task {self.name!r}: query {qid!r} has no relevant documents")
        for qid, rel in self.qrels.items():
            if qid not in self.queries:
                raise DataFormatError(
                    f"task {self.name!r}: qrels reference unknown query {qid!r}")
            missing = rel - self.corpus.keys()
            if missing:
                raise DataFormatError(
                    f"task {self.name!r}: qrels reference unknown document "
                    f"{sorted(missing)[0]!r}")


def _read_id_text(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise DataFormatError(
                    f"{path}:{lineno}: expected an object with 'id' and 'text'")
            ident, text = obj["id"], obj["text"]
            if not isinstance(ident, str) or not ident:
                raise DataFormatError(f"{path}:{lineno}: 'id' must be a non-empty string")
            if not isinstance(text, str) or not text:
                raise DataFormatError(f"{path}:{lineno}: 'text' must be a non-empty string")
            if ident in out:
                raise DataFormatError(f"{path}:{lineno}: duplicate id {ident!r}")
            out[ident] = text
    return out


def load_task(task_dir: str | Path) -> EvalTask:
    """Read one task directory; the basename becomes the task name."""
    task_dir = Path(task_dir)
    if not task_dir.is_dir():
        raise DataFormatError(f"not a task directory: {task_dir}")
    queries = _read_id_text(task_dir / "queries.jsonl")
    corpus = _read_id_text(task_dir / "corpus.jsonl")

    qrels: dict[str, set[str]] = {}
    qrels_path = task_dir / "qrels.tsv"
    with open(qrels_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError(
                    f"{qrels_path}:{lineno}: expected 'query-id<TAB>doc-id'")
            qrels.setdefault(parts[0], set()).add(parts[1])

    frozen = {qid: frozenset(dids) for qid, dids in qrels.items()}
    return EvalTask(name=task_dir.name, queries=queries, corpus=corpus, qrels=frozen)


# ── Ranking ─────────────────────────────────────────────────────────────────

def _unit_rows(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"{what} embeddings must be 2-d, got shape {mat.shape}")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericDegeneracyError(f"{what} embedding row has zero norm")
    return mat / norms


def rank(query_vec: np.ndarray, doc_mat: np.ndarray,
         doc_ids: Sequence[str], k: int) -> list[str]:
    """Top-k document ids by cosine similarity; ties break on ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(doc_ids) != doc_mat.shape[0]:
        raise ShapeError(
            f"{len(doc_ids)} doc ids for {doc_mat.shape[0]} embedding rows")
    q = _unit_rows(np.asarray(query_vec, dtype=np.float64).reshape(1, -1), "query")[0]
    d = _unit_rows(doc_mat, "doc")
    if d.shape[1] != q.shape[0]:
        raise ShapeError(
            f"query dim {q.shape[0]} != doc dim {d.shape[1]}")
    scores = d @ q
    order = sorted(range(len(doc_ids)), key=lambda j: (-scores[j], doc_ids[j]))
    return [doc_ids[j] for j in order[:k]]


# ── Metrics (binary relevance) ──────────────────────────────────────────────

def _check_metric_args(ranked: Sequence[str], relevant: Set[str], k: int):
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ContractError("relevant set must be non-empty")


def ndcg_at_k(ranked: Sequence[str], relevant: Set[str], k: int) -> float:
    """DCG with gain 1 / log2(rank + 1); ideal DCG fills min(k, |relevant|) slots."""
    _check_metric_args(ranked, relevant, k)
    dcg = sum(1.0 / math.log2(i + 2)
              for i, did in enumerate(ranked[:k]) if did in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / idcg


def mrr_at_k(ranked: Sequence[str], relevant: Set[str], k: int) -> float:
    _check_metric_args(ranked, relevant, k)
    for i, did in enumerate(ranked[:k]):
        if did in relevant:
            return 1.0 / (i + 1)
    return 0.0


def recall_at_k(ranked: Sequence[str], relevant: Set[str], k: int) -> float:
    _check_metric_args(ranked, relevant, k)
    hits = sum(1 for did in ranked[:k] if did in relevant)
    return hits / len(relevant)


# ── Harness ─────────────────────────────────────────────────────────────────

def evaluate(embed: EmbedFn, tasks: Iterable[EvalTask], k: int = 10) -> dict:
    """Score every task with `embed` and macro-average the metrics.

    Documents and queries are embedded in sorted-id order so the report is a
    pure function of (embed, tasks, k).
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    tasks = list(tasks)
    if not tasks:
        raise ContractError("no tasks to evaluate")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate task names: {sorted(names)}")

    report: dict = {"k": k, "tasks": {}}
    for task in tasks:
        doc_ids = sorted(task.corpus)
        qids = sorted(task.queries)
        doc_mat = np.asarray(
            embed([task.corpus[d] for d in doc_ids], task.name, "doc"),
            dtype=np.float64)
        query_mat = np.asarray(
            embed([task.queries[q] for q in qids], task.name, "query"),
            dtype=np.float64)
        if doc_mat.shape[0] != len(doc_ids):
            raise ShapeError(
                f"embed returned {doc_mat.shape[0]} rows for {len(doc_ids)} documents")
        if query_mat.shape[0] != len(qids):
            raise ShapeError(
                f"embed returned {query_mat.shape[0]} rows for {len(qids)} queries")

        ndcg = mrr = recall = 0.0
        for qi, qid in enumerate(qids):
            ranked = rank(query_mat[qi], doc_mat, doc_ids, k)
            rel = task.qrels[qid]
            ndcg += ndcg_at_k(ranked, rel, k)
            mrr += mrr_at_k(ranked, rel, k)
            recall += recall_at_k(ranked, rel, k)
        n = len(qids)
        report["tasks"][task.name] = {
            "ndcg": ndcg / n, "mrr": mrr / n, "recall": recall / n, "n_queries": n,
        }

    per_task = report["tasks"].values()
    report["average"] = {
        m: sum(t[m] for t in per_task) / len(tasks) for m in ("ndcg", "mrr", "recall")
    }
    return report
