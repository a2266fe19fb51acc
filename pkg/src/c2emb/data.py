"""Byte-level tokenization, prompt templates, JSONL loading, and batching.

Text is tokenized as raw UTF-8 bytes (ids 0..255) plus three specials: PAD
(256), BOS (257), EOS (258).  Batches are left-padded and grouped so every
batch holds examples from a single (dataset, language) pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataFormatError, TemplateLookupError

__all__ = [
    "PAD", "BOS", "EOS", "N_SPECIAL_TOKENS", "MIN_VOCAB_SIZE",
    "PromptTemplate", "TemplateRegistry", "TrainingExample",
    "TokenBatch", "ExampleBatch",
    "tokenize", "detokenize", "render", "pack", "make_batches", "load_jsonl",
]

log = logging.getLogger(__name__)

PAD = 256
BOS = 257
EOS = 258
N_SPECIAL_TOKENS = 3
MIN_VOCAB_SIZE = 259  # 256 byte values + the specials

QUERY_SIDE = "query"
DOC_SIDE = "doc"


# ── Tokenizer ───────────────────────────────────────────────────────────────

def tokenize(text: str, max_len: int | None = None) -> list[int]:
    """UTF-8 bytes wrapped in BOS/EOS; truncation keeps the prefix plus EOS."""
    if max_len is not None and max_len < 2:
        raise ContractError(f"max_len must be at least 2 to fit BOS and EOS, got {max_len}")
    ids = [BOS, *text.encode("utf-8"), EOS]
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len - 1] + [EOS]
    return ids


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of ``tokenize`` for untruncated sequences; specials are dropped."""
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8")


# ── Templates ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PromptTemplate:
    task_name: str
    query_instruction: str
    document_instruction: str

    def __post_init__(self):
        if not self.task_name:
            raise ContractError("template task_name must be non-empty")
        if not self.query_instruction or not self.document_instruction:
            raise ContractError(f"template {self.task_name!r} has an empty instruction")


def render(text: str, template: PromptTemplate, side: str) -> str:
    """Prefix ``text`` with the side's instruction, newline-separated."""
    if side == QUERY_SIDE:
        instruction = template.query_instruction
    elif side == DOC_SIDE:
        instruction = template.document_instruction
    else:
        raise ContractError(f"side must be 'query' or 'doc', got {side!r}")
    return f"{instruction}\n{text}"


class TemplateRegistry:
    """Task name -> PromptTemplate, with a bundled default set."""

    def __init__(self, templates: Iterable[PromptTemplate] = ()):
        self._templates: dict[str, PromptTemplate] = {}
        for t in templates:
            self.register(t)

    @classmethod
    def _from_mapping(cls, mapping: dict) -> "TemplateRegistry":
        reg = cls()
        for name in sorted(mapping):
            entry = mapping[name]
            if not isinstance(entry, dict) or "query" not in entry or "document" not in entry:
                raise DataFormatError(
                    f"template {name!r} must be an object with 'query' and 'document' keys")
            reg.register(PromptTemplate(name, entry["query"], entry["document"]))
        return reg

    @classmethod
    def builtin(cls) -> "TemplateRegistry":
        text = resources.files("c2emb").joinpath("templates.json").read_text(encoding="utf-8")
        return cls._from_mapping(json.loads(text))

    @classmethod
    def load(cls, path) -> "TemplateRegistry":
        with open(path, "r", encoding="utf-8") as f:
            try:
                mapping = json.load(f)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: invalid JSON: {e}") from e
        return cls._from_mapping(mapping)

    def register(self, template: PromptTemplate) -> None:
        self._templates[template.task_name] = template

    def get(self, task_name: str) -> PromptTemplate:
        try:
            return self._templates[task_name]
        except KeyError:
            known = ", ".join(sorted(self._templates)) or "(none)"
            raise TemplateLookupError(
                f"no template registered for task {task_name!r}; known tasks: {known}")

    def __contains__(self, task_name: str) -> bool:
        return task_name in self._templates

    def __eq__(self, other) -> bool:
        if not isinstance(other, TemplateRegistry):
            return NotImplemented
        return self._templates == other._templates

    def names(self) -> list[str]:
        return sorted(self._templates)


# ── Training examples ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainingExample:
    query: str
    positive: str
    hard_negatives: tuple[str, ...] = ()
    dataset: str = ""
    language: str = ""

    def __post_init__(self):
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))
        if not self.query:
            raise ContractError("example query must be non-empty")
        if not self.positive:
            raise ContractError("example positive must be non-empty")
        for neg in self.hard_negatives:
            if not isinstance(neg, str) or not neg:
                raise ContractError("hard negatives must be non-empty strings")
            if neg == self.positive:
                raise ContractError("a hard negative duplicates the positive")

    @property
    def group_key(self) -> tuple[str, str]:
        return (self.dataset, self.language)


def load_jsonl(path, registry: TemplateRegistry | None = None) -> list[TrainingExample]:
    """Read one JSON object per line into validated examples.

    Negatives equal to the positive are dropped with a warning; a dataset
    tag with no registered template is kept but warned about.
    """
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            for key in ("query", "positive", "dataset", "language"):
                if not isinstance(obj.get(key), str):
                    raise DataFormatError(f"{path}:{lineno}: missing or non-string {key!r}")
                if key in ("query", "positive") and not obj[key]:
                    raise DataFormatError(f"{path}:{lineno}: {key!r} must be non-empty")
            raw_negs = obj.get("hard_negatives", [])
            if not isinstance(raw_negs, list) or any(not isinstance(n, str) for n in raw_negs):
                raise DataFormatError(f"{path}:{lineno}: hard_negatives must be a list of strings")
            negs = []
            for n in raw_negs:
                if n == obj["positive"]:
                    log.warning("%s:%d: dropping hard negative equal to the positive",
                                path, lineno)
                    continue
                if not n:
                    raise DataFormatError(f"{path}:{lineno}: empty hard negative")
                negs.append(n)
            if registry is not None and obj["dataset"] not in registry:
                log.warning("%s:%d: no template for dataset %r; example kept",
                            path, lineno, obj["dataset"])
            examples.append(TrainingExample(
                query=obj["query"], positive=obj["positive"],
                hard_negatives=tuple(negs),
                dataset=obj["dataset"], language=obj["language"]))
    return examples


# ── Batching ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TokenBatch:
    token_ids: np.ndarray    # (B, L) int64, left-padded with PAD
    token_mask: np.ndarray   # (B, L) bool, True on real tokens
    group_key: tuple[str, str] | None = None


@dataclass(frozen=True)
class ExampleBatch:
    examples: tuple[TrainingExample, ...]
    group_key: tuple[str, str]

    def __len__(self) -> int:
        return len(self.examples)


def pack(texts: Sequence[str], max_len: int | None = None,
         group_key: tuple[str, str] | None = None) -> TokenBatch:
    """Tokenize and left-pad a list of texts into one matrix."""
    if not texts:
        raise ContractError("pack needs at least one text")
    seqs = [tokenize(t, max_len) for t in texts]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, width - len(s):] = s
        mask[r, width - len(s):] = True
    return TokenBatch(token_ids=ids, token_mask=mask, group_key=group_key)


def make_batches(examples: Iterable[TrainingExample], batch_size: int, seed: int,
                 drop_last: bool = False) -> list[ExampleBatch]:
    """Group-homogeneous batches in a seeded deterministic order.

    Examples are partitioned by (dataset, language); each group is shuffled
    and cut into contiguous chunks, then the chunk order itself is shuffled.
    A trailing short chunk is kept unless ``drop_last`` is set.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    groups: dict[tuple[str, str], list[TrainingExample]] = {}
    for ex in examples:
        groups.setdefault(ex.group_key, []).append(ex)
    rng = np.random.default_rng(seed)
    chunks: list[ExampleBatch] = []
    for key in sorted(groups):
        members = groups[key]
        shuffled = [members[i] for i in rng.permutation(len(members))]
        for start in range(0, len(shuffled), batch_size):
            chunk = shuffled[start:start + batch_size]
            if drop_last and len(chunk) < batch_size:
                continue
            chunks.append(ExampleBatch(examples=tuple(chunk), group_key=key))
    return [chunks[i] for i in rng.permutation(len(chunks))]
