"""Scikit-learn estimator facade over the training loop and embedding model."""

from __future__ import annotations

import io
import json
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import QUERY_SIDE, TemplateRegistry, TrainingExample, render, tokenize
from .errors import ContractError
from .evaluation import EmbedFn
from .model import EmbeddingModel, ModelConfig
from .trainer import RunConfig, train

__all__ = ["ContrastiveCodeEmbedder", "embedding_fn"]


def embedding_fn(model: EmbeddingModel, registry: TemplateRegistry,
                 normalize: bool = True) -> EmbedFn:
    """Wrap a model as the (texts, task, side) -> matrix callable the
    evaluation harness consumes."""

    def embed(texts: Sequence[str], task: str, side: str) -> np.ndarray:
        template = registry.get(task)
        rows = []
        for text in texts:
            ids = np.asarray(tokenize(render(text, template, side), model.config.max_len))
            mask = np.ones(len(ids), dtype=bool)
            rows.append(model.embed_tokens(ids, mask, normalize=normalize).values.data[0])
        return np.array(rows) if rows else np.zeros((0, model.config.d))

    return embed


class ContrastiveCodeEmbedder(BaseEstimator, TransformerMixin):
    """Contrastively trained text embedder with a transformer backbone.

    ``fit`` takes training triples (query, positive document, optional hard
    negatives) and trains the full pipeline from a fresh seed.  ``transform``
    maps strings to embedding rows using the task prompt template and side
    configured on the estimator.

    Parameters mirror :class:`ModelConfig` and :class:`RunConfig`;
    ``embedding_dim`` maps to ``ModelConfig.d`` and ``pool_heads`` to
    ``ModelConfig.pma_heads``.  Training triples given as dicts use the same
    keys as the JSONL loader (``query``, ``positive``, ``hard_negatives``,
    ``dataset``, ``language``); a missing ``dataset`` falls back to ``task``.
    """

    def __init__(self, *, d_llm=64, n_layers=2, n_heads=4, max_len=128,
                 embedding_dim=32, pool_heads=4, scaled_pma_attention=False,
                 use_lora=False, lora_rank=4, lora_alpha=8.0,
                 learning_rate=1e-4, epochs=3, batch_size=32, tau=0.05,
                 k_hard=7, world_size=1, warmup_fraction=0.03,
                 weight_decay=0.01, code_edit_weight=1.0, loss_weights=None,
                 n_checkpoints=4, merge_weights=None, drop_last=False,
                 task="CodeSearchNetRetrieval", side=QUERY_SIDE, normalize=True,
                 templates=None, seed=0):
        self.d_llm = d_llm
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.embedding_dim = embedding_dim
        self.pool_heads = pool_heads
        self.scaled_pma_attention = scaled_pma_attention
        self.use_lora = use_lora
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.tau = tau
        self.k_hard = k_hard
        self.world_size = world_size
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.code_edit_weight = code_edit_weight
        self.loss_weights = loss_weights
        self.n_checkpoints = n_checkpoints
        self.merge_weights = merge_weights
        self.drop_last = drop_last
        self.task = task
        self.side = side
        self.normalize = normalize
        self.templates = templates
        self.seed = seed

    # ── Configuration assembly ──────────────────────────────────────────────

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_llm=self.d_llm, n_layers=self.n_layers, n_heads=self.n_heads,
            max_len=self.max_len, d=self.embedding_dim,
            pma_heads=self.pool_heads,
            scaled_pma_attention=self.scaled_pma_attention,
            use_lora=self.use_lora, lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha)

    def _run_config(self) -> RunConfig:
        return RunConfig(
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, tau=self.tau, k_hard=self.k_hard,
            world_size=self.world_size, seed=self.seed,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            loss_weights=dict(self.loss_weights or {}),
            code_edit_weight=self.code_edit_weight,
            n_checkpoints=self.n_checkpoints,
            merge_weights=self.merge_weights, drop_last=self.drop_last)

    def _registry(self) -> TemplateRegistry:
        if self.templates is None:
            return TemplateRegistry.builtin()
        if not isinstance(self.templates, TemplateRegistry):
            raise ContractError(
                f"templates must be a TemplateRegistry or None, "
                f"got {type(self.templates).__name__}")
        return self.templates

    def _as_example(self, item, index: int) -> TrainingExample:
        if isinstance(item, TrainingExample):
            return item if item.dataset else TrainingExample(
                item.query, item.positive, item.hard_negatives,
                dataset=self.task, language=item.language)
        if isinstance(item, Mapping):
            extra = set(item) - {"query", "positive", "hard_negatives",
                                 "dataset", "language"}
            if extra:
                raise ContractError(
                    f"X[{index}]: unexpected keys {sorted(extra)}")
            try:
                return TrainingExample(
                    query=item["query"], positive=item["positive"],
                    hard_negatives=tuple(item.get("hard_negatives", ())),
                    dataset=item.get("dataset", self.task),
                    language=item.get("language", ""))
            except KeyError as exc:
                raise ContractError(f"X[{index}]: missing key {exc}") from exc
        raise ContractError(
            f"X[{index}]: expected TrainingExample or mapping, "
            f"got {type(item).__name__}")

    # ── Estimator API ───────────────────────────────────────────────────────

    def fit(self, X: Iterable, y=None):
        """Train from scratch on triples; returns self."""
        examples = [self._as_example(item, i) for i, item in enumerate(X)]
        if not examples:
            raise ContractError("X must contain at least one training example")
        registry = self._registry()
        model = EmbeddingModel.create(self._model_config(), seed=self.seed)
        log = io.StringIO()
        checkpoints = train(examples, model, self._run_config(), registry,
                            log_stream=log)
        if self.merge_weights is not None:
            model.load_state(checkpoints[-1].params)
        self.model_ = model
        self.registry_ = registry
        self.checkpoints_ = checkpoints
        self.history_ = [json.loads(line) for line in log.getvalue().splitlines()]
        self.n_steps_ = len(self.history_)
        return self

    def transform(self, X: Sequence) -> np.ndarray:
        """Embed as (len(X), embedding_dim) rows.

        Items may be plain strings or the triple shapes ``fit`` accepts, in
        which case the query text is embedded; the latter keeps
        ``fit_transform`` well defined.
        """
        check_is_fitted(self, "model_")
        texts = []
        for i, item in enumerate(X):
            if isinstance(item, str):
                text = item
            elif isinstance(item, TrainingExample):
                text = item.query
            elif isinstance(item, Mapping) and isinstance(item.get("query"), str):
                text = item["query"]
            else:
                raise ContractError(
                    f"X[{i}]: expected a string or a training triple, "
                    f"got {type(item).__name__}")
            if not text:
                raise ContractError(f"X[{i}]: expected a non-empty string")
            texts.append(text)
        fn = embedding_fn(self.model_, self.registry_, normalize=self.normalize)
        return fn(texts, self.task, self.side)

    def embed_fn(self) -> EmbedFn:
        """The fitted model as an evaluation-harness callable."""
        check_is_fitted(self, "model_")
        return embedding_fn(self.model_, self.registry_, normalize=self.normalize)
