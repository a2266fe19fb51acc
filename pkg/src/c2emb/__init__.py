"""Contrastive code embeddings at desk scale.

A from-scratch float64 stack: explicit-tape autodiff, a causal transformer
backbone, a learned-query attention pooling head, low-rank adapters,
contrastive training with hard negatives, checkpoint averaging, and a
retrieval evaluation harness.  ``ContrastiveCodeEmbedder`` wraps the whole
pipeline in a scikit-learn estimator; the ``c2`` command drives it from
config files.
"""

from .config import CliConfig, load_config
from .data import (
    DOC_SIDE,
    QUERY_SIDE,
    PromptTemplate,
    TemplateRegistry,
    TrainingExample,
    load_jsonl,
    make_batches,
    render,
    tokenize,
)
from .errors import (
    C2Error,
    CheckpointError,
    ConfigError,
    ContractError,
    DataFormatError,
    DegenerateInputError,
    NumericDegeneracyError,
    ShapeError,
    TemplateLookupError,
    TrainingDivergedError,
)
from .estimator import ContrastiveCodeEmbedder, embedding_fn
from .evaluation import (
    EvalTask,
    evaluate,
    load_task,
    mrr_at_k,
    ndcg_at_k,
    recall_at_k,
)
from .model import EmbeddingModel, ModelConfig
from .serialization import (
    Checkpoint,
    inspect_checkpoint,
    load_checkpoint,
    load_embeddings,
    save_checkpoint,
    save_embeddings,
)
from .tensor import Tape, Tensor, backward, finite_diff_grad
from .trainer import (
    RunConfig,
    hard_negative_loss,
    in_batch_loss,
    merge_checkpoints,
    step_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "C2Error",
    "Checkpoint",
    "CheckpointError",
    "CliConfig",
    "ConfigError",
    "ContractError",
    "ContrastiveCodeEmbedder",
    "DOC_SIDE",
    "DataFormatError",
    "DegenerateInputError",
    "EmbeddingModel",
    "EvalTask",
    "ModelConfig",
    "NumericDegeneracyError",
    "PromptTemplate",
    "QUERY_SIDE",
    "RunConfig",
    "ShapeError",
    "Tape",
    "TemplateLookupError",
    "TemplateRegistry",
    "Tensor",
    "TrainingDivergedError",
    "TrainingExample",
    "backward",
    "embedding_fn",
    "evaluate",
    "finite_diff_grad",
    "hard_negative_loss",
    "in_batch_loss",
    "inspect_checkpoint",
    "load_checkpoint",
    "load_config",
    "load_embeddings",
    "load_jsonl",
    "load_task",
    "make_batches",
    "merge_checkpoints",
    "mrr_at_k",
    "ndcg_at_k",
    "recall_at_k",
    "render",
    "save_checkpoint",
    "save_embeddings",
    "step_loss",
    "tokenize",
    "train",
    "__version__",
]
