"""Model assembly: backbone plus pooling head, with optional adapters.

``ModelConfig`` fixes every architectural choice; ``EmbeddingModel`` owns the
parameters and exposes a flat name -> tensor view used by the optimizer and
the checkpoint format.  When ``use_lora`` is set the backbone weights are
frozen and rank-r adapters on the attention projections carry all backbone
training signal; the pooling head always trains in full.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, BackboneParams, encode
from .data import MIN_VOCAB_SIZE, tokenize
from .errors import CheckpointError, ContractError
from .lora import LoRAAdapter, merge_adapter
from .pooling import Embedding, PMAParams, normalize_embedding, pma_pool
from .tensor import Tensor

__all__ = ["ModelConfig", "EmbeddingModel", "ADAPTED_PROJECTIONS"]

ADAPTED_PROJECTIONS = ("w_q", "w_k", "w_v", "w_o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    d: int = 32
    pma_heads: int = 4
    d_q: int | None = None
    scaled_pma_attention: bool = False
    use_lora: bool = False
    lora_rank: int = 4
    lora_alpha: float = 8.0
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ContractError(
                f"vocab_size must cover all byte tokens and specials "
                f"(>= {MIN_VOCAB_SIZE}), got {self.vocab_size}")
        if self.d < 1 or self.pma_heads < 1 or self.d % self.pma_heads != 0:
            raise ContractError(
                f"d ({self.d}) must be divisible by pma_heads ({self.pma_heads})")
        if self.use_lora and self.lora_rank > self.d_llm:
            raise ContractError(
                f"lora_rank ({self.lora_rank}) exceeds d_llm ({self.d_llm})")
        # delegate the remaining dimension checks
        self.backbone_config()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.vocab_size, d_llm=self.d_llm, n_layers=self.n_layers,
            n_heads=self.n_heads, max_len=self.max_len, mlp_ratio=self.mlp_ratio,
            ln_eps=self.ln_eps)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Preset carrying the published pooling and adapter settings."""
        base = dict(pma_heads=32, d=256, d_llm=256, n_heads=8, max_len=1024,
                    use_lora=True, lora_rank=64, lora_alpha=32.0)
        base.update(overrides)
        return cls(**base)

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class EmbeddingModel:
    """Backbone + pooling head + (optionally) adapters, addressable by name."""

    def __init__(self, config: ModelConfig, backbone: BackboneParams,
                 pool: PMAParams, adapters: dict[str, LoRAAdapter] | None = None):
        self.config = config
        self.backbone = backbone
        self.pool = pool
        self.adapters = dict(adapters or {})
        self.merged_lora: dict | None = None  # set when adapters were folded in

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)
        backbone = BackboneParams.create(config.backbone_config(), rng)
        pool = PMAParams.create(rng, d_llm=config.d_llm, d=config.d,
                                n_heads=config.pma_heads, d_q=config.d_q,
                                ln_eps=config.ln_eps)
        adapters: dict[str, LoRAAdapter] = {}
        if config.use_lora:
            backbone.set_trainable(False)
            for i in range(config.n_layers):
                for proj in ADAPTED_PROJECTIONS:
                    adapters[f"layers.{i}.{proj}"] = LoRAAdapter.create(
                        rng, config.d_llm, config.d_llm,
                        config.lora_rank, config.lora_alpha)
        return cls(config, backbone, pool, adapters)

    # ── Parameter access ────────────────────────────────────────────────

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{n}": t for n, t in self.backbone.named().items()}
        for n, t in self.pool.named().items():
            out[f"pma.{n}"] = t
        for key in sorted(self.adapters):
            out[f"lora.{key}.a"] = self.adapters[key].a
            out[f"lora.{key}.b"] = self.adapters[key].b
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if t.requires_grad}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names do not match the model: missing {missing[:5]}, "
                f"unexpected {unexpected[:5]}")
        for name, t in params.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {src.shape}, expected {t.data.shape}")
            t.data = src.copy()

    def lora_meta(self) -> dict | None:
        if self.adapters:
            return {"rank": self.config.lora_rank,
                    "alpha": self.config.lora_alpha,
                    "merged": False}
        return self.merged_lora

    # ── Inference ───────────────────────────────────────────────────────

    def embed_tokens(self, tokens, token_mask, normalize: bool = True) -> Embedding:
        hidden = encode(tokens, token_mask, self.backbone, adapters=self.adapters)
        e = pma_pool(hidden, self.pool, scaled=self.config.scaled_pma_attention)
        return normalize_embedding(e) if normalize else e

    def embed_text(self, text: str, normalize: bool = True) -> Embedding:
        ids = tokenize(text, self.config.max_len)
        mask = np.ones(len(ids), dtype=bool)
        return self.embed_tokens(np.asarray(ids), mask, normalize=normalize)

    # ── Adapter folding ─────────────────────────────────────────────────

    def merge_lora(self) -> "EmbeddingModel":
        """Fold every adapter into its base weight; the result has none."""
        if not self.adapters:
            raise ContractError("model has no adapters to merge")
        merged_cfg = dataclasses.replace(self.config, use_lora=False)
        fresh = EmbeddingModel.create(merged_cfg, seed=0)
        state = self.state_arrays()
        merged_state = {n: a for n, a in state.items() if not n.startswith("lora.")}
        for key, adapter in self.adapters.items():
            name = f"backbone.{key}"
            merged_state[name] = merge_adapter(
                Tensor(state[name]), adapter).data
        fresh.load_state(merged_state)
        fresh.merged_lora = {"rank": self.config.lora_rank,
                             "alpha": self.config.lora_alpha,
                             "merged": True}
        return fresh
