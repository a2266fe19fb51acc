"""Causal transformer backbone over byte-level token ids.

Pre-norm decoder blocks with learned token and position embeddings.
Sequences are left-padded: pad positions form a prefix, contribute no keys
to any real token's attention, and all share position 0.  Every real token
attends to itself and the real tokens before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError
from .lora import LoRAAdapter, lora_forward
from .tensor import (
    Tensor,
    add,
    concat_cols,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

__all__ = [
    "BackboneConfig",
    "LayerParams",
    "BackboneParams",
    "HiddenStates",
    "positions_for_mask",
    "attention_allowed",
    "encode",
]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 260
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_llm < 1 or self.n_layers < 1 or self.max_len < 1:
            raise ContractError(f"backbone dimensions must be positive: {self}")
        if self.n_heads < 1 or self.d_llm % self.n_heads != 0:
            raise ContractError(
                f"d_llm ({self.d_llm}) must be divisible by n_heads ({self.n_heads})")
        if self.mlp_ratio < 1:
            raise ContractError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.ln_eps < 0.0:
            raise ContractError(f"ln_eps must be non-negative, got {self.ln_eps}")

    @property
    def d_head(self) -> int:
        return self.d_llm // self.n_heads


@dataclass
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_in: Tensor
    w_out: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


def _ones(d: int) -> Tensor:
    return Tensor(np.ones(d), requires_grad=True)


def _zeros(d: int) -> Tensor:
    return Tensor(np.zeros(d), requires_grad=True)


@dataclass
class BackboneParams:
    config: BackboneConfig
    tok_emb: Tensor                      # (vocab_size, d_llm)
    pos_emb: Tensor                      # (max_len, d_llm)
    layers: list[LayerParams] = field(default_factory=list)
    final_gamma: Tensor = None
    final_beta: Tensor = None

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator) -> "BackboneParams":
        from .tensor import uniform_init

        d = config.d_llm
        hidden = config.mlp_ratio * d
        layers = []
        tok = uniform_init(rng, (config.vocab_size, d))
        pos = uniform_init(rng, (config.max_len, d))
        for _ in range(config.n_layers):
            layers.append(LayerParams(
                w_q=uniform_init(rng, (d, d)),
                w_k=uniform_init(rng, (d, d)),
                w_v=uniform_init(rng, (d, d)),
                w_o=uniform_init(rng, (d, d)),
                w_in=uniform_init(rng, (d, hidden)),
                w_out=uniform_init(rng, (hidden, d)),
                ln1_gamma=_ones(d), ln1_beta=_zeros(d),
                ln2_gamma=_ones(d), ln2_beta=_zeros(d),
            ))
        return cls(config=config, tok_emb=tok, pos_emb=pos, layers=layers,
                   final_gamma=_ones(d), final_beta=_zeros(d))

    def named(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for f in ("w_q", "w_k", "w_v", "w_o", "w_in", "w_out",
                      "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
                out[f"layers.{i}.{f}"] = getattr(layer, f)
        out["final_gamma"] = self.final_gamma
        out["final_beta"] = self.final_beta
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.named().values():
            t.requires_grad = bool(flag)


@dataclass
class HiddenStates:
    values: Tensor           # (l, d_llm)
    token_mask: np.ndarray   # (l,) bool, True on real tokens


def positions_for_mask(token_mask: np.ndarray) -> np.ndarray:
    """Position ids: real tokens count 0..n-1 in order, pads all sit at 0."""
    mask = np.asarray(token_mask, dtype=bool)
    return np.maximum(np.cumsum(mask) - 1, 0)


def attention_allowed(token_mask: np.ndarray) -> np.ndarray:
    """Boolean (l, l) matrix of permitted attention edges.

    Real token i sees real tokens j <= i.  A pad row attends only to itself
    so its softmax stays well defined; pad columns are never visible to real
    rows.
    """
    mask = np.asarray(token_mask, dtype=bool)
    l = mask.shape[0]
    idx = np.arange(l)
    causal = idx[None, :] <= idx[:, None]
    allowed = causal & mask[None, :] & mask[:, None]
    allowed |= np.eye(l, dtype=bool) & ~mask[:, None]
    return allowed


def _validate_inputs(tokens: np.ndarray, token_mask: np.ndarray,
                     config: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(token_mask, dtype=bool)
    if tokens.ndim != 1 or mask.ndim != 1 or tokens.shape != mask.shape:
        raise ShapeError(
            f"tokens and token_mask must be matching 1-d arrays, got "
            f"{tokens.shape} and {mask.shape}")
    l = tokens.shape[0]
    if l == 0:
        raise DegenerateInputError("empty token sequence")
    if l > config.max_len:
        raise ContractError(f"sequence length {l} exceeds max_len {config.max_len}")
    bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)]
    if bad.size:
        raise ContractError(
            f"token id {int(bad[0])} out of range for vocab_size {config.vocab_size}")
    if not mask.any():
        raise DegenerateInputError("token_mask marks no real tokens")
    # pads must form a prefix (left padding)
    if np.any(mask[:-1] & ~mask[1:]):
        raise ContractError("token_mask must be monotone: pads form a prefix")
    return tokens, mask


def encode(tokens, token_mask, params: BackboneParams,
           adapters: dict[str, LoRAAdapter] | None = None) -> HiddenStates:
    """Run the decoder stack, returning per-position hidden states.

    ``adapters`` optionally maps "layers.{i}.{w_q|w_k|w_v|w_o}" to low-rank
    adapters applied on top of the frozen projections.
    """
    config = params.config
    tokens, mask = _validate_inputs(tokens, token_mask, config)
    adapters = adapters or {}
    l = tokens.shape[0]
    allowed = attention_allowed(mask)
    inv_sqrt_dh = 1.0 / np.sqrt(config.d_head)

    x = add(gather_rows(params.tok_emb, tokens),
            gather_rows(params.pos_emb, positions_for_mask(mask)))        # (l, d)

    for i, layer in enumerate(params.layers):
        h = layer_norm(x, layer.ln1_gamma, layer.ln1_beta, config.ln_eps)
        q = lora_forward(h, layer.w_q, adapters.get(f"layers.{i}.w_q"))   # (l, d)
        k = lora_forward(h, layer.w_k, adapters.get(f"layers.{i}.w_k"))
        v = lora_forward(h, layer.w_v, adapters.get(f"layers.{i}.w_v"))
        heads = []
        for hd in range(config.n_heads):
            lo, hi = hd * config.d_head, (hd + 1) * config.d_head
            qs, ks, vs = (slice_cols(t, lo, hi) for t in (q, k, v))
            scores = scale(matmul(qs, transpose(ks)), inv_sqrt_dh)        # (l, l)
            attn = softmax_rows(scores, allowed)
            heads.append(matmul(attn, vs))                                # (l, d_head)
        ctx = concat_cols(heads)
        x = add(x, lora_forward(ctx, layer.w_o, adapters.get(f"layers.{i}.w_o")))

        h2 = layer_norm(x, layer.ln2_gamma, layer.ln2_beta, config.ln_eps)
        x = add(x, matmul(relu(matmul(h2, layer.w_in)), layer.w_out))

    out = layer_norm(x, params.final_gamma, params.final_beta, config.ln_eps)
    return HiddenStates(values=out, token_mask=mask)
