"""Pooling-by-multihead-attention: one learned query reads out a sequence.

A single trainable query row cross-attends over the hidden states, head by
head, with pad keys masked out.  The concatenated head outputs pass through
a residual + layer-norm pair with a ReLU projection in between, giving one
embedding row per sequence.  Attention logits are unscaled by default; set
``scaled=True`` for 1/sqrt(d_head) scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, HiddenStates, encode
from .errors import ContractError, DegenerateInputError, ShapeError
from .lora import LoRAAdapter
from .tensor import (
    Tensor,
    add,
    concat_cols,
    l2_normalize_rows,
    layer_norm,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
    uniform_init,
)

__all__ = ["PMAParams", "Embedding", "pma_pool", "normalize_embedding", "embed"]


@dataclass
class PMAParams:
    query: Tensor       # (1, d_q)
    w_q: Tensor         # (d_q, d)
    w_k: Tensor         # (d_llm, d)
    w_v: Tensor         # (d_llm, d)
    w_o: Tensor         # (d, d)
    ln1_gamma: Tensor   # (d,)
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    n_heads: int
    ln_eps: float = 1e-5

    @classmethod
    def create(cls, rng: np.random.Generator, d_llm: int, d: int, n_heads: int,
               d_q: int | None = None, ln_eps: float = 1e-5) -> "PMAParams":
        if n_heads < 1 or d % n_heads != 0:
            raise ContractError(f"d ({d}) must be divisible by n_heads ({n_heads})")
        d_q = d_llm if d_q is None else d_q
        return cls(
            query=uniform_init(rng, (1, d_q)),
            w_q=uniform_init(rng, (d_q, d)),
            w_k=uniform_init(rng, (d_llm, d)),
            w_v=uniform_init(rng, (d_llm, d)),
            w_o=uniform_init(rng, (d, d)),
            ln1_gamma=Tensor(np.ones(d), requires_grad=True),
            ln1_beta=Tensor(np.zeros(d), requires_grad=True),
            ln2_gamma=Tensor(np.ones(d), requires_grad=True),
            ln2_beta=Tensor(np.zeros(d), requires_grad=True),
            n_heads=n_heads,
            ln_eps=ln_eps,
        )

    @property
    def d(self) -> int:
        return self.w_k.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {
            "query": self.query, "w_q": self.w_q, "w_k": self.w_k,
            "w_v": self.w_v, "w_o": self.w_o,
            "ln1_gamma": self.ln1_gamma, "ln1_beta": self.ln1_beta,
            "ln2_gamma": self.ln2_gamma, "ln2_beta": self.ln2_beta,
        }


@dataclass
class Embedding:
    values: Tensor       # (1, d)
    normalized: bool


def pma_pool(hidden: HiddenStates, params: PMAParams, scaled: bool = False) -> Embedding:
    """Pool hidden states into a single un-normalized embedding row."""
    mask = np.asarray(hidden.token_mask, dtype=bool)
    if hidden.values.ndim != 2 or hidden.values.shape[0] != mask.shape[0]:
        raise ShapeError(
            f"hidden values {hidden.values.shape} do not match mask length {mask.shape[0]}")
    if not mask.any():
        raise DegenerateInputError("cannot pool a sequence with no real tokens")
    d = params.d
    if params.n_heads < 1 or d % params.n_heads != 0:
        raise ContractError(f"d ({d}) must be divisible by n_heads ({params.n_heads})")
    d_head = d // params.n_heads

    q = matmul(params.query, params.w_q)       # (1, d)
    k = matmul(hidden.values, params.w_k)      # (l, d)
    v = matmul(hidden.values, params.w_v)      # (l, d)
    key_mask = mask[None, :]                   # (1, l)

    heads = []
    for h in range(params.n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qs, ks, vs = (slice_cols(t, lo, hi) for t in (q, k, v))
        logits = matmul(qs, transpose(ks))     # (1, l)
        if scaled:
            logits = scale(logits, 1.0 / np.sqrt(d_head))
        attn = softmax_rows(logits, key_mask)
        heads.append(matmul(attn, vs))         # (1, d_head)
    pooled = concat_cols(heads)                # (1, d)

    resid = layer_norm(add(pooled, q), params.ln1_gamma, params.ln1_beta, params.ln_eps)
    out = layer_norm(add(relu(matmul(resid, params.w_o)), resid),
                     params.ln2_gamma, params.ln2_beta, params.ln_eps)
    return Embedding(values=out, normalized=False)


def normalize_embedding(e: Embedding) -> Embedding:
    if e.normalized:
        return e
    return Embedding(values=l2_normalize_rows(e.values), normalized=True)


def embed(tokens, token_mask, backbone: BackboneParams, pool: PMAParams,
          adapters: dict[str, LoRAAdapter] | None = None,
          scaled: bool = False, normalize: bool = True) -> Embedding:
    """Encode one sequence and pool it into an embedding row."""
    hidden = encode(tokens, token_mask, backbone, adapters=adapters)
    e = pma_pool(hidden, pool, scaled=scaled)
    return normalize_embedding(e) if normalize else e
