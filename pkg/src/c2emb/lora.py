"""Low-rank adapters for frozen linear projections.

An adapter adds a rank-r update to a base weight W (d_in x d_out): the
effective weight is W + (alpha / r) * (b @ a)^T with a (r x d_in) drawn
uniformly and b (d_out x r) starting at zero, so a fresh adapter leaves the
forward pass bit-identical to the base projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, add, matmul, scale, transpose, uniform_init

__all__ = ["LoRAAdapter", "lora_forward", "merge_adapter"]


@dataclass
class LoRAAdapter:
    a: Tensor      # (rank, d_in)
    b: Tensor      # (d_out, rank)
    rank: int
    alpha: float

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int,
               rank: int, alpha: float) -> "LoRAAdapter":
        if rank < 1 or rank > min(d_in, d_out):
            raise ContractError(
                f"adapter rank must lie in [1, {min(d_in, d_out)}], got {rank}")
        if alpha <= 0.0:
            raise ContractError(f"adapter alpha must be positive, got {alpha}")
        a = uniform_init(rng, (rank, d_in))
        b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return cls(a=a, b=b, rank=rank, alpha=float(alpha))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def check_against(self, w: Tensor) -> None:
        d_in, d_out = w.shape
        if self.a.shape != (self.rank, d_in) or self.b.shape != (d_out, self.rank):
            raise ShapeError(
                f"adapter shapes a={self.a.shape}, b={self.b.shape} do not fit "
                f"base weight {w.shape} at rank {self.rank}")


def lora_forward(x: Tensor, w: Tensor, adapter: LoRAAdapter | None = None) -> Tensor:
    """x @ W plus the scaled low-rank correction when an adapter is given."""
    base = matmul(x, w)
    if adapter is None:
        return base
    adapter.check_against(w)
    delta = matmul(matmul(x, transpose(adapter.a)), transpose(adapter.b))
    return add(base, scale(delta, adapter.scaling))


def merge_adapter(w: Tensor, adapter: LoRAAdapter) -> Tensor:
    """Fold an adapter into its base weight, returning the merged weight."""
    adapter.check_against(w)
    merged = w.data + adapter.scaling * (adapter.b.data @ adapter.a.data).T
    return Tensor(merged, requires_grad=w.requires_grad)
