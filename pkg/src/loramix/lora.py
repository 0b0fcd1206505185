"""Low-rank adapters attachable to frozen linear layers.

A FrozenLinear never trains; a LoraAdapter adds the update
(alpha/rank) * B @ A on top of it, and only A and B receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class FrozenLinear:
    """y = W x (+ b). W and b are excluded from every optimizer step."""

    weight: Tensor  # (d_out, d_in), requires_grad False
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.requires_grad:
            raise ValueError("FrozenLinear weight must not require gradients")
        if self.bias is not None and self.bias.requires_grad:
            raise ValueError("FrozenLinear bias must not require gradients")

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.t()
        if self.bias is not None:
            out = out + self.bias
        return out


@dataclass
class LoraAdapter:
    """Trainable low-rank pair: effective weight update (alpha/rank) * B @ A.

    A is (rank, d_in), B is (d_out, rank). B starts at zero so a fresh
    adapter leaves the base layer's outputs untouched.
    """

    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        r_a, d_in = self.a.shape
        d_out, r_b = self.b.shape
        if not (self.rank == r_a == r_b):
            raise ShapeError(
                f"adapter rank {self.rank} inconsistent with A{self.a.shape} B{self.b.shape}"
            )
        _validate_rank(self.rank, d_in, d_out)
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        """The adapter's contribution (alpha/rank) * (x A^T) B^T for a row-batch x."""
        return ((x @ self.a.t()) @ self.b.t()) * self.scale

    def update_matrix(self) -> np.ndarray:
        """Materialized (alpha/rank) * B @ A, for inspection and tests."""
        return self.scale * (self.b.data @ self.a.data)


def _validate_rank(rank: int, d_in: int, d_out: int) -> None:
    if rank < 1 or rank > min(d_in, d_out):
        raise ValueError(
            f"rank must satisfy 1 <= rank <= min({d_in}, {d_out}), got {rank}"
        )


def init_adapter(
    d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator
) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/rank), B = 0, deterministic for a fixed rng state."""
    _validate_rank(rank, d_in, d_out)
    a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, d_in)), requires_grad=True)
    b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
    return LoraAdapter(a=a, b=b, rank=rank, alpha=alpha)


def lora_forward(layer: FrozenLinear, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """Adapted layer output Wx + b + (alpha/rank) B A x on a row-batch x."""
    if adapter.a.shape[1] != layer.d_in or adapter.b.shape[0] != layer.d_out:
        raise ShapeError(
            f"adapter ({adapter.b.shape[0]}x{adapter.a.shape[1]}) does not fit "
            f"layer ({layer.d_out}x{layer.d_in})"
        )
    return layer.forward(x) + adapter.delta(x)
