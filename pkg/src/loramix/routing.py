"""Per-layer top-1 token routing, expert-grouped dispatch, and the
load-balance penalty sum_j count_j * prob_mass_j.

Counts are plain integers (no gradient); the probability masses keep their
graph, so the penalty trains the router weights through the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, scatter_rows, softmax, take_rows


@dataclass
class MoeRouter:
    """Router weights: row j scores expert j via a plain dot product.

    capacity is the per-sequence token limit an expert may receive; it is
    set to the model's maximum context length so it never binds and no
    token is ever dropped.
    """

    weight: Tensor  # (num_experts, d_in), trainable
    capacity: int

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.weight.shape[0] < 1:
            raise ShapeError(f"router weight must be (K>=1, d), got {self.weight.shape}")
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]


def init_router(d_in: int, num_experts: int, capacity: int, rng: np.random.Generator) -> MoeRouter:
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(num_experts, d_in)), requires_grad=True)
    return MoeRouter(weight=w, capacity=capacity)


@dataclass
class RoutingDecision:
    """Per-token expert choices for one batch of rows.

    groups[j] lists the original row positions routed to expert j, in their
    original order; the groups partition range(num_tokens).
    """

    assignments: np.ndarray  # (num_tokens,) int64
    probabilities: Tensor  # (num_tokens, num_experts), rows sum to 1
    groups: list[np.ndarray]

    @property
    def num_tokens(self) -> int:
        return self.assignments.shape[0]

    @property
    def num_experts(self) -> int:
        return len(self.groups)

    def counts(self) -> np.ndarray:
        return np.array([g.size for g in self.groups], dtype=np.int64)


@dataclass
class BalanceState:
    """Per-layer balance summary: token counts, probability masses, penalty."""

    counts: np.ndarray  # (num_experts,) int64, constant
    prob_mass: Tensor  # (num_experts,), differentiable
    loss: Tensor  # scalar


def route(router: MoeRouter, x: Tensor) -> RoutingDecision:
    """Assign each row of x to the expert with the highest routing score.

    Ties break toward the lowest expert index; groups preserve original row
    order so dispatch/gather is an exact permutation.
    """
    if x.data.ndim != 2 or x.shape[1] != router.d_in:
        raise ShapeError(
            f"route: tokens {x.shape} do not match router d_in {router.d_in}"
        )
    logits = x @ router.weight.t()
    assignments = np.argmax(logits.data, axis=1)  # first max wins: lowest index
    probabilities = softmax(logits)
    groups = [
        np.flatnonzero(assignments == j) for j in range(router.num_experts)
    ]
    return RoutingDecision(
        assignments=assignments, probabilities=probabilities, groups=groups
    )


def balance_loss(decision: RoutingDecision) -> Tensor:
    """sum_j count_j * prob_mass_j with counts held constant.

    prob_mass_j is the summed routing probability of expert j over all
    tokens; the gradient reaches the router only through these masses.
    """
    counts = Tensor(decision.counts().astype(np.float64))
    prob_mass = decision.probabilities.sum(axis=0)
    return (prob_mass * counts).sum()


def balance_state(decision: RoutingDecision) -> BalanceState:
    counts = decision.counts()
    prob_mass = decision.probabilities.sum(axis=0)
    loss = (prob_mass * Tensor(counts.astype(np.float64))).sum()
    return BalanceState(counts=counts, prob_mass=prob_mass, loss=loss)


def dispatch(decision: RoutingDecision, x: Tensor) -> list[Tensor]:
    """Split rows of x into per-expert sub-batches in original order."""
    if x.shape[0] != decision.num_tokens:
        raise ShapeError(
            f"dispatch: {x.shape[0]} rows for a decision over {decision.num_tokens} tokens"
        )
    return [take_rows(x, g) for g in decision.groups]


def gather(decision: RoutingDecision, parts: list[Tensor], dim: int) -> Tensor:
    """Exact inverse of dispatch: reassemble per-expert rows to original positions."""
    if len(parts) != decision.num_experts:
        raise ShapeError(
            f"gather: {len(parts)} parts for {decision.num_experts} experts"
        )
    total = decision.num_tokens
    out = None
    for g, part in zip(decision.groups, parts):
        if part.shape[0] != g.size:
            raise ShapeError(f"gather: part has {part.shape[0]} rows, group has {g.size}")
        if g.size == 0:
            continue
        placed = scatter_rows(part, g, total)
        out = placed if out is None else out + placed
    if out is None:  # all groups empty only when there are zero tokens
        from .tensor import zeros

        return zeros(total, dim)
    return out
