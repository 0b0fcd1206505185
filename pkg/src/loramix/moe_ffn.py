"""Feed-forward layers: a frozen two-sublayer FFN adapted either by a single
LoRA pair per sublayer (plain) or by K sparsely routed LoRA experts sharing
one router across both sublayers.

In sparse mode each token executes exactly one expert's adapters; in dense
mode every expert runs and contributions are weighted by the token's routing
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lora import FrozenLinear, LoraAdapter, init_adapter
from .routing import (
    BalanceState,
    MoeRouter,
    RoutingDecision,
    balance_state,
    dispatch,
    gather,
    init_router,
    route,
)
from .tensor import Tensor, column, scale_rows

MODE_SPARSE = "sparse-top1"
MODE_DENSE = "dense"


@dataclass
class PlainLoraFfn:
    """Frozen up/down projections, one adapter pair, no routing."""

    up: FrozenLinear
    down: FrozenLinear
    up_adapter: LoraAdapter
    down_adapter: LoraAdapter

    def forward(self, x: Tensor) -> Tensor:
        u = self.up.forward(x) + self.up_adapter.delta(x)
        a = u.silu()
        return self.down.forward(a) + self.down_adapter.delta(a)

    def adapters(self) -> list[LoraAdapter]:
        return [self.up_adapter, self.down_adapter]


@dataclass
class MoeFfnLayer:
    """FFN with K LoRA experts per sublayer and one shared router.

    Expert j of the up-projection and expert j of the down-projection are
    always co-selected; the router decides once per token on the layer input.
    """

    up: FrozenLinear
    down: FrozenLinear
    up_experts: list[LoraAdapter]
    down_experts: list[LoraAdapter]
    router: MoeRouter
    mode: str = MODE_SPARSE

    def __post_init__(self):
        if self.mode not in (MODE_SPARSE, MODE_DENSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        k = self.router.num_experts
        if not (len(self.up_experts) == len(self.down_experts) == k):
            raise ValueError(
                f"expected {k} experts per sublayer, got "
                f"{len(self.up_experts)}/{len(self.down_experts)}"
            )

    @property
    def num_experts(self) -> int:
        return self.router.num_experts

    def forward(self, x: Tensor) -> tuple[Tensor, BalanceState, RoutingDecision]:
        decision = route(self.router, x)
        if self.mode == MODE_SPARSE:
            out = self._forward_sparse(x, decision)
        else:
            out = self._forward_dense(x, decision)
        return out, balance_state(decision), decision

    def _forward_sparse(self, x: Tensor, decision: RoutingDecision) -> Tensor:
        h_dim = self.up.d_out
        d_dim = self.down.d_out
        parts = dispatch(decision, x)
        up_deltas = [
            adapter.delta(part) for adapter, part in zip(self.up_experts, parts)
        ]
        u = self.up.forward(x) + gather(decision, up_deltas, dim=h_dim)
        a = u.silu()
        a_parts = dispatch(decision, a)
        down_deltas = [
            adapter.delta(part) for adapter, part in zip(self.down_experts, a_parts)
        ]
        return self.down.forward(a) + gather(decision, down_deltas, dim=d_dim)

    def _forward_dense(self, x: Tensor, decision: RoutingDecision) -> Tensor:
        probs = decision.probabilities
        u = self.up.forward(x)
        for j, adapter in enumerate(self.up_experts):
            u = u + scale_rows(adapter.delta(x), column(probs, j))
        a = u.silu()
        y = self.down.forward(a)
        for j, adapter in enumerate(self.down_experts):
            y = y + scale_rows(adapter.delta(a), column(probs, j))
        return y

    def adapters(self) -> list[LoraAdapter]:
        return list(self.up_experts) + list(self.down_experts)


def moe_ffn_forward(layer: MoeFfnLayer, x: Tensor) -> tuple[Tensor, BalanceState]:
    """Route once, apply the frozen FFN plus the routed expert deltas."""
    out, state, _ = layer.forward(x)
    return out, state


def build_moe_ffn(
    dim: int,
    hidden: int,
    num_experts: int,
    rank: int,
    alpha: float,
    capacity: int,
    mode: str,
    rng: np.random.Generator,
) -> MoeFfnLayer:
    up = FrozenLinear(weight=Tensor(rng.normal(0, 1 / np.sqrt(dim), size=(hidden, dim))))
    down = FrozenLinear(weight=Tensor(rng.normal(0, 1 / np.sqrt(hidden), size=(dim, hidden))))
    up_experts = [init_adapter(dim, hidden, rank, alpha, rng) for _ in range(num_experts)]
    down_experts = [init_adapter(hidden, dim, rank, alpha, rng) for _ in range(num_experts)]
    router = init_router(dim, num_experts, capacity, rng)
    return MoeFfnLayer(
        up=up,
        down=down,
        up_experts=up_experts,
        down_experts=down_experts,
        router=router,
        mode=mode,
    )


@dataclass(frozen=True)
class FlopReport:
    """Exact multiply-accumulate counts for one FFN layer over a token batch.

    All counts are exact integers; ratios are exact rationals.
    """

    tokens: int
    dim: int
    hidden: int
    rank: int
    num_experts: int
    base_macs: int
    router_macs: int
    expert_macs_sparse: int
    expert_macs_dense: int

    @property
    def total_plain(self) -> int:
        # plain-LoRA reference at the same rank: no router, one expert's cost
        return self.base_macs + self.expert_macs_sparse

    @property
    def total_sparse(self) -> int:
        return self.base_macs + self.router_macs + self.expert_macs_sparse

    @property
    def total_dense(self) -> int:
        return self.base_macs + self.router_macs + self.expert_macs_dense

    @property
    def sparse_over_plain(self) -> Fraction:
        return Fraction(self.total_sparse, self.total_plain)

    @property
    def dense_over_sparse_experts(self) -> Fraction:
        return Fraction(self.expert_macs_dense, self.expert_macs_sparse)


def count_flops(layer: MoeFfnLayer | PlainLoraFfn, tokens: int) -> FlopReport:
    """Exact MAC counts for the layer's geometry over `tokens` tokens.

    Per token: base FFN costs dim*hidden per sublayer, the router costs
    num_experts*dim, and one expert costs rank*(dim+hidden) per sublayer;
    dense mode pays every expert.
    """
    d = layer.up.d_in
    h = layer.up.d_out
    if isinstance(layer, PlainLoraFfn):
        r = layer.up_adapter.rank
        k = 1
        router_macs = 0
    else:
        r = layer.up_experts[0].rank
        k = layer.num_experts
        router_macs = tokens * k * d
    base = tokens * (d * h + h * d)
    expert_sparse = 2 * tokens * r * (d + h)
    return FlopReport(
        tokens=tokens,
        dim=d,
        hidden=h,
        rank=r,
        num_experts=k,
        base_macs=base,
        router_macs=router_macs,
        expert_macs_sparse=expert_sparse,
        expert_macs_dense=k * expert_sparse,
    )
