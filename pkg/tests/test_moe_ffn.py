from fractions import Fraction

import numpy as np
import pytest

from loramix.lora import FrozenLinear, LoraAdapter
from loramix.moe_ffn import (
    MODE_DENSE,
    MODE_SPARSE,
    MoeFfnLayer,
    PlainLoraFfn,
    build_moe_ffn,
    count_flops,
    moe_ffn_forward,
)
from loramix.routing import MoeRouter
from loramix.tensor import Tensor, tensor


def _randomize_adapters(layer, rng, scale=0.3):
    for adapter in layer.adapters():
        adapter.a.data = rng.normal(0, scale, size=adapter.a.shape)
        adapter.b.data = rng.normal(0, scale, size=adapter.b.shape)


def _clone_adapter(adapter):
    return LoraAdapter(
        a=Tensor(adapter.a.data.copy(), requires_grad=True),
        b=Tensor(adapter.b.data.copy(), requires_grad=True),
        rank=adapter.rank,
        alpha=adapter.alpha,
    )


def _base_ffn_out(layer, x):
    u = x @ layer.up.weight.data.T
    a = u * (1.0 / (1.0 + np.exp(-u)))  # silu
    return a @ layer.down.weight.data.T


def test_single_expert_sparse_is_bitwise_plain_lora():
    rng = np.random.default_rng(0)
    moe = build_moe_ffn(
        dim=6, hidden=10, num_experts=1, rank=2, alpha=2.0, capacity=64,
        mode=MODE_SPARSE, rng=rng,
    )
    _randomize_adapters(moe, rng)
    plain = PlainLoraFfn(
        up=moe.up,
        down=moe.down,
        up_adapter=_clone_adapter(moe.up_experts[0]),
        down_adapter=_clone_adapter(moe.down_experts[0]),
    )
    x = rng.normal(size=(9, 6))
    out_moe, _, _ = moe.forward(tensor(x))
    out_plain = plain.forward(tensor(x))
    assert np.array_equal(out_moe.data, out_plain.data)

    # gradients are bitwise identical too
    out_moe.sum().backward()
    out_plain.sum().backward()
    for got, want in [
        (moe.up_experts[0], plain.up_adapter),
        (moe.down_experts[0], plain.down_adapter),
    ]:
        assert np.array_equal(got.a.grad, want.a.grad)
        assert np.array_equal(got.b.grad, want.b.grad)


def test_fresh_adapters_leave_base_ffn_untouched():
    for mode in (MODE_SPARSE, MODE_DENSE):
        rng = np.random.default_rng(1)
        layer = build_moe_ffn(
            dim=5, hidden=8, num_experts=3, rank=2, alpha=2.0, capacity=64,
            mode=mode, rng=rng,
        )
        x = rng.normal(size=(7, 5))
        out, state = moe_ffn_forward(layer, tensor(x))
        assert np.allclose(out.data, _base_ffn_out(layer, x), atol=0)
        assert state.counts.sum() == 7


def test_dense_matches_sparse_at_saturated_router():
    rng = np.random.default_rng(2)
    common = dict(dim=4, hidden=6, num_experts=2, rank=2, alpha=2.0, capacity=64)
    sparse = build_moe_ffn(mode=MODE_SPARSE, rng=np.random.default_rng(3), **common)
    _randomize_adapters(sparse, rng)
    dense = MoeFfnLayer(
        up=sparse.up,
        down=sparse.down,
        up_experts=[_clone_adapter(a) for a in sparse.up_experts],
        down_experts=[_clone_adapter(a) for a in sparse.down_experts],
        router=sparse.router,
        mode=MODE_DENSE,
    )
    # logit gap >= 30 per token: first coordinate +-15 against +-1 router rows
    sparse.router.weight.data = np.zeros((2, 4))
    sparse.router.weight.data[0, 0] = 1.0
    sparse.router.weight.data[1, 0] = -1.0
    x = rng.normal(size=(10, 4))
    x[:, 0] = np.where(rng.random(10) < 0.5, 15.0, -15.0)
    out_sparse, _, dec = sparse.forward(tensor(x))
    out_dense, _, _ = dense.forward(tensor(x))
    assert len(set(dec.assignments.tolist())) == 2  # both experts exercised
    assert np.max(np.abs(out_sparse.data - out_dense.data)) < 1e-9


def test_sparse_mode_ignores_unchosen_experts_bitwise():
    rng = np.random.default_rng(4)
    layer = build_moe_ffn(
        dim=6, hidden=9, num_experts=2, rank=2, alpha=2.0, capacity=64,
        mode=MODE_SPARSE, rng=rng,
    )
    _randomize_adapters(layer, rng)
    x = tensor(rng.normal(size=(12, 6)))
    out_before, _, dec = layer.forward(x)
    group0 = dec.groups[0]
    assert group0.size > 0 and dec.groups[1].size > 0
    # perturb everything belonging to expert 1
    layer.up_experts[1].a.data += 5.0
    layer.down_experts[1].b.data -= 3.0
    out_after, _, dec_after = layer.forward(x)
    assert np.array_equal(dec_after.assignments, dec.assignments)
    assert np.array_equal(out_after.data[group0], out_before.data[group0])
    assert not np.allclose(out_after.data[dec.groups[1]], out_before.data[dec.groups[1]])


def test_both_sublayers_use_the_same_expert_choice():
    rng = np.random.default_rng(5)
    layer = build_moe_ffn(
        dim=5, hidden=7, num_experts=3, rank=2, alpha=2.0, capacity=64,
        mode=MODE_SPARSE, rng=rng,
    )
    _randomize_adapters(layer, rng)
    x = rng.normal(size=(20, 5))
    out, _, dec = layer.forward(tensor(x))
    # reference computed token by token with the shared choice
    want = np.zeros((20, 5))
    for t in range(20):
        k = dec.assignments[t]
        xt = x[t : t + 1]
        up_e = layer.up_experts[k]
        down_e = layer.down_experts[k]
        u = xt @ layer.up.weight.data.T + up_e.scale * (xt @ up_e.a.data.T) @ up_e.b.data.T
        a = u * (1.0 / (1.0 + np.exp(-u)))
        want[t] = (
            a @ layer.down.weight.data.T
            + down_e.scale * (a @ down_e.a.data.T) @ down_e.b.data.T
        )
    assert np.allclose(out.data, want, atol=1e-12)


# -- cost accounting --------------------------------------------------------------


def test_flops_single_expert_overhead_is_router_only():
    rng = np.random.default_rng(6)
    moe = build_moe_ffn(
        dim=8, hidden=16, num_experts=1, rank=4, alpha=4.0, capacity=64,
        mode=MODE_SPARSE, rng=rng,
    )
    plain = PlainLoraFfn(
        up=moe.up, down=moe.down,
        up_adapter=moe.up_experts[0], down_adapter=moe.down_experts[0],
    )
    r_moe = count_flops(moe, 32)
    r_plain = count_flops(plain, 32)
    assert r_moe.expert_macs_sparse == r_plain.expert_macs_sparse
    assert r_moe.total_sparse - r_plain.total_plain == r_moe.router_macs
    assert r_plain.router_macs == 0


def test_flops_closed_form_ratio():
    rng = np.random.default_rng(7)
    layer = build_moe_ffn(
        dim=64, hidden=256, num_experts=4, rank=8, alpha=8.0, capacity=256,
        mode=MODE_SPARSE, rng=rng,
    )
    report = count_flops(layer, 128)
    d, h, r, k = 64, 256, 8, 4
    want = 1 + Fraction(k * d, d * h + h * d + 2 * r * (d + h))
    assert report.sparse_over_plain == want
    assert report.total_sparse - report.total_plain == 128 * k * d


@pytest.mark.parametrize("k", [1, 2, 3, 5, 8, 16])
def test_dense_expert_macs_are_k_times_sparse(k):
    rng = np.random.default_rng(8)
    layer = build_moe_ffn(
        dim=16, hidden=32, num_experts=k, rank=4, alpha=4.0, capacity=64,
        mode=MODE_DENSE, rng=rng,
    )
    report = count_flops(layer, 50)
    assert report.expert_macs_dense == k * report.expert_macs_sparse
    assert report.dense_over_sparse_experts == Fraction(k, 1)
