"""Head-repartition planning, latency models, and calibration bands."""

import heapq
import math

import numpy as np
import pytest

from conftest import flat_profile
from tpsim.migration import (
    NAIVE_KERNEL_INIT,
    NAIVE_RELOAD,
    WARM,
    CostModelParams,
    KvLayout,
    MigrationError,
    MigrationPlan,
    Transfer,
    apply_plan,
    latency_aggregate,
    latency_per_page,
    latency_pipelined,
    layout_placement,
    plan_repartition,
    switch_cost,
    weight_memory,
)

KVB = 4096  # bytes per token per head in most tests


def _layout(group, total_heads, requests):
    return KvLayout(
        group=tuple(group), tp=len(group), total_heads=total_heads,
        requests=tuple(requests),
    )


# -- repartition planning ----------------------------------------------------


def test_merge_two_tp1_into_tp2():
    # 8 heads; GPU-1 and GPU-2 each hold one request at TP1; after the merge
    # GPU-1 owns heads 0-3 and GPU-2 owns heads 4-7 for both requests
    old = [_layout([1], 8, [(0, 100)]), _layout([2], 8, [(1, 100)])]
    new = _layout([1, 2], 8, [(0, 100), (1, 100)])
    plan = plan_repartition(old, new, KVB)
    moves = {(t.request_id, t.src_gpu, t.dst_gpu, t.head_lo, t.head_hi) for t in plan.transfers}
    assert moves == {
        (0, 1, 2, 4, 8),  # request on GPU-1: upper heads move 1 -> 2
        (1, 2, 1, 0, 4),  # request on GPU-2: lower heads move 2 -> 1
    }
    for t in plan.transfers:
        assert t.bytes == 4 * 100 * KVB


def test_merge_two_tp2_into_tp4():
    old = [
        _layout([1, 2], 8, [(0, 10)]),
        _layout([3, 4], 8, [(1, 10)]),
    ]
    new = _layout([1, 2, 3, 4], 8, [(0, 10), (1, 10)])
    plan = plan_repartition(old, new, KVB)
    moves = {(t.request_id, t.src_gpu, t.dst_gpu, t.head_lo, t.head_hi) for t in plan.transfers}
    # request 1 lived on (3,4): heads 0-1 come from GPU-3 to GPU-1,
    # heads 2-3 from GPU-3 to GPU-2; request 0 pushes heads 2-3 from GPU-1
    assert (1, 3, 1, 0, 2) in moves
    assert (1, 3, 2, 2, 4) in moves
    assert (0, 1, 2, 2, 4) in moves
    assert moves == {
        (0, 1, 2, 2, 4), (0, 2, 3, 4, 6), (0, 2, 4, 6, 8),
        (1, 3, 1, 0, 2), (1, 3, 2, 2, 4), (1, 4, 3, 4, 6),
    }


def test_identity_transition_empty_plan():
    old = _layout([1, 2], 8, [(0, 50)])
    plan = plan_repartition([old], old, KVB)
    assert plan.transfers == []


def test_gpu_set_mismatch_rejected():
    with pytest.raises(MigrationError, match="GPU sets differ"):
        plan_repartition(
            [_layout([1], 8, [(0, 10)])], _layout([2], 8, [(0, 10)]), KVB
        )


def test_context_length_change_rejected():
    with pytest.raises(MigrationError, match="context length"):
        plan_repartition(
            [_layout([1, 2], 8, [(0, 10)])], _layout([1, 2], 8, [(0, 20)]), KVB
        )


def test_head_divisibility_rejected():
    with pytest.raises(MigrationError, match="divisible"):
        KvLayout(group=(1, 2, 3), tp=3, total_heads=8, requests=())


def test_apply_plan_detects_wrong_source():
    old = [_layout([1], 8, [(0, 10)])]
    bad = MigrationPlan(
        transfers=[Transfer(src_gpu=9, dst_gpu=1, request_id=0, head_lo=0, head_hi=4, bytes=1)]
    )
    with pytest.raises(MigrationError, match="on 1"):
        apply_plan(old, bad)


def test_exhaustive_repartition_reproduces_canonical_layout():
    # every (H, TP_old, TP_new) divisor combination on <= 8 GPUs, 20 random
    # requests x 50 seeds: applying the plan must land every (request, head)
    # exactly where the canonical new layout puts it
    rng = np.random.default_rng(2024)
    combos = [
        (h, a, b)
        for h in (2, 4, 8, 16)
        for a in (1, 2, 4, 8)
        for b in (1, 2, 4, 8)
        if h % a == 0 and h % b == 0 and max(a, b) <= 8
    ]
    assert len(combos) >= 40
    for h, tp_old, tp_new in combos:
        n_gpus = max(tp_old, tp_new)
        gpus = list(range(1, n_gpus + 1))
        for _ in range(50 if (h, tp_old, tp_new) != (2, 1, 1) else 5):
            ctxs = rng.integers(1, 5000, size=20)
            old_groups = [gpus[i : i + tp_old] for i in range(0, n_gpus, tp_old)]
            new_groups = [gpus[i : i + tp_new] for i in range(0, n_gpus, tp_new)]
            old_reqs = [[] for _ in old_groups]
            new_reqs = [[] for _ in new_groups]
            for rid, ctx in enumerate(ctxs):
                old_reqs[rid % len(old_groups)].append((rid, int(ctx)))
                # requests keep a deterministic destination group
                new_reqs[rid % len(new_groups)].append((rid, int(ctx)))
            old = [_layout(g, h, r) for g, r in zip(old_groups, old_reqs)]
            new = [_layout(g, h, r) for g, r in zip(new_groups, new_reqs)]
            plan = plan_repartition(old, new, KVB)
            assert apply_plan(old, plan) == layout_placement(new)
            for t in plan.transfers:
                assert t.src_gpu != t.dst_gpu
                ctx = dict((r, c) for lay in old for r, c in lay.requests)[t.request_id]
                assert t.bytes == (t.head_hi - t.head_lo) * ctx * KVB


def test_reversibility_same_byte_volume():
    rng = np.random.default_rng(5)
    for _ in range(20):
        ctxs = [(i, int(rng.integers(1, 2000))) for i in range(8)]
        a = [_layout([1, 2], 8, ctxs[:4]), _layout([3, 4], 8, ctxs[4:])]
        b = _layout([1, 2, 3, 4], 8, ctxs)
        fwd = plan_repartition(a, b, KVB)
        back = plan_repartition([b], a, KVB)
        assert fwd.total_bytes == back.total_bytes


# -- latency models ----------------------------------------------------------


def _single_source_plan(nbytes, src=1, dst=2):
    return MigrationPlan(
        transfers=[Transfer(src_gpu=src, dst_gpu=dst, request_id=0,
                            head_lo=0, head_hi=1, bytes=int(nbytes))]
    )


def test_per_page_single_page():
    params = CostModelParams(link_bw_gbps=20.0, per_transfer_overhead_us=100.0,
                             page_bytes=65536)
    plan = _single_source_plan(65536)
    expected = 0.1 + 65536 / 20e9 * 1000.0
    assert latency_per_page(plan, params) == pytest.approx(expected)


def test_per_page_scales_with_page_count():
    params = CostModelParams()
    one = latency_per_page(_single_source_plan(params.page_bytes * 10), params)
    two = latency_per_page(_single_source_plan(params.page_bytes * 20), params)
    assert two == pytest.approx(2 * one)


def test_per_page_parallel_across_sources():
    params = CostModelParams()
    plan = MigrationPlan(transfers=[
        Transfer(1, 2, 0, 0, 1, params.page_bytes * 8),
        Transfer(3, 4, 1, 0, 1, params.page_bytes * 2),
    ])
    only_big = latency_per_page(_single_source_plan(params.page_bytes * 8), params)
    assert latency_per_page(plan, params) == pytest.approx(only_big)


def test_aggregate_hand_value():
    params = CostModelParams(copy_bw_gbps=900.0, link_bw_gbps=20.0,
                             per_transfer_overhead_us=100.0)
    plan = _single_source_plan(1e9)
    expected = (1e9 / 900e9 + 1e9 / 20e9) * 1000.0 + 0.1  # ~51.3 ms
    assert latency_aggregate(plan, params) == pytest.approx(expected)
    assert latency_aggregate(plan, params) == pytest.approx(51.3, abs=0.2)


def test_zero_byte_plan_costs_nothing():
    params = CostModelParams()
    empty = MigrationPlan(transfers=[])
    assert latency_per_page(empty, params) == 0.0
    assert latency_aggregate(empty, params) == 0.0
    assert latency_pipelined(empty, params) == 0.0


def test_pipelined_single_chunk_no_overlap():
    params = CostModelParams(copy_bw_gbps=100.0, link_bw_gbps=50.0,
                             per_transfer_overhead_us=100.0,
                             chunk_bytes=1 << 30)
    nbytes = 1e8
    expected = (nbytes / 100e9 + nbytes / 50e9) * 1000.0 + 0.1
    assert latency_pipelined(_single_source_plan(nbytes), params) == pytest.approx(expected)


def test_pipelined_four_chunk_hand_schedule():
    # t_copy = 2 ms, t_send = 3 ms, 4 full chunks:
    # 2 + 3x3 + 3 = 14 ms
    chunk = 128 * 1024 * 1024
    copy_bw = chunk / 0.002 / 1e9
    link_bw = chunk / 0.002 / 1e9  # chunk/link = 2 ms, + 1 ms overhead = 3 ms
    params = CostModelParams(copy_bw_gbps=copy_bw, link_bw_gbps=link_bw,
                             per_transfer_overhead_us=1000.0, chunk_bytes=chunk)
    plan = _single_source_plan(4 * chunk)
    assert latency_pipelined(plan, params) == pytest.approx(14.0)


def _oracle_two_buffer_ms(total_bytes, params):
    """Independent event simulation: two buffers, one copy and one send engine."""
    n = math.ceil(total_bytes / params.chunk_bytes)
    if n == 0:
        return 0.0
    sizes = [min(params.chunk_bytes, total_bytes - i * params.chunk_bytes) for i in range(n)]
    buffer_free = [0.0, 0.0]
    copy_engine_free = 0.0
    send_engine_free = 0.0
    events = []  # (time, seq, kind, chunk)
    seq = 0
    finish = 0.0
    for i, size in enumerate(sizes):
        buf = i % 2
        copy_start = max(copy_engine_free, buffer_free[buf])
        copy_end = copy_start + size / (params.copy_bw_gbps * 1e9) * 1000.0
        copy_engine_free = copy_end
        send_start = max(copy_end, send_engine_free)
        send_end = send_start + (
            params.per_transfer_overhead_us / 1000.0
            + size / (params.link_bw_gbps * 1e9) * 1000.0
        )
        heapq.heappush(events, (send_end, seq, "send_done", buf))
        seq += 1
        send_engine_free = send_end
        buffer_free[buf] = send_end
        finish = send_end
    while events:
        t, _, _, _ = heapq.heappop(events)
        assert t <= finish + 1e-9
    return finish


def _random_constrained_params(rng):
    page = int(2 ** rng.integers(12, 18))
    chunk = int(2 ** rng.integers(24, 29))
    link = float(rng.uniform(10, 300))
    copy = link * float(rng.uniform(1.5, 10.0))
    # overhead well inside (page/copy_bw, chunk/copy_bw) keeps the strategy
    # ordering well-defined
    lo = 10.0 * page / (copy * 1e9) * 1e6
    hi = 0.5 * chunk / (copy * 1e9) * 1e6
    overhead = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return CostModelParams(
        copy_bw_gbps=copy, link_bw_gbps=link,
        per_transfer_overhead_us=overhead,
        page_bytes=page, chunk_bytes=chunk,
    )


def test_pipelined_matches_event_oracle_and_ordering_500():
    rng = np.random.default_rng(7)
    for _ in range(500):
        params = _random_constrained_params(rng)
        transfers = []
        for src in range(int(rng.integers(1, 5))):
            remaining = int(rng.integers(params.chunk_bytes, 2_000_000_000))
            for dst in range(int(rng.integers(1, 4))):
                part = max(1, remaining // int(rng.integers(1, 4)))
                transfers.append(
                    Transfer(src_gpu=src, dst_gpu=100 + dst, request_id=dst,
                             head_lo=0, head_hi=1, bytes=part)
                )
                remaining -= part
                if remaining <= 0:
                    break
        plan = MigrationPlan(transfers=transfers)
        pipelined = latency_pipelined(plan, params)
        oracle = max(
            _oracle_two_buffer_ms(b, params) for b in plan.bytes_by_source().values()
        )
        assert pipelined == oracle  # exact, not approximate
        aggregate = latency_aggregate(plan, params)
        per_page = latency_per_page(plan, params)
        assert pipelined <= aggregate + 1e-9
        assert aggregate <= per_page + 1e-9


def test_calibration_bands_and_speedup():
    # bundled defaults: 0.5-5 GB payloads must land in the published latency
    # bands with >= 100x speedup of pipelined over per-page
    params = CostModelParams()
    for gb in (0.5, 1.0, 2.0, 5.0):
        plan = _single_source_plan(gb * 1e9)
        per_page = latency_per_page(plan, params)
        pipelined = latency_pipelined(plan, params)
        assert 0.4e3 <= per_page <= 12e3, f"{gb} GB per-page {per_page} ms"
        assert 1.8 <= pipelined <= 50.0, f"{gb} GB pipelined {pipelined} ms"
        assert per_page / pipelined >= 100.0


def test_switch_cost_modes():
    params = CostModelParams()
    empty = MigrationPlan(transfers=[], handshake_ms=params.handshake_ms)
    assert switch_cost(WARM, empty, params) == pytest.approx(params.handshake_ms)
    plan = _single_source_plan(1e9)
    assert switch_cost(NAIVE_RELOAD, plan, params) >= 30_000.0
    assert switch_cost(NAIVE_KERNEL_INIT, plan, params) >= 10_000.0
    assert switch_cost(WARM, plan, params) < 100.0
    with pytest.raises(MigrationError):
        switch_cost("cold", plan, params)


def test_weight_memory_modes():
    prof = flat_profile(tp_levels=(1, 2, 4, 8), total_kv_heads=8)
    # full copy 26 GB, levels {1,2,4,8}: 26 x (1 + 1/2 + 1/4 + 1/8) = 48.75 GB,
    # within 10% of the published 45.5 GB figure
    per_tp = weight_memory("per_tp_copies", prof)
    assert per_tp == pytest.approx(48.75)
    assert abs(per_tp - 45.5) / 45.5 <= 0.10
    assert weight_memory("full_copy_per_gpu", prof) == 26.0
    assert weight_memory("sharded", prof, tp=1) == 26.0
    assert weight_memory("sharded", prof, tp=4) == pytest.approx(6.5)
    with pytest.raises(MigrationError):
        weight_memory("sharded", prof)
    with pytest.raises(MigrationError):
        weight_memory("quantized", prof)


def test_params_validation():
    with pytest.raises(MigrationError):
        CostModelParams(copy_bw_gbps=0.0)
    with pytest.raises(MigrationError):
        CostModelParams(page_bytes=0)
