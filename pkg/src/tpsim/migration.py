"""KV-head repartitioning plans and migration latency models.

Attention KV state is partitioned across a TP group along the head dimension.
Changing TP level moves head ranges between GPUs; this module computes the
required transfers and predicts their latency under three strategies:
per-page transfers, aggregate-then-send, and a pipelined double-buffer copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .profile import PerfProfile

WARM = "warm"
NAIVE_RELOAD = "naive_reload"
NAIVE_KERNEL_INIT = "naive_kernel_init"


class MigrationError(ValueError):
    pass


@dataclass(frozen=True)
class KvLayout:
    """KV placement of a TP group: rank r holds heads [r*H/N, (r+1)*H/N)."""

    group: tuple[int, ...]  # gpu ids in rank order
    tp: int
    total_heads: int
    requests: tuple[tuple[int, int], ...]  # (request id, context_len tokens)

    def __post_init__(self):
        if len(self.group) != self.tp:
            raise MigrationError("group size must equal tp")
        if self.total_heads % self.tp != 0:
            raise MigrationError(
                f"total_heads={self.total_heads} not divisible by tp={self.tp}"
            )

    @property
    def heads_per_rank(self) -> int:
        return self.total_heads // self.tp

    def gpu_for_head(self, head: int) -> int:
        return self.group[head // self.heads_per_rank]


@dataclass(frozen=True)
class Transfer:
    src_gpu: int
    dst_gpu: int
    request_id: int
    head_lo: int
    head_hi: int  # exclusive
    bytes: int


@dataclass
class MigrationPlan:
    transfers: list[Transfer]
    handshake_ms: float = 0.0
    predicted_latency_ms: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(t.bytes for t in self.transfers)

    def bytes_by_source(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t in self.transfers:
            out[t.src_gpu] = out.get(t.src_gpu, 0) + t.bytes
        return out


@dataclass(frozen=True)
class CostModelParams:
    copy_bw_gbps: float = 900.0  # device-local aggregation bandwidth
    link_bw_gbps: float = 200.0  # inter-GPU interconnect
    per_transfer_overhead_us: float = 100.0
    page_bytes: int = 65536
    chunk_bytes: int = 128 * 1024 * 1024  # pipeline double-buffer size
    handshake_ms: float = 0.5
    reload_ms: float = 30000.0  # weight reload on a naive TP switch
    kernel_init_ms: float = 10000.0  # kernel/runtime re-init on a naive switch

    def __post_init__(self):
        for name in (
            "copy_bw_gbps",
            "link_bw_gbps",
            "per_transfer_overhead_us",
            "page_bytes",
            "chunk_bytes",
            "handshake_ms",
        ):
            if getattr(self, name) <= 0:
                raise MigrationError(f"{name} must be positive")


def head_transfers(
    old: KvLayout, new: KvLayout, kv_bytes_per_token_per_head: int
) -> list[Transfer]:
    """Coalesced head-range moves taking old's requests to their new placement."""
    if old.total_heads != new.total_heads:
        raise MigrationError("head counts differ between layouts")
    h_total = old.total_heads
    transfers = []
    for req_id, context_len in old.requests:
        run_start = None
        run_pair = None
        for h in range(h_total + 1):
            pair = None
            if h < h_total:
                src = old.gpu_for_head(h)
                dst = new.gpu_for_head(h)
                if src != dst:
                    pair = (src, dst)
            if pair != run_pair:
                if run_pair is not None:
                    transfers.append(
                        Transfer(
                            src_gpu=run_pair[0],
                            dst_gpu=run_pair[1],
                            request_id=req_id,
                            head_lo=run_start,
                            head_hi=h,
                            bytes=(h - run_start)
                            * context_len
                            * kv_bytes_per_token_per_head,
                        )
                    )
                run_start, run_pair = h, pair
    return transfers


def plan_repartition(
    old_layouts: list[KvLayout],
    new_layouts,
    kv_bytes_per_token_per_head: int,
    handshake_ms: float = 0.0,
) -> MigrationPlan:
    """Transfers that convert a set of old TP groups into the new layout(s).

    The new layouts must cover exactly the same GPUs and carry every request
    from the old groups (a merged group, or a split into several).
    """
    if isinstance(new_layouts, KvLayout):
        new_layouts = [new_layouts]
    old_gpus = {g for layout in old_layouts for g in layout.group}
    new_gpus = {g for layout in new_layouts for g in layout.group}
    if old_gpus != new_gpus:
        raise MigrationError(
            f"GPU sets differ: old={sorted(old_gpus)} new={sorted(new_gpus)}"
        )
    heads = {layout.total_heads for layout in old_layouts + new_layouts}
    if len(heads) != 1:
        raise MigrationError("all layouts must share total_heads")

    old_by_req = {}
    for layout in old_layouts:
        for req_id, ctx in layout.requests:
            old_by_req[req_id] = (layout, ctx)
    new_req_ids = [r for layout in new_layouts for (r, _) in layout.requests]
    if sorted(new_req_ids) != sorted(old_by_req):
        raise MigrationError("new layouts must carry exactly the old requests")

    transfers = []
    for new in new_layouts:
        for req_id, ctx in new.requests:
            old, old_ctx = old_by_req[req_id]
            if old_ctx != ctx:
                raise MigrationError(f"request {req_id}: context length changed")
            single = KvLayout(
                group=old.group,
                tp=old.tp,
                total_heads=old.total_heads,
                requests=((req_id, ctx),),
            )
            target = KvLayout(
                group=new.group,
                tp=new.tp,
                total_heads=new.total_heads,
                requests=((req_id, ctx),),
            )
            transfers.extend(
                head_transfers(single, target, kv_bytes_per_token_per_head)
            )
    return MigrationPlan(transfers=transfers, handshake_ms=handshake_ms)


def apply_plan(old_layouts: list[KvLayout], plan: MigrationPlan) -> dict:
    """Replay a plan on the old placement; returns {(request, head): gpu}."""
    placement = {}
    for layout in old_layouts:
        for req_id, _ in layout.requests:
            for h in range(layout.total_heads):
                placement[(req_id, h)] = layout.gpu_for_head(h)
    for t in plan.transfers:
        for h in range(t.head_lo, t.head_hi):
            if placement.get((t.request_id, h)) != t.src_gpu:
                raise MigrationError(
                    f"transfer of request {t.request_id} head {h} from gpu "
                    f"{t.src_gpu}, but it is on {placement.get((t.request_id, h))}"
                )
            placement[(t.request_id, h)] = t.dst_gpu
    return placement


def layout_placement(layouts) -> dict:
    if isinstance(layouts, KvLayout):
        layouts = [layouts]
    placement = {}
    for layout in layouts:
        for req_id, _ in layout.requests:
            for h in range(layout.total_heads):
                placement[(req_id, h)] = layout.gpu_for_head(h)
    return placement


def _send_ms(nbytes: float, params: CostModelParams) -> float:
    return params.per_transfer_overhead_us / 1000.0 + nbytes / (
        params.link_bw_gbps * 1e9
    ) * 1000.0


def _copy_ms(nbytes: float, params: CostModelParams) -> float:
    return nbytes / (params.copy_bw_gbps * 1e9) * 1000.0


def latency_per_page(plan: MigrationPlan, params: CostModelParams) -> float:
    """Page-at-a-time transfers, serialized per source, parallel across sources."""
    per_source: dict[int, float] = {}
    page_ms = _send_ms(params.page_bytes, params)
    for t in plan.transfers:
        pages = math.ceil(t.bytes / params.page_bytes)
        per_source[t.src_gpu] = per_source.get(t.src_gpu, 0.0) + pages * page_ms
    ms = max(per_source.values(), default=0.0)
    plan.predicted_latency_ms["per_page"] = ms
    return ms


def latency_aggregate(plan: MigrationPlan, params: CostModelParams) -> float:
    """Copy each source's fragments into one buffer, then a single send."""
    ms = 0.0
    for src, nbytes in plan.bytes_by_source().items():
        ms = max(ms, _copy_ms(nbytes, params) + _send_ms(nbytes, params))
    plan.predicted_latency_ms["aggregate"] = ms
    return ms


def _pipelined_source_ms(total_bytes: int, params: CostModelParams) -> float:
    """Exact two-buffer schedule: copy chunk i while sending chunk i-1.

    Computed by walking the schedule (copy blocked on its buffer's previous
    send, send blocked on its copy and the previous send) rather than a closed
    form, so partial last chunks are timed exactly.
    """
    n = math.ceil(total_bytes / params.chunk_bytes)
    copy_end = [0.0] * n
    send_end = [0.0] * n
    for i in range(n):
        size = min(params.chunk_bytes, total_bytes - i * params.chunk_bytes)
        copy_start = copy_end[i - 1] if i >= 1 else 0.0
        if i >= 2:  # buffer reuse: two buffers alternate
            copy_start = max(copy_start, send_end[i - 2])
        copy_end[i] = copy_start + _copy_ms(size, params)
        send_start = copy_end[i]
        if i >= 1:
            send_start = max(send_start, send_end[i - 1])
        send_end[i] = send_start + _send_ms(size, params)
    return send_end[-1] if n else 0.0


def latency_pipelined(plan: MigrationPlan, params: CostModelParams) -> float:
    per_source = plan.bytes_by_source()
    ms = max(
        (_pipelined_source_ms(b, params) for b in per_source.values()), default=0.0
    )
    plan.predicted_latency_ms["pipelined"] = ms
    return ms


def switch_cost(mode: str, plan: MigrationPlan, params: CostModelParams) -> float:
    """Total pause time of a TP switch under a given weight-handling regime."""
    if mode == WARM:
        return params.handshake_ms + latency_pipelined(plan, params)
    if mode == NAIVE_RELOAD:
        return params.reload_ms + latency_per_page(plan, params)
    if mode == NAIVE_KERNEL_INIT:
        return params.kernel_init_ms + latency_per_page(plan, params)
    raise MigrationError(f"unknown switch mode {mode!r}")


def weight_memory(mode: str, profile: PerfProfile, tp: int | None = None) -> float:
    """GB of weights per GPU under each storage scheme."""
    full = profile.weight_full_copy_gb
    if mode == "full_copy_per_gpu":
        return full
    if mode == "per_tp_copies":
        return sum(full / level for level in profile.tp_levels)
    if mode == "sharded":
        if tp is None:
            raise MigrationError("sharded mode needs a tp level")
        return full / tp
    raise MigrationError(f"unknown weight memory mode {mode!r}")
