"""Cluster-configuration enumeration, goodput-efficiency scoring, and GPU assignment.

The planner enumerates (tier, prefill-TP, decode-TP, group-count) candidates,
scores each by goodput efficiency (SLO-compliant throughput per GPU) weighted
by unmet demand, then splits the GPU pool across tiers by a small dynamic
program over the weighted scores. Static, split, and oracle baselines share
the same config representation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

from .profile import PerfProfile, ThroughputEnvelope, derive_envelope
from .trace import SloTier, TierDemand

PREFILL = "prefill"
DECODE = "decode"
BACKGROUND = "background"

EPSILON_RPS = 0.01  # req/s; guards the unmet-demand ratio at served_rps = 0


@dataclass(frozen=True)
class ConfigCandidate:
    tier_id: int
    tp_prefill: int
    tp_decode: int
    prefill_groups: int
    decode_groups: int
    thp: float  # per prefill group
    thd: float  # per decode group
    ge: float = 0.0
    wge: float = 0.0

    @property
    def gpus_used(self) -> int:
        return self.prefill_groups * self.tp_prefill + self.decode_groups * self.tp_decode


@dataclass(frozen=True)
class Group:
    gpu_ids: tuple[int, ...]
    tier_id: int
    stage: str  # prefill | decode | background
    tp: int

    def __post_init__(self):
        if len(self.gpu_ids) != self.tp:
            raise ValueError("group size must equal its tp level")

    @property
    def key(self):
        return (self.tier_id, self.stage, self.tp)


@dataclass(frozen=True)
class ClusterConfig:
    window_index: int
    groups: tuple[Group, ...]

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            for gid in g.gpu_ids:
                if gid in seen:
                    raise ValueError(f"gpu {gid} assigned to multiple groups")
                seen.add(gid)

    def groups_for(self, tier_id: int, stage: str) -> list[Group]:
        return [g for g in self.groups if g.tier_id == tier_id and g.stage == stage]


def balance_stages(
    envelope_p: ThroughputEnvelope, envelope_d: ThroughputEnvelope, prefill_groups: int
) -> int | None:
    """Decode group count that keeps decode off the critical path (P*THP <= D*THD)."""
    if envelope_d.thd <= 0:
        return None
    return max(1, math.ceil(prefill_groups * envelope_p.thp / envelope_d.thd))


def goodput_efficiency(candidate: ConfigCandidate, demand: TierDemand) -> float:
    served = min(candidate.prefill_groups * candidate.thp, demand.rps_observed)
    return served / candidate.gpus_used


def weighted_score(
    ge: float, demand: TierDemand, epsilon: float = EPSILON_RPS
) -> float:
    return ge * (demand.rps_observed + epsilon) / (demand.served_rps + epsilon)


def make_envelopes(
    profile: PerfProfile,
    tiers,
    avg_prompt_len: float,
    avg_output_len: float,
    headroom: float = 1.0,
    per_tier: dict[int, tuple[float, float]] | None = None,
) -> dict[tuple[int, int], ThroughputEnvelope]:
    """Envelope per (tier_id, tp) for every non-background tier.

    `per_tier` overrides the workload averages for specific tiers as
    tier_id -> (avg_prompt_len, avg_output_len); tiers with very different
    prompt lengths need their own envelopes or TTFT feasibility is wrong.
    """
    out = {}
    for tier in tiers:
        if tier.background:
            continue
        plen, olen = (per_tier or {}).get(
            tier.id, (avg_prompt_len, avg_output_len)
        )
        for tp in profile.tp_levels:
            out[(tier.id, tp)] = derive_envelope(
                profile, tier, tp, plen, olen, headroom
            )
    return out


def enumerate_candidates(
    envelopes: dict[tuple[int, int], ThroughputEnvelope],
    tiers,
    demands: list[TierDemand],
    pool_size: int,
    epsilon: float = EPSILON_RPS,
) -> list[ConfigCandidate]:
    """All balanced, scored (tier, TPi, TPj, P) candidates that fit the pool."""
    by_tier = {d.tier_id: d for d in demands}
    tp_levels = sorted({tp for (_, tp) in envelopes})
    out = []
    for tier in tiers:
        if tier.background:
            continue
        demand = by_tier.get(tier.id, TierDemand(tier_id=tier.id))
        for tp_p in tp_levels:
            env_p = envelopes[(tier.id, tp_p)]
            if env_p.thp <= 0:
                continue
            for tp_d in tp_levels:
                env_d = envelopes[(tier.id, tp_d)]
                if env_d.thd <= 0:
                    continue
                thp, thd = env_p.thp, env_d.thd
                rps = demand.rps_observed
                weight = (rps + epsilon) / (demand.served_rps + epsilon)
                p = 1
                while True:
                    d = max(1, math.ceil(p * thp / thd))
                    gpus = p * tp_p + d * tp_d
                    if gpus > pool_size:
                        break
                    ge = min(p * thp, rps) / gpus
                    out.append(
                        ConfigCandidate(
                            tier_id=tier.id,
                            tp_prefill=tp_p,
                            tp_decode=tp_d,
                            prefill_groups=p,
                            decode_groups=d,
                            thp=thp,
                            thd=thd,
                            ge=ge,
                            wge=ge * weight,
                        )
                    )
                    p += 1
    return out


def _alloc_ids(free_ids: list[int], n: int) -> tuple[int, ...]:
    taken = tuple(free_ids[:n])
    del free_ids[:n]
    return taken


def _per_tier_budget_table(
    candidates: list[ConfigCandidate], demand: TierDemand, pool_size: int
):
    """Best candidate and weighted served value for every GPU budget 0..pool.

    For one tier the best use of exactly-or-fewer than g GPUs is a single
    balanced candidate (the P ladder already spans all replication levels), so
    a running max over candidates sorted by footprint gives the full table.
    """
    rps = demand.rps_observed
    best_at: dict[int, ConfigCandidate] = {}
    served_at: dict[int, float] = {}
    for c in sorted(candidates, key=lambda c: (c.gpus_used, c.tp_prefill, c.tp_decode)):
        served = min(c.prefill_groups * c.thp, rps)
        if served > served_at.get(c.gpus_used, -1.0) + 1e-12:
            served_at[c.gpus_used] = served
            best_at[c.gpus_used] = c
    value = [0.0] * (pool_size + 1)
    choice: list[ConfigCandidate | None] = [None] * (pool_size + 1)
    for g in range(1, pool_size + 1):
        value[g], choice[g] = value[g - 1], choice[g - 1]
        if g in served_at and served_at[g] > value[g] + 1e-12:
            value[g], choice[g] = served_at[g], best_at[g]
    return value, choice


def assign_pool(
    candidates: list[ConfigCandidate],
    demands: list[TierDemand],
    pool_size: int,
    epsilon: float = EPSILON_RPS,
) -> ClusterConfig:
    """Split the pool across tiers maximizing demand-weighted served rate.

    Each tier receives at most one balanced candidate (its P ladder covers all
    replication levels); the split is chosen by dynamic programming over GPU
    budgets, so the allocation is exactly optimal for the weighted objective
    sum_t weight_t * min(P*thp, rps_t) with weight_t = (rps+eps)/(served+eps).
    Starved tiers (served ~ 0) carry maximal weight and are never crowded out
    while any candidate of theirs still fits. Ties prefer fewer GPUs, then
    lower tier ids. Leftover GPUs become extra decode groups for the tier of
    the largest decode group, or background singletons when nothing was picked.
    """
    by_tier: dict[int, list[ConfigCandidate]] = {}
    for c in candidates:
        by_tier.setdefault(c.tier_id, []).append(c)
    demand_of = {d.tier_id: d for d in demands}
    tier_ids = sorted(by_tier)

    # DP over tiers: dp[g] = best weighted value using at most g GPUs;
    # take[t][g] = GPU budget granted to tier t in the best solution of size g
    dp = [0.0] * (pool_size + 1)
    takes: list[list[int]] = []
    tables = []
    for tid in tier_ids:
        demand = demand_of.get(tid, TierDemand(tier_id=tid))
        weight = (demand.rps_observed + epsilon) / (demand.served_rps + epsilon)
        value, choice = _per_tier_budget_table(by_tier[tid], demand, pool_size)
        tables.append(choice)
        new_dp = [0.0] * (pool_size + 1)
        take = [0] * (pool_size + 1)
        for g in range(pool_size + 1):
            best_v, best_k = dp[g], 0
            for k in range(1, g + 1):
                v = dp[g - k] + weight * value[k]
                if v > best_v + 1e-12:
                    best_v, best_k = v, k
            new_dp[g], take[g] = best_v, best_k
        dp = new_dp
        takes.append(take)

    picks: list[ConfigCandidate] = []
    g = pool_size
    for i in range(len(tier_ids) - 1, -1, -1):
        k = takes[i][g]
        if k > 0 and tables[i][k] is not None:
            picks.append(tables[i][k])
            g -= k
    picks.sort(key=lambda c: (c.tier_id, c.tp_prefill, c.tp_decode))

    groups: list[Group] = []
    free_ids = list(range(pool_size))
    for cand in picks:
        for _ in range(cand.prefill_groups):
            groups.append(
                Group(_alloc_ids(free_ids, cand.tp_prefill), cand.tier_id, PREFILL, cand.tp_prefill)
            )
        for _ in range(cand.decode_groups):
            groups.append(
                Group(_alloc_ids(free_ids, cand.tp_decode), cand.tier_id, DECODE, cand.tp_decode)
            )

    decode_groups = [g for g in groups if g.stage == DECODE]
    if free_ids and decode_groups:
        largest = max(decode_groups, key=lambda g: g.tp)
        while len(free_ids) >= largest.tp:
            groups.append(
                Group(_alloc_ids(free_ids, largest.tp), largest.tier_id, DECODE, largest.tp)
            )
    while free_ids:
        groups.append(Group(_alloc_ids(free_ids, 1), -1, BACKGROUND, 1))

    return ClusterConfig(window_index=0, groups=tuple(groups))


def _match_previous(
    config: ClusterConfig, previous: ClusterConfig, pool_size: int
) -> ClusterConfig:
    """Remap gpu ids so groups identical in (tier, stage, tp) keep their GPUs."""
    prev_by_key: dict[tuple, list[Group]] = {}
    for g in previous.groups:
        prev_by_key.setdefault(g.key, []).append(g)

    kept: list[Group | None] = []
    used_ids: set[int] = set()
    for g in config.groups:
        pool = prev_by_key.get(g.key)
        if pool:
            prev = pool.pop(0)
            kept.append(replace(g, gpu_ids=prev.gpu_ids))
            used_ids.update(prev.gpu_ids)
        else:
            kept.append(None)

    free = [i for i in range(pool_size) if i not in used_ids]
    out = []
    for g, k in zip(config.groups, kept):
        if k is not None:
            out.append(k)
        else:
            out.append(replace(g, gpu_ids=_alloc_ids(free, g.tp)))
    return ClusterConfig(window_index=config.window_index, groups=tuple(out))


def plan_window(
    envelopes: dict[tuple[int, int], ThroughputEnvelope],
    tiers,
    demands: list[TierDemand],
    pool_size: int,
    previous: ClusterConfig | None = None,
    window_index: int = 0,
    epsilon: float = EPSILON_RPS,
) -> ClusterConfig:
    candidates = enumerate_candidates(envelopes, tiers, demands, pool_size, epsilon)
    config = assign_pool(candidates, demands, pool_size, epsilon)
    config = replace(config, window_index=window_index)
    if previous is not None:
        config = _match_previous(config, previous, pool_size)
    return config


# ---------------------------------------------------------------------------
# Policies. A policy maps (window_index, demands, previous config) to the
# config for the next control window.


class DynamicPolicy:
    """Reconfigures the whole pool every window via weighted pool assignment."""

    name = "dynamic"

    def __init__(self, envelopes, tiers, pool_size, epsilon=EPSILON_RPS):
        self.envelopes = envelopes
        self.tiers = tiers
        self.pool_size = pool_size
        self.epsilon = epsilon

    def plan(self, window_index, demands, previous):
        return plan_window(
            self.envelopes,
            self.tiers,
            demands,
            self.pool_size,
            previous,
            window_index,
            self.epsilon,
        )


class StaticPolicy:
    """A constant configuration, never reconfigured."""

    def __init__(self, config: ClusterConfig, name: str = "static"):
        self.config = config
        self.name = name

    def plan(self, window_index, demands, previous):
        return replace(self.config, window_index=window_index)


def static_config(
    envelopes,
    tiers,
    pool_size: int,
    tp_prefill: int,
    tp_decode: int | None = None,
) -> ClusterConfig:
    """Fixed pool-wide partition at the given TP levels.

    Prefill and decode group counts are balanced with envelope throughputs
    averaged over the non-background tiers. Group tier ids rotate over those
    tiers; cross-tier spill and the shared decode fallback serve the rest.
    """
    if tp_decode is None:
        tp_decode = tp_prefill
    active = [t for t in tiers if not t.background]
    if not active:
        raise ValueError("no non-background tiers")
    thp = sum(envelopes[(t.id, tp_prefill)].thp for t in active) / len(active)
    thd = sum(envelopes[(t.id, tp_decode)].thd for t in active) / len(active)
    best = None
    p = 1
    while True:
        d = max(1, math.ceil(p * thp / thd)) if thd > 0 else 1
        if p * tp_prefill + d * tp_decode > pool_size:
            break
        best = (p, d)
        p += 1
    if best is None:
        # pool too small for a balanced pair at this TP; one of each if they
        # fit at all
        if tp_prefill + tp_decode <= pool_size:
            best = (1, 1)
        else:
            raise ValueError(
                f"pool of {pool_size} cannot fit tp {tp_prefill}/{tp_decode}"
            )
    p, d = best
    used = p * tp_prefill + d * tp_decode
    while used + tp_decode <= pool_size:
        d += 1
        used += tp_decode
    # label groups only with tiers this TP level can actually prefill; an
    # infeasible tier's envelope would force batch-1 serving on spilled work
    servable = [t for t in active if envelopes[(t.id, tp_prefill)].thp > 0]
    if not servable:
        servable = active
    groups: list[Group] = []
    free_ids = list(range(pool_size))
    for i in range(p):
        tier = servable[i % len(servable)]
        groups.append(Group(_alloc_ids(free_ids, tp_prefill), tier.id, PREFILL, tp_prefill))
    for i in range(d):
        tier = servable[i % len(servable)]
        groups.append(Group(_alloc_ids(free_ids, tp_decode), tier.id, DECODE, tp_decode))
    while free_ids:
        groups.append(Group(_alloc_ids(free_ids, 1), -1, BACKGROUND, 1))
    return ClusterConfig(window_index=0, groups=tuple(groups))


def split_policy(envelopes, tiers, pool_size: int) -> StaticPolicy:
    """Per-tier sub-pools, each at its offline-swept best static TP pair."""
    active = [t for t in tiers if not t.background]
    share = pool_size // len(active)
    tp_levels = sorted({tp for (_, tp) in envelopes})
    groups: list[Group] = []
    free_ids = list(range(pool_size))
    for tier in active:
        best = None
        for tp_p in tp_levels:
            env_p = envelopes[(tier.id, tp_p)]
            if env_p.thp <= 0:
                continue
            for tp_d in tp_levels:
                env_d = envelopes[(tier.id, tp_d)]
                if env_d.thd <= 0:
                    continue
                # max served rate inside the share for this TP pair
                p = 1
                cap = 0.0
                pd = None
                while True:
                    d = balance_stages(env_p, env_d, p)
                    if d is None or p * tp_p + d * tp_d > share:
                        break
                    cap = p * env_p.thp
                    pd = (p, d)
                    p += 1
                if pd and (best is None or cap > best[0]):
                    best = (cap, tp_p, tp_d, pd[0], pd[1])
        if best is None:
            continue
        _, tp_p, tp_d, p, d = best
        used = p * tp_p + d * tp_d
        while used + tp_d <= share:
            d += 1
            used += tp_d
        for _ in range(p):
            groups.append(Group(_alloc_ids(free_ids, tp_p), tier.id, PREFILL, tp_p))
        for _ in range(d):
            groups.append(Group(_alloc_ids(free_ids, tp_d), tier.id, DECODE, tp_d))
    while free_ids:
        groups.append(Group(_alloc_ids(free_ids, 1), -1, BACKGROUND, 1))
    return StaticPolicy(ClusterConfig(window_index=0, groups=tuple(groups)), name="split")


def enumerate_joint_configs(envelopes, tiers, pool_size: int):
    """Every disjoint multi-tier assignment of the pool; exponential, pool <= 8 only."""
    if pool_size > 8:
        raise ValueError("joint enumeration is limited to pools of <= 8 GPUs")
    active = [t for t in tiers if not t.background]
    tp_levels = sorted({tp for (_, tp) in envelopes})

    per_tier: list[list[tuple[int, ConfigCandidate]]] = []
    for tier in active:
        options = [(0, None)]
        for tp_p in tp_levels:
            env_p = envelopes[(tier.id, tp_p)]
            if env_p.thp <= 0:
                continue
            for tp_d in tp_levels:
                env_d = envelopes[(tier.id, tp_d)]
                if env_d.thd <= 0:
                    continue
                p = 1
                while True:
                    d = balance_stages(env_p, env_d, p)
                    if d is None or p * tp_p + d * tp_d > pool_size:
                        break
                    options.append(
                        (
                            p * tp_p + d * tp_d,
                            ConfigCandidate(
                                tier_id=tier.id,
                                tp_prefill=tp_p,
                                tp_decode=tp_d,
                                prefill_groups=p,
                                decode_groups=d,
                                thp=env_p.thp,
                                thd=env_d.thd,
                            ),
                        )
                    )
                    p += 1
        per_tier.append(options)

    for combo in itertools.product(*per_tier):
        used = sum(c[0] for c in combo)
        if used <= pool_size:
            yield [c[1] for c in combo if c[1] is not None]


def brute_force_best(envelopes, tiers, demands, pool_size: int):
    """Max total served rps over all joint configs; oracle for greedy quality."""
    by_tier = {d.tier_id: d for d in demands}
    best_served, best_combo = -1.0, []
    for combo in enumerate_joint_configs(envelopes, tiers, pool_size):
        served = sum(
            min(
                c.prefill_groups * c.thp,
                by_tier.get(c.tier_id, TierDemand(c.tier_id)).rps_observed,
            )
            for c in combo
        )
        if served > best_served + 1e-12:
            best_served, best_combo = served, combo
    return best_served, best_combo


def config_from_candidates(candidates, pool_size: int) -> ClusterConfig:
    groups: list[Group] = []
    free_ids = list(range(pool_size))
    for cand in candidates:
        for _ in range(cand.prefill_groups):
            groups.append(
                Group(_alloc_ids(free_ids, cand.tp_prefill), cand.tier_id, PREFILL, cand.tp_prefill)
            )
        for _ in range(cand.decode_groups):
            groups.append(
                Group(_alloc_ids(free_ids, cand.tp_decode), cand.tier_id, DECODE, cand.tp_decode)
            )
    while free_ids:
        groups.append(Group(_alloc_ids(free_ids, 1), -1, BACKGROUND, 1))
    return ClusterConfig(window_index=0, groups=tuple(groups))


class OraclePolicy:
    """Runs the same planner against the realized upcoming window arrivals.

    Upper-bounds the reactive policy: identical allocation machinery, but fed
    the demand it is about to receive instead of last window's observation.
    Restricted to small pools; it exists only as an experiment baseline.
    """

    name = "oracle"

    def __init__(self, envelopes, tiers, pool_size, trace, window: float):
        if pool_size > 8:
            raise ValueError("oracle policy is limited to pools of <= 8 GPUs")
        self.envelopes = envelopes
        self.tiers = tiers
        self.pool_size = pool_size
        self.trace = trace
        self.window = window

    def plan(self, window_index, demands, previous):
        start = window_index * self.window
        end = start + self.window
        realized = {t.id: 0 for t in self.tiers}
        for r in self.trace:
            if start <= r.arrival_time < end and r.tier_id in realized:
                realized[r.tier_id] += 1
        # the oracle knows the upcoming arrivals but must not drop capacity
        # while observed backlog is still queued
        observed = {d.tier_id: d.rps_observed for d in demands}
        future = [
            TierDemand(
                tier_id=tid,
                rps_observed=max(n / self.window, observed.get(tid, 0.0)),
            )
            for tid, n in realized.items()
        ]
        return plan_window(
            self.envelopes, self.tiers, future, self.pool_size, previous, window_index
        )
