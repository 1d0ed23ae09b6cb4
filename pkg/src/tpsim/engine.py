"""Deterministic discrete-event simulator for tiered-SLO serving.

Advances arrivals, global dispatch, per-group iteration execution,
per-window reconfiguration, and stop-and-migrate TP transitions. All timing
comes from the offline performance profile; all randomness lives in the
trace, so a run is a pure function of (trace, policy, config).
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

from .migration import (
    CostModelParams,
    KvLayout,
    MigrationPlan,
    WARM,
    _pipelined_source_ms,
    head_transfers,
    switch_cost,
)
from .policy import BACKGROUND, DECODE, PREFILL, ClusterConfig, Group
from .profile import PerfProfile, lookup_latency
from .trace import Request, SloTier, TierDemand

# event-time tie-break: completions before reconfig before arrivals
_PRIO_COMPLETION = 0
_PRIO_RECONFIG = 1
_PRIO_ARRIVAL = 2

FEASIBLE = "feasible"
BEST_EFFORT = "best_effort"

_BG_BATCH_CAP = 4


@dataclass(frozen=True)
class CompletionRecord:
    request_id: int
    tier_id: int
    arrival: float
    first_token_time: float
    completion_time: float
    ttft: float
    tpot: float
    slo_met: bool
    label: str


@dataclass(frozen=True)
class EngineConfig:
    window_s: float = 1.0
    switch_mode: str = WARM
    seed: int = 0
    kv_accounting: bool = False
    planning_delay_ms: float = 25.0
    cost_params: CostModelParams = field(default_factory=CostModelParams)

    def __post_init__(self):
        if self.window_s <= 0:
            raise ValueError("control window must be positive")


@dataclass
class _ReqState:
    req: Request
    label: str = FEASIBLE
    first_token_time: float | None = None
    generated: int = 0

    @property
    def remaining(self) -> int:
        return self.req.output_len - self.generated

    @property
    def context_len(self) -> int:
        return self.req.prompt_len + self.generated

    @property
    def kv_bytes_factor(self) -> int:
        return self.context_len


class _Bucket:
    """Token bucket realizing SLO-compliant serving bandwidth of a group."""

    __slots__ = ("rate", "burst", "level", "last")

    def __init__(self, rate: float, burst: float, now: float):
        self.rate = rate
        self.burst = burst
        self.level = burst
        self.last = now

    def refill(self, now: float):
        if now > self.last:
            self.level = min(self.burst, self.level + self.rate * (now - self.last))
            self.last = now

    def try_take(self, now: float) -> bool:
        self.refill(now)
        if self.level >= 1.0:
            self.level -= 1.0
            return True
        return False


class _GroupState:
    def __init__(self, group: Group, envelope, window_s: float, now: float):
        self.group = group
        self.envelope = envelope
        self.feasible: deque[_ReqState] = deque()
        self.best_effort: deque[_ReqState] = deque()
        self.background: deque[_ReqState] = deque()
        self.running: list[_ReqState] = []
        self.busy = False
        self.paused_until = now
        self.epoch = 0
        if group.stage == PREFILL and envelope is not None:
            self.bucket = _Bucket(envelope.thp, envelope.thp * window_s, now)
        else:
            self.bucket = None

    @property
    def batch_cap(self) -> int:
        if self.group.stage == BACKGROUND or self.envelope is None:
            return _BG_BATCH_CAP
        if self.group.stage == PREFILL:
            return max(1, self.envelope.prefill_batch_cap)
        return max(1, self.envelope.decode_batch_cap)

    @property
    def load(self) -> int:
        return (
            len(self.feasible)
            + len(self.best_effort)
            + len(self.background)
            + len(self.running)
        )

    def queued(self) -> list[_ReqState]:
        out = list(self.feasible) + list(self.best_effort) + list(self.background)
        self.feasible.clear()
        self.best_effort.clear()
        self.background.clear()
        return out

    def queued_view(self) -> list[_ReqState]:
        return (
            list(self.feasible)
            + list(self.best_effort)
            + list(self.background)
            + list(self.running)
        )


def form_batch(state: _GroupState) -> list[_ReqState]:
    """Fill free slots: feasible FCFS, then best-effort, then background."""
    batch = list(state.running)
    for queue in (state.feasible, state.best_effort, state.background):
        while queue and len(batch) < state.batch_cap:
            batch.append(queue.popleft())
    return batch


@dataclass
class WindowLog:
    window_index: int
    time: float
    demands: list[TierDemand]
    changed_groups: int
    pause_ms: float


@dataclass
class RunResult:
    records: list[CompletionRecord]
    window_logs: list[WindowLog]
    arrived: int
    parked: int
    in_flight: int
    migration_count: int
    total_pause_ms: float
    preemptions: int

    def conserved(self) -> bool:
        return self.arrived == len(self.records) + self.in_flight + self.parked


class Simulator:
    def __init__(
        self,
        trace: list[Request],
        tiers: list[SloTier],
        profile: PerfProfile,
        policy,
        config: EngineConfig,
        envelopes: dict,
    ):
        self.trace = sorted(trace, key=lambda r: (r.arrival_time, r.id))
        self.tiers = sorted(tiers, key=lambda t: t.id)
        self.tier_by_id = {t.id: t for t in self.tiers}
        self.profile = profile
        self.policy = policy
        self.config = config
        self.envelopes = envelopes

        self.now = 0.0
        self.events: list = []
        self.seq = 0
        self.cluster: ClusterConfig | None = None
        self.states: dict[Group, _GroupState] = {}
        self.pending: deque[_ReqState] = deque()  # parked, no serving group
        self.records: list[CompletionRecord] = []
        self.window_logs: list[WindowLog] = []
        self.spill_rr = 0
        self.bg_rr = 0
        self.arrived = 0
        self.migration_count = 0
        self.total_pause_ms = 0.0
        self.preemptions = 0
        # per-window accounting
        self.window_arrivals: dict[int, int] = {t.id: 0 for t in self.tiers}
        self.window_served: dict[int, int] = {t.id: 0 for t in self.tiers}

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, prio: int, kind: str, payload):
        heapq.heappush(self.events, (time, prio, self.seq, kind, payload))
        self.seq += 1

    # -- group helpers -------------------------------------------------------

    def _groups(self, stage=None, tier_id=None) -> list[_GroupState]:
        out = []
        for g in self.cluster.groups:
            if stage is not None and g.stage != stage:
                continue
            if tier_id is not None and g.tier_id != tier_id:
                continue
            out.append(self.states[g])
        return out

    def _kv_bytes(self, rs: _ReqState) -> int:
        return (
            rs.context_len
            * self.profile.total_kv_heads
            * self.profile.kv_bytes_per_token_per_head
        )

    # -- dispatch ------------------------------------------------------------

    def dispatch(self, rs: _ReqState):
        tier = self.tier_by_id[rs.req.tier_id]
        if tier.background:
            targets = self._groups(stage=BACKGROUND)
            if not targets:
                self.pending.append(rs)
                return
            state = targets[self.bg_rr % len(targets)]
            self.bg_rr += 1
            state.background.append(rs)
            self._kick(state)
            return

        if rs.first_token_time is not None:
            # already past prefill; goes straight back to a decode group
            state = self._pick_decode_group(tier.id)
            if state is None:
                self.pending.append(rs)
                return
            if rs.label == FEASIBLE:
                state.feasible.append(rs)
            else:
                state.best_effort.append(rs)
            self._kick(state)
            return

        own = self._groups(stage=PREFILL, tier_id=tier.id)
        admitted = None
        if own:
            # feasible if any of the tier's prefill groups has bucket headroom
            for state in own:
                state.bucket.refill(self.now)
            candidates = [s for s in own if s.bucket.level >= 1.0]
            if candidates:
                admitted = min(candidates, key=lambda s: s.load)
                admitted.bucket.level -= 1.0
                rs.label = FEASIBLE
                admitted.feasible.append(rs)
        if admitted is None:
            all_prefill = self._groups(stage=PREFILL)
            if not all_prefill:
                self.pending.append(rs)
                return
            rs.label = BEST_EFFORT
            admitted = all_prefill[self.spill_rr % len(all_prefill)]
            self.spill_rr += 1
            admitted.best_effort.append(rs)
        self._kick(admitted)

    # -- execution -----------------------------------------------------------

    def _kick(self, state: _GroupState):
        """Start the group's next unit of work if it is idle and unpaused."""
        if state.busy or self.now < state.paused_until:
            return
        stage = state.group.stage
        if stage == PREFILL:
            self._start_prefill(state)
        elif stage == DECODE:
            self._start_decode_iter(state)
        else:
            self._start_background(state)

    def _start_prefill(self, state: _GroupState):
        batch = form_batch(state)
        if not batch:
            return
        state.running = batch
        state.busy = True
        # cost scales with total tokens, so the mean prompt length prices the
        # batch; the max would let one long prompt poison the whole batch
        lat = lookup_latency(
            self.profile,
            PREFILL,
            state.group.tp,
            len(batch),
            sum(r.req.prompt_len for r in batch) / len(batch),
        )
        self._push(
            self.now + lat / 1000.0,
            _PRIO_COMPLETION,
            "prefill_done",
            (state, state.epoch),
        )

    def _on_prefill_done(self, state: _GroupState):
        batch = state.running
        state.running = []
        state.busy = False
        for rs in batch:
            rs.first_token_time = self.now
            rs.generated = max(rs.generated, 1)
            handoff_ms = _pipelined_source_ms(self._kv_bytes(rs), self.config.cost_params)
            self._push(
                self.now + handoff_ms / 1000.0,
                _PRIO_COMPLETION,
                "decode_enqueue",
                rs,
            )
        self._kick(state)

    def _pick_decode_group(self, tier_id: int) -> _GroupState | None:
        own = self._groups(stage=DECODE, tier_id=tier_id)
        if own:
            return min(own, key=lambda s: s.load)
        anyg = self._groups(stage=DECODE)
        if anyg:
            return min(anyg, key=lambda s: s.load)
        return None

    def _on_decode_enqueue(self, rs: _ReqState):
        if rs.remaining <= 0:
            self._complete(rs)
            return
        state = self._pick_decode_group(rs.req.tier_id)
        if state is None:
            self.pending.append(rs)
            return
        state.feasible.append(rs) if rs.label == FEASIBLE else state.best_effort.append(rs)
        self._kick(state)

    def _start_decode_iter(self, state: _GroupState):
        batch = form_batch(state)
        if not batch:
            return
        state.running = batch
        state.busy = True
        mean_ctx = sum(r.context_len for r in batch) / len(batch)
        lat = lookup_latency(
            self.profile, DECODE, state.group.tp, len(batch), mean_ctx
        )
        self._push(
            self.now + lat / 1000.0,
            _PRIO_COMPLETION,
            "decode_iter",
            (state, state.epoch),
        )

    def _on_decode_iter(self, state: _GroupState):
        still = []
        for rs in state.running:
            rs.generated += 1
            if rs.remaining <= 0:
                self._complete(rs)
            else:
                still.append(rs)
        state.running = still
        state.busy = False
        self._kick(state)

    def _start_background(self, state: _GroupState):
        batch = form_batch(state)
        if not batch:
            return
        state.running = batch
        state.busy = True
        todo_prefill = [r for r in batch if r.first_token_time is None]
        if todo_prefill:
            lat = lookup_latency(
                self.profile,
                PREFILL,
                state.group.tp,
                len(todo_prefill),
                sum(r.req.prompt_len for r in todo_prefill) / len(todo_prefill),
            )
            self._push(
                self.now + lat / 1000.0,
                _PRIO_COMPLETION,
                "bg_prefill_done",
                (state, state.epoch),
            )
        else:
            self._bg_schedule_iter(state)

    def _bg_schedule_iter(self, state: _GroupState):
        mean_ctx = sum(r.context_len for r in state.running) / len(state.running)
        lat = lookup_latency(
            self.profile, DECODE, state.group.tp, len(state.running), mean_ctx
        )
        self._push(
            self.now + lat / 1000.0,
            _PRIO_COMPLETION,
            "bg_decode_iter",
            (state, state.epoch),
        )

    def _on_bg_prefill_done(self, state: _GroupState):
        for rs in state.running:
            if rs.first_token_time is None:
                rs.first_token_time = self.now
                rs.generated = 1
        done = [r for r in state.running if r.remaining <= 0]
        state.running = [r for r in state.running if r.remaining > 0]
        for rs in done:
            self._complete(rs)
        if state.running:
            self._bg_schedule_iter(state)
        else:
            state.busy = False
            self._kick(state)

    def _on_bg_decode_iter(self, state: _GroupState):
        still = []
        for rs in state.running:
            rs.generated += 1
            if rs.remaining <= 0:
                self._complete(rs)
            else:
                still.append(rs)
        state.running = still
        if state.running:
            self._bg_schedule_iter(state)
        else:
            state.busy = False
            self._kick(state)

    def _complete(self, rs: _ReqState):
        tier = self.tier_by_id[rs.req.tier_id]
        ttft = rs.first_token_time - rs.req.arrival_time
        tpot = (self.now - rs.first_token_time) / max(1, rs.req.output_len - 1)
        slo_met = (
            not tier.background
            and ttft * 1000.0 <= tier.ttft_target_ms
            and tpot * 1000.0 <= tier.tpot_target_ms
        )
        self.records.append(
            CompletionRecord(
                request_id=rs.req.id,
                tier_id=rs.req.tier_id,
                arrival=rs.req.arrival_time,
                first_token_time=rs.first_token_time,
                completion_time=self.now,
                ttft=ttft,
                tpot=tpot,
                slo_met=slo_met,
                label=rs.label,
            )
        )
        if slo_met:
            self.window_served[rs.req.tier_id] = (
                self.window_served.get(rs.req.tier_id, 0) + 1
            )

    # -- reconfiguration -----------------------------------------------------

    def _apply_config(self, new: ClusterConfig):
        """Stop-and-migrate transition from the current config to `new`."""
        old = self.cluster
        old_states = self.states
        prev_by_identity: dict[tuple, _GroupState] = {}
        if old is not None:
            for g in old.groups:
                prev_by_identity[(frozenset(g.gpu_ids), g.tier_id, g.stage, g.tp)] = (
                    old_states[g]
                )

        self.cluster = new
        self.states = {}
        displaced: list[_ReqState] = []  # queued/prefilling; re-dispatched now
        migrating: list[tuple[_GroupState, _ReqState]] = []  # decode in-flight
        matched: set[int] = set()

        for g in new.groups:
            key = (frozenset(g.gpu_ids), g.tier_id, g.stage, g.tp)
            prev = prev_by_identity.get(key)
            if prev is not None and id(prev) not in matched:
                matched.add(id(prev))
                prev.group = g
                self.states[g] = prev
            else:
                env = self.envelopes.get((g.tier_id, g.tp))
                self.states[g] = _GroupState(g, env, self.config.window_s, self.now)

        if old is not None:
            for g in old.groups:
                prev = old_states[g]
                if id(prev) in matched:
                    continue
                prev.epoch += 1  # cancels this group's pending events
                displaced.extend(prev.queued())
                for rs in prev.running:
                    if g.stage == DECODE or (
                        g.stage == BACKGROUND and rs.first_token_time is not None
                    ):
                        migrating.append((prev, rs))
                    else:
                        displaced.append(rs)  # prefill restarts from scratch
                prev.running = []
                prev.busy = False

        # route migrating decode requests and accumulate per-destination bytes
        incoming: dict[int, list[tuple[_GroupState, _ReqState]]] = {}
        for src_state, rs in migrating:
            dst = self._pick_decode_group(rs.req.tier_id)
            if dst is None:
                self.pending.append(rs)
                continue
            incoming.setdefault(id(dst), []).append((src_state, rs))

        pause_total = 0.0
        changed_new = [
            s
            for s in self.states.values()
            if id(s) not in matched and s.group.stage != BACKGROUND
        ]
        # matched groups that receive migrated requests also pause for the
        # incoming KV transfer, but pay no reconfiguration fixed cost
        touched = list(changed_new)
        changed_ids = {id(s) for s in changed_new}
        for state in self.states.values():
            if id(state) not in changed_ids and id(state) in incoming:
                touched.append(state)
        for state in touched if old is not None else []:
            arrivals = incoming.pop(id(state), [])
            transfers = []
            for src_state, rs in arrivals:
                old_layout = KvLayout(
                    group=src_state.group.gpu_ids,
                    tp=src_state.group.tp,
                    total_heads=self.profile.total_kv_heads,
                    requests=((rs.req.id, rs.context_len),),
                )
                new_layout = KvLayout(
                    group=state.group.gpu_ids,
                    tp=state.group.tp,
                    total_heads=self.profile.total_kv_heads,
                    requests=((rs.req.id, rs.context_len),),
                )
                transfers.extend(
                    head_transfers(
                        old_layout,
                        new_layout,
                        self.profile.kv_bytes_per_token_per_head,
                    )
                )
            plan = MigrationPlan(transfers=transfers)
            if id(state) in changed_ids:
                cost_ms = switch_cost(
                    self.config.switch_mode, plan, self.config.cost_params
                )
                cost_ms += self.config.planning_delay_ms
            else:
                cost_ms = switch_cost(WARM, plan, self.config.cost_params)
            if transfers:
                self.migration_count += 1
            if self.config.kv_accounting:
                arrivals = self._enforce_kv_capacity(state, arrivals)
            for _, rs in arrivals:
                if rs.label == FEASIBLE:
                    state.feasible.append(rs)
                else:
                    state.best_effort.append(rs)
            state.paused_until = self.now + cost_ms / 1000.0
            pause_total = max(pause_total, cost_ms)
            self._push(state.paused_until, _PRIO_COMPLETION, "resume", (state, state.epoch))

        self.total_pause_ms += pause_total

        # waiting requests re-enter dispatch immediately (metadata-only move)
        while self.pending:
            displaced.append(self.pending.popleft())
        for rs in sorted(displaced, key=lambda r: (r.req.arrival_time, r.req.id)):
            self.dispatch(rs)

        for state in self.states.values():
            self._kick(state)
        return len(changed_new), pause_total

    def _enforce_kv_capacity(self, state: _GroupState, arrivals):
        budget_bytes = (
            (self.profile.gpu_memory_gb - self.profile.weight_full_copy_gb)
            * 1e9
            * state.group.tp
        )
        kept = []
        used = sum(self._kv_bytes(r) for r in state.running)
        # most-recent best-effort requests are evicted first
        ordered = sorted(
            arrivals, key=lambda p: (p[1].label == BEST_EFFORT, p[1].req.arrival_time)
        )
        for pair in ordered:
            need = self._kv_bytes(pair[1])
            if used + need > budget_bytes and pair[1].label == BEST_EFFORT:
                pair[1].generated = 0
                pair[1].first_token_time = None
                self.pending.append(pair[1])
                self.preemptions += 1
            else:
                used += need
                kept.append(pair)
        return kept

    def _on_reconfig(self, window_index: int):
        window = self.config.window_s
        # all incomplete work counts as demand, not just the window's
        # arrivals: dropping capacity while requests sit queued or in flight
        # would oscillate between all-background and full configs
        backlog: dict[int, int] = {}
        for rs in self.pending:
            backlog[rs.req.tier_id] = backlog.get(rs.req.tier_id, 0) + 1
        for state in self.states.values():
            for rs in state.queued_view():
                backlog[rs.req.tier_id] = backlog.get(rs.req.tier_id, 0) + 1
        demands = []
        for t in self.tiers:
            # parked requests count as demand again so the planner can react
            n = self.window_arrivals.get(t.id, 0) + backlog.get(t.id, 0)
            served = self.window_served.get(t.id, 0)
            demands.append(
                TierDemand(
                    tier_id=t.id,
                    rps_observed=n / window,
                    served_rps=served / window,
                )
            )
        self.window_arrivals = {t.id: 0 for t in self.tiers}
        self.window_served = {t.id: 0 for t in self.tiers}

        new = self.policy.plan(window_index, demands, self.cluster)
        changed, pause = self._apply_config(new)
        self.window_logs.append(
            WindowLog(
                window_index=window_index,
                time=self.now,
                demands=demands,
                changed_groups=changed,
                pause_ms=pause,
            )
        )
        if self._work_remains():
            self._push(
                self.now + window, _PRIO_RECONFIG, "reconfig", window_index + 1
            )

    def _work_remains(self) -> bool:
        # pending alone does not count: those requests were just re-dispatched
        # under a plan that already saw them as demand and still failed to
        # place them, so further ticks with identical inputs cannot help
        for e in self.events:
            if e[3] in ("arrival", "prefill_done", "decode_iter", "decode_enqueue",
                        "bg_prefill_done", "bg_decode_iter"):
                return True
        for state in self.states.values():
            if state.load > 0:
                return True
        return False

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        initial_demands = [TierDemand(tier_id=t.id) for t in self.tiers]
        self.cluster = None
        first = self.policy.plan(0, initial_demands, None)
        self._apply_config(first)

        for r in self.trace:
            self._push(r.arrival_time, _PRIO_ARRIVAL, "arrival", r)
        self._push(self.config.window_s, _PRIO_RECONFIG, "reconfig", 1)

        while self.events:
            time, prio, _, kind, payload = heapq.heappop(self.events)
            assert time >= self.now - 1e-12
            self.now = max(self.now, time)
            if kind == "arrival":
                self.arrived += 1
                self.window_arrivals[payload.tier_id] = (
                    self.window_arrivals.get(payload.tier_id, 0) + 1
                )
                self.dispatch(_ReqState(payload))
            elif kind == "reconfig":
                self._on_reconfig(payload)
            elif kind == "decode_enqueue":
                self._on_decode_enqueue(payload)
            elif kind == "resume":
                state, epoch = payload
                if state.epoch == epoch:
                    self._kick(state)
            else:
                state, epoch = payload
                if state.epoch != epoch:
                    continue
                if kind == "prefill_done":
                    self._on_prefill_done(state)
                elif kind == "decode_iter":
                    self._on_decode_iter(state)
                elif kind == "bg_prefill_done":
                    self._on_bg_prefill_done(state)
                elif kind == "bg_decode_iter":
                    self._on_bg_decode_iter(state)

        in_flight = sum(s.load for s in self.states.values())
        return RunResult(
            records=self.records,
            window_logs=self.window_logs,
            arrived=self.arrived,
            parked=len(self.pending),
            in_flight=in_flight,
            migration_count=self.migration_count,
            total_pause_ms=self.total_pause_ms,
            preemptions=self.preemptions,
        )


def run(
    trace: list[Request],
    tiers: list[SloTier],
    profile: PerfProfile,
    policy,
    config: EngineConfig,
    envelopes: dict,
) -> RunResult:
    return Simulator(trace, tiers, profile, policy, config, envelopes).run()
