"""Offline prefill/decode latency tables and SLO-constrained throughput envelopes."""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field

from .trace import SloTier

PREFILL = "prefill"
DECODE = "decode"
STAGES = (PREFILL, DECODE)


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class PerfProfile:
    """Latency table keyed by (stage, tp, batch, seq_len), plus model geometry.

    The table is the sole source of execution timing in the simulator. For a
    fixed (stage, tp, seq_len) latency must be non-decreasing in batch.
    """

    gpu_type: str
    model_name: str
    tp_levels: tuple[int, ...]
    entries: dict  # (stage, tp, batch, seq_len) -> latency_ms
    weight_full_copy_gb: float
    kv_bytes_per_token_per_head: int
    total_kv_heads: int
    gpu_memory_gb: float
    # per-(stage, tp) sorted grid axes, built on construction
    _grids: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for tp in self.tp_levels:
            if self.total_kv_heads % tp != 0:
                raise ProfileError(
                    f"total_kv_heads={self.total_kv_heads} not divisible by tp={tp}"
                )
        grids = {}
        for (stage, tp, batch, seq), _ in self.entries.items():
            key = (stage, tp)
            batches, seqs = grids.setdefault(key, (set(), set()))
            batches.add(batch)
            seqs.add(seq)
        for tp in self.tp_levels:
            for stage in STAGES:
                if (stage, tp) not in grids:
                    raise ProfileError(f"no {stage} entries for tp={tp}")
        object.__setattr__(
            self,
            "_grids",
            {k: (sorted(b), sorted(s)) for k, (b, s) in grids.items()},
        )
        self._check_monotone()

    def _check_monotone(self):
        for (stage, tp), (batches, seqs) in self._grids.items():
            for seq in seqs:
                prev = -math.inf
                for b in batches:
                    lat = self.entries.get((stage, tp, b, seq))
                    if lat is None:
                        continue
                    if lat < prev:
                        raise ProfileError(
                            f"latency not non-decreasing in batch at "
                            f"({stage}, tp={tp}, seq={seq}, batch={b})"
                        )
                    prev = lat

    def grid(self, stage: str, tp: int) -> tuple[list[int], list[int]]:
        if stage not in STAGES:
            raise ProfileError(f"unknown stage {stage!r}")
        if tp not in self.tp_levels:
            raise ProfileError(f"unknown tp level {tp}")
        return self._grids[(stage, tp)]


@dataclass(frozen=True)
class ThroughputEnvelope:
    """Max SLO-compliant prefill/decode rates per TP group for one tier."""

    tier_id: int
    tp: int
    thp: float  # requests/s per prefill group
    thd: float  # requests/s per decode group
    prefill_batch_cap: int
    decode_batch_cap: int

    @property
    def feasible(self) -> bool:
        return self.thp > 0 and self.thd > 0


def _bracket(axis: list, x: float) -> tuple[int, int, float]:
    """Indices of bracketing grid values and the log-space mixing weight."""
    if x <= axis[0]:
        return 0, 0, 0.0
    if x >= axis[-1]:
        return len(axis) - 1, len(axis) - 1, 0.0
    hi = bisect_left(axis, x)
    lo = hi - 1
    if axis[hi] == x:
        return hi, hi, 0.0
    w = (math.log(x) - math.log(axis[lo])) / (math.log(axis[hi]) - math.log(axis[lo]))
    return lo, hi, w


def lookup_latency_ex(
    profile: PerfProfile, stage: str, tp: int, batch: float, seq_len: float
) -> tuple[float, bool]:
    """Latency in ms plus a flag set when the query fell outside the grid.

    Exact grid keys return the stored value; interior points use bilinear
    interpolation in (log batch, log seq_len); points outside the grid clamp to
    the nearest edge.
    """
    if batch < 1 or seq_len < 1:
        raise ProfileError("batch and seq_len must be >= 1")
    batches, seqs = profile.grid(stage, tp)
    b0, b1, wb = _bracket(batches, batch)
    s0, s1, ws = _bracket(seqs, seq_len)
    extrapolated = not (batches[0] <= batch <= batches[-1]) or not (
        seqs[0] <= seq_len <= seqs[-1]
    )

    def at(bi, si):
        return profile.entries[(stage, tp, batches[bi], seqs[si])]

    lo = at(b0, s0) * (1 - ws) + at(b0, s1) * ws
    hi = at(b1, s0) * (1 - ws) + at(b1, s1) * ws
    return lo * (1 - wb) + hi * wb, extrapolated


def lookup_latency(
    profile: PerfProfile, stage: str, tp: int, batch: float, seq_len: float
) -> float:
    return lookup_latency_ex(profile, stage, tp, batch, seq_len)[0]


def derive_envelope(
    profile: PerfProfile,
    tier: SloTier,
    tp: int,
    avg_prompt_len: float,
    avg_output_len: float,
    headroom: float = 1.0,
) -> ThroughputEnvelope:
    """SLO-compliant throughput bounds for one (tier, tp) pair.

    The prefill cap is the largest profiled batch whose prefill latency fits
    the TTFT target; the decode cap is the largest batch whose iteration
    latency (at mid-generation context) fits the TPOT target. Infeasible SLOs
    yield a zero-rate envelope rather than an error.
    """
    if tier.background:
        raise ProfileError("envelopes are undefined for background tiers")
    avg_prompt_len = max(1.0, avg_prompt_len)
    avg_output_len = max(1.0, avg_output_len)

    batches_p, _ = profile.grid(PREFILL, tp)
    prefill_cap, thp = 0, 0.0
    for b in batches_p:
        lat = lookup_latency(profile, PREFILL, tp, b, avg_prompt_len)
        if lat <= headroom * tier.ttft_target_ms:
            prefill_cap = b
            thp = b / (lat / 1000.0)

    decode_ctx = avg_prompt_len + avg_output_len / 2.0
    batches_d, _ = profile.grid(DECODE, tp)
    decode_cap, thd = 0, 0.0
    for b in batches_d:
        lat = lookup_latency(profile, DECODE, tp, b, decode_ctx)
        if lat <= headroom * tier.tpot_target_ms:
            decode_cap = b
            thd = b / (avg_output_len * lat / 1000.0)

    return ThroughputEnvelope(
        tier_id=tier.id,
        tp=tp,
        thp=thp,
        thd=thd,
        prefill_batch_cap=prefill_cap,
        decode_batch_cap=decode_cap,
    )


def derive_slos(
    profile: PerfProfile,
    tp_min: int | None = None,
    avg_prompt_len: float = 1024,
    strict_batch: int = 1,
    relaxed_batch: int = 128,
    scale: float = 1.0,
) -> tuple[SloTier, SloTier]:
    """Derive a strict and a relaxed tier from single-batch vs. high-batch latency."""
    if scale <= 0:
        raise ProfileError("scale must be positive")
    if tp_min is None:
        tp_min = min(profile.tp_levels)

    def targets(batch):
        ttft = lookup_latency(profile, PREFILL, tp_min, batch, avg_prompt_len)
        tpot = lookup_latency(profile, DECODE, tp_min, batch, avg_prompt_len)
        return ttft * scale, tpot * scale

    ttft_s, tpot_s = targets(strict_batch)
    ttft_r, tpot_r = targets(relaxed_batch)
    strict = SloTier(id=0, name="strict", ttft_target_ms=ttft_s, tpot_target_ms=tpot_s)
    relaxed = SloTier(id=1, name="relaxed", ttft_target_ms=ttft_r, tpot_target_ms=tpot_r)
    return strict, relaxed


def load_profile(path) -> PerfProfile:
    with open(path) as f:
        doc = json.load(f)
    meta = doc["metadata"]
    entries = {}
    for stage, tp, batch, seq, lat in doc["entries"]:
        entries[(stage, int(tp), int(batch), int(seq))] = float(lat)
    return PerfProfile(
        gpu_type=meta["gpu_type"],
        model_name=meta["model_name"],
        tp_levels=tuple(meta["tp_levels"]),
        entries=entries,
        weight_full_copy_gb=meta["weight_full_copy_gb"],
        kv_bytes_per_token_per_head=meta["kv_bytes_per_token_per_head"],
        total_kv_heads=meta["total_kv_heads"],
        gpu_memory_gb=meta["gpu_memory_gb"],
    )


def save_profile(profile: PerfProfile, path) -> None:
    doc = {
        "metadata": {
            "gpu_type": profile.gpu_type,
            "model_name": profile.model_name,
            "tp_levels": list(profile.tp_levels),
            "weight_full_copy_gb": profile.weight_full_copy_gb,
            "kv_bytes_per_token_per_head": profile.kv_bytes_per_token_per_head,
            "total_kv_heads": profile.total_kv_heads,
            "gpu_memory_gb": profile.gpu_memory_gb,
        },
        "entries": [
            [stage, tp, batch, seq, lat]
            for (stage, tp, batch, seq), lat in sorted(profile.entries.items())
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


# ---------------------------------------------------------------------------
# Bundled synthetic profiles. Shapes chosen so that higher TP strictly lowers
# prefill latency, while per-GPU-normalized decode throughput is higher at
# high TP for small batches and lower for large batches (weight-load savings
# vs. growing collective-communication cost).

_GRID_BATCHES = (1, 2, 4, 8, 16, 32, 64, 128)
_GRID_SEQS = (64, 256, 1024, 4096)


def _synth_entries(tp_levels, scale):
    p_fixed = 2.0 * scale
    c_p = 0.117 * scale  # ms per (batch x token) of prefill compute at TP1
    p_comm = 0.2 * scale
    w_load = 12.0 * scale  # per-iteration weight-read time at TP1, ms
    c_kv = 2.0e-4 * scale  # ms per (batch x token) of KV reads at TP1
    d_comm = 0.15 * scale

    entries = {}
    for tp in tp_levels:
        cache_gain = 1.0 + 0.35 * math.log2(tp)
        for b in _GRID_BATCHES:
            for s in _GRID_SEQS:
                entries[(PREFILL, tp, b, s)] = (
                    p_fixed + c_p * b * s / tp + p_comm * math.log2(tp)
                )
                entries[(DECODE, tp, b, s)] = (
                    w_load / (tp * cache_gain)
                    + c_kv * b * s / tp
                    + d_comm * math.log2(tp) * (1.0 + 0.3 * b)
                )
    return entries


def bundled_profile(name: str) -> PerfProfile:
    """Synthetic 'a100-like' or 'h100-like' profile for desk-scale experiments."""
    if name == "a100-like":
        scale, gpu = 1.0, "a100"
    elif name == "h100-like":
        scale, gpu = 0.55, "h100"
    else:
        raise ProfileError(f"unknown bundled profile {name!r}")
    tp_levels = (1, 2, 4, 8)
    return PerfProfile(
        gpu_type=gpu,
        model_name="synthetic-13b",
        tp_levels=tp_levels,
        entries=_synth_entries(tp_levels, scale),
        weight_full_copy_gb=26.0,
        kv_bytes_per_token_per_head=4096,
        total_kv_heads=32,
        gpu_memory_gb=80.0,
    )
