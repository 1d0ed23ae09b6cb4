"""Bundled desk-scale scenarios: tier sets and synthetic traces for experiments.

The two-phase scenario is built so that no single static TP setting wins both
phases. Phase A is a high-rate relaxed tier with short prompts and long
outputs: decode-bound work where TP1 has the best per-GPU decode throughput.
Phase B is a lower-rate strict tier with long prompts whose TTFT target is
only reachable at TP >= 2.
"""

from __future__ import annotations

from .trace import BurstInterval, LengthDist, SloTier, SyntheticSpec, TierLoad

STRICT_TIER = SloTier(id=0, name="strict", ttft_target_ms=250.0, tpot_target_ms=25.0)
RELAXED_TIER = SloTier(
    id=1, name="relaxed", ttft_target_ms=2000.0, tpot_target_ms=40.0
)
BACKGROUND_TIER = SloTier(id=2, name="batch", background=True)

TWO_PHASE_TIERS = [STRICT_TIER, RELAXED_TIER]

# workload averages used for envelope derivation in the bundled scenarios
AVG_PROMPT_LEN = 1024.0
AVG_OUTPUT_LEN = 160.0

# per-tier (avg_prompt_len, avg_output_len); the strict tier's long prompts
# drive its TTFT feasibility and must not be averaged away
TIER_WORKLOAD = {
    STRICT_TIER.id: (2048.0, 64.0),
    RELAXED_TIER.id: (256.0, 192.0),
}

# envelope headroom: batch caps must leave room for queueing delay on top of
# the raw batch latency
HEADROOM = 0.7


def two_phase_spec(seed: int = 7, duration: float = 120.0) -> SyntheticSpec:
    """Phase A: relaxed flood. Phase B: strict long-prompt burst."""
    split = duration * 0.25
    relaxed = TierLoad(
        tier_id=RELAXED_TIER.id,
        base_rps=80.0,
        prompt_dist=LengthDist(median=256, sigma=0.25, max_len=768),
        output_dist=LengthDist(median=192, sigma=0.2, max_len=384),
        bursts=(BurstInterval(split, duration, 0.0),),
    )
    strict = TierLoad(
        tier_id=STRICT_TIER.id,
        base_rps=0.05,
        prompt_dist=LengthDist(median=2048, sigma=0.1, max_len=2560),
        output_dist=LengthDist(median=64, sigma=0.3, max_len=256),
        bursts=(BurstInterval(split + 10.0, duration, 140.0),),
    )
    return SyntheticSpec(duration=duration, tiers=(relaxed, strict), seed=seed)


def bursty_spec(seed: int = 11, duration: float = 120.0) -> SyntheticSpec:
    """Micro-bursts alternating between the two tiers every ~15 s."""
    relaxed_bursts = []
    strict_bursts = []
    t = 0.0
    while t + 15.0 <= duration:
        if int(t / 15.0) % 2 == 0:
            relaxed_bursts.append(BurstInterval(t, t + 15.0, 1.0))
            strict_bursts.append(BurstInterval(t, t + 15.0, 1.0))
        else:
            relaxed_bursts.append(BurstInterval(t, t + 15.0, 0.1))
            strict_bursts.append(BurstInterval(t, t + 15.0, 40.0))
        t += 15.0
    relaxed = TierLoad(
        tier_id=RELAXED_TIER.id,
        base_rps=45.0,
        prompt_dist=LengthDist(median=256, sigma=0.25, max_len=768),
        output_dist=LengthDist(median=256, sigma=0.2, max_len=512),
        bursts=tuple(relaxed_bursts),
    )
    strict = TierLoad(
        tier_id=STRICT_TIER.id,
        base_rps=0.3,
        prompt_dist=LengthDist(median=2048, sigma=0.1, max_len=2560),
        output_dist=LengthDist(median=64, sigma=0.3, max_len=256),
        bursts=tuple(strict_bursts),
    )
    return SyntheticSpec(duration=duration, tiers=(relaxed, strict), seed=seed)
