#!/usr/bin/env python3
"""Sweep the control-window length for the adaptive policy.

Reproduces the sensitivity shape: goodput peaks around 0.5-1 s windows and is
flat within a few percent across 0.5-2 s.

Usage: python3 scripts/window_sweep.py [--windows 0.1,0.5,1,2,5]
"""

import argparse

from tpsim.engine import EngineConfig, run
from tpsim.policy import DynamicPolicy, make_envelopes
from tpsim.profile import bundled_profile
from tpsim.scenarios import (
    AVG_OUTPUT_LEN,
    AVG_PROMPT_LEN,
    HEADROOM,
    TIER_WORKLOAD,
    TWO_PHASE_TIERS,
    two_phase_spec,
)
from tpsim.trace import generate_trace

POOL = 8


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--windows", default="0.1,0.5,1,2,5")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--duration", type=float, default=120.0)
    args = ap.parse_args()

    profile = bundled_profile("a100-like")
    trace = generate_trace(two_phase_spec(seed=args.seed, duration=args.duration))
    envelopes = make_envelopes(
        profile, TWO_PHASE_TIERS, AVG_PROMPT_LEN, AVG_OUTPUT_LEN, HEADROOM,
        per_tier=TIER_WORKLOAD,
    )
    policy = DynamicPolicy(envelopes, TWO_PHASE_TIERS, POOL)

    print(f"{'window_s':>8} {'goodput':>8} {'migrations':>11} {'pause_ms':>9}")
    results = {}
    for w in (float(v) for v in args.windows.split(",")):
        result = run(
            trace, TWO_PHASE_TIERS, profile, policy,
            EngineConfig(window_s=w), envelopes,
        )
        good = sum(1 for r in result.records if r.slo_met)
        results[w] = good
        print(f"{w:>8g} {good:>8} {result.migration_count:>11} {result.total_pause_ms:>9.1f}")

    peak = max(results, key=results.get)
    print(f"\npeak goodput at window {peak:g} s")


if __name__ == "__main__":
    main()
