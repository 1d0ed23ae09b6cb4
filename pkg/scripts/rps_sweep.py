#!/usr/bin/env python3
"""Scale the scenario arrival rates and compare adaptive vs static serving.

Usage: python3 scripts/rps_sweep.py [--scales 0.5,0.75,1.0,1.25]
"""

import argparse
from dataclasses import replace

from tpsim.engine import EngineConfig, run
from tpsim.policy import DynamicPolicy, StaticPolicy, make_envelopes, static_config
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
    ap.add_argument("--scales", default="0.5,0.75,1.0,1.25")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--duration", type=float, default=120.0)
    args = ap.parse_args()

    profile = bundled_profile("a100-like")
    envelopes = make_envelopes(
        profile, TWO_PHASE_TIERS, AVG_PROMPT_LEN, AVG_OUTPUT_LEN, HEADROOM,
        per_tier=TIER_WORKLOAD,
    )
    dynamic = DynamicPolicy(envelopes, TWO_PHASE_TIERS, POOL)
    static1 = StaticPolicy(
        static_config(envelopes, TWO_PHASE_TIERS, POOL, 1), "static-tp1"
    )

    print(f"{'rps_scale':>9} {'dynamic':>8} {'static_tp1':>11} {'ratio':>6}")
    for scale in (float(v) for v in args.scales.split(",")):
        spec = two_phase_spec(seed=args.seed, duration=args.duration)
        loads = tuple(replace(t, base_rps=t.base_rps * scale) for t in spec.tiers)
        trace = generate_trace(replace(spec, tiers=loads))
        goods = {}
        for policy in (dynamic, static1):
            result = run(
                trace, TWO_PHASE_TIERS, profile, policy, EngineConfig(), envelopes
            )
            goods[policy.name] = sum(1 for r in result.records if r.slo_met)
        ratio = goods["dynamic"] / goods["static-tp1"] if goods["static-tp1"] else float("inf")
        print(
            f"{scale:>9g} {goods['dynamic']:>8} {goods['static-tp1']:>11} {ratio:>6.2f}"
        )


if __name__ == "__main__":
    main()
