#!/usr/bin/env python3
"""Run the bundled two-phase scenario under every policy and tabulate goodput.

Usage: python3 scripts/compare_policies.py [--seed 7] [--duration 120] [--out DIR]
"""

import argparse
import csv
import os

from tpsim.engine import EngineConfig, run
from tpsim.metrics import compare, report_from_run
from tpsim.policy import (
    DynamicPolicy,
    OraclePolicy,
    StaticPolicy,
    make_envelopes,
    split_policy,
    static_config,
)
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
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--duration", type=float, default=120.0)
    ap.add_argument("--out", default=None, help="directory for summary CSV")
    ap.add_argument("--switch-mode", default="warm",
                    choices=["warm", "naive_reload", "naive_kernel_init"])
    args = ap.parse_args()

    profile = bundled_profile("a100-like")
    trace = generate_trace(two_phase_spec(seed=args.seed, duration=args.duration))
    envelopes = make_envelopes(
        profile, TWO_PHASE_TIERS, AVG_PROMPT_LEN, AVG_OUTPUT_LEN, HEADROOM,
        per_tier=TIER_WORKLOAD,
    )
    policies = [
        DynamicPolicy(envelopes, TWO_PHASE_TIERS, POOL),
        StaticPolicy(static_config(envelopes, TWO_PHASE_TIERS, POOL, 1), "static-tp1"),
        StaticPolicy(static_config(envelopes, TWO_PHASE_TIERS, POOL, 2), "static-tp2"),
        split_policy(envelopes, TWO_PHASE_TIERS, POOL),
        OraclePolicy(envelopes, TWO_PHASE_TIERS, POOL, trace, 1.0),
    ]

    reports = []
    engine = EngineConfig(switch_mode=args.switch_mode)
    for policy in policies:
        result = run(trace, TWO_PHASE_TIERS, profile, policy, engine, envelopes)
        rep = report_from_run(result, TWO_PHASE_TIERS, name=policy.name,
                              duration_s=args.duration)
        reports.append(rep)
        assert result.conserved(), f"{policy.name}: request conservation violated"

    rows = compare(reports, baseline="static-tp1")
    header = f"{'policy':<12} {'goodput':>8} {'attain':>7} {'vs tp1':>7} {'migr':>5} {'pause_ms':>9}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(
            f"{r['name']:<12} {r['aggregate_goodput']:>8.2f} "
            f"{r['attainment']:>7.1%} {r['goodput_vs_baseline']:>7.2f} "
            f"{r['migrations']:>5} {r['pause_ms']:>9.1f}"
        )

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "policy_comparison.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        print(f"\nwrote {path}")


if __name__ == "__main__":
    main()
