#!/usr/bin/env python3
"""Compare the three KV-migration cost models over a range of payload sizes.

Usage: python3 scripts/migration_latency.py [--sizes-gb 0.5,1,2,5]
"""

import argparse

from tpsim.migration import (
    CostModelParams,
    MigrationPlan,
    Transfer,
    latency_aggregate,
    latency_per_page,
    latency_pipelined,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes-gb", default="0.5,1,2,5")
    ap.add_argument("--link-bw", type=float, default=None, help="GB/s override")
    args = ap.parse_args()

    params = CostModelParams()
    if args.link_bw:
        params = CostModelParams(link_bw_gbps=args.link_bw)

    print(
        f"{'payload_gb':>10} {'per_page_ms':>12} {'aggregate_ms':>13} "
        f"{'pipelined_ms':>13} {'speedup':>8}"
    )
    for gb in (float(v) for v in args.sizes_gb.split(",")):
        plan = MigrationPlan(
            transfers=[Transfer(src_gpu=1, dst_gpu=2, request_id=0,
                                head_lo=0, head_hi=1, bytes=int(gb * 1e9))]
        )
        per_page = latency_per_page(plan, params)
        aggregate = latency_aggregate(plan, params)
        pipelined = latency_pipelined(plan, params)
        print(
            f"{gb:>10g} {per_page:>12.1f} {aggregate:>13.2f} "
            f"{pipelined:>13.2f} {per_page / pipelined:>7.0f}x"
        )


if __name__ == "__main__":
    main()
