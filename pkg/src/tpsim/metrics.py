"""Goodput timelines, SLO attainment, latency percentiles, and policy comparison."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field


class MetricsError(ValueError):
    pass


@dataclass
class TierStats:
    tier_id: int
    completed: int = 0
    slo_met: int = 0
    goodput_rps: float = 0.0
    p50_ttft: float | None = None
    p90_ttft: float | None = None
    p99_ttft: float | None = None
    p50_tpot: float | None = None
    p90_tpot: float | None = None
    p99_tpot: float | None = None


@dataclass
class MetricsReport:
    name: str
    duration_s: float
    goodput_series: list[float]  # per-bucket, requests/s meeting both SLOs
    background_series: list[float]  # background completions/s (never goodput)
    aggregate_goodput: float
    attainment: float  # slo_met / non-background completions
    per_tier: dict[int, TierStats] = field(default_factory=dict)
    migration_count: int = 0
    total_pause_ms: float = 0.0
    preemptions: int = 0


def percentile(series, q: float):
    """Nearest-rank percentile; None on an empty series."""
    if not series:
        return None
    data = sorted(series)
    rank = max(1, math.ceil(q / 100.0 * len(data)))
    return data[rank - 1]


def goodput(
    records,
    tiers,
    bucket_s: float = 1.0,
    name: str = "run",
    duration_s: float | None = None,
) -> MetricsReport:
    """Bucket SLO-compliant completions by completion time.

    A record counts iff its TTFT and TPOT both meet its tier's targets;
    background-tier completions go to a separate throughput series.
    """
    if bucket_s <= 0:
        raise MetricsError("bucket must be positive")
    background_ids = {t.id for t in tiers if t.background}
    if duration_s is None:
        duration_s = max((r.completion_time for r in records), default=0.0)
    n_buckets = max(1, math.ceil(duration_s / bucket_s)) if duration_s > 0 else 1
    series = [0.0] * n_buckets
    bg_series = [0.0] * n_buckets

    per_tier: dict[int, TierStats] = {t.id: TierStats(tier_id=t.id) for t in tiers}
    ttfts: dict[int, list[float]] = {t.id: [] for t in tiers}
    tpots: dict[int, list[float]] = {t.id: [] for t in tiers}
    met_total = 0
    fg_total = 0
    for r in records:
        b = min(n_buckets - 1, int(r.completion_time / bucket_s))
        stats = per_tier.setdefault(r.tier_id, TierStats(tier_id=r.tier_id))
        stats.completed += 1
        ttfts.setdefault(r.tier_id, []).append(r.ttft)
        tpots.setdefault(r.tier_id, []).append(r.tpot)
        if r.tier_id in background_ids:
            bg_series[b] += 1
        else:
            fg_total += 1
            if r.slo_met:
                series[b] += 1
                stats.slo_met += 1
                met_total += 1

    scale = 1.0 / bucket_s
    series = [x * scale for x in series]
    bg_series = [x * scale for x in bg_series]

    for tid, stats in per_tier.items():
        stats.goodput_rps = stats.slo_met / duration_s if duration_s > 0 else 0.0
        stats.p50_ttft = percentile(ttfts.get(tid, []), 50)
        stats.p90_ttft = percentile(ttfts.get(tid, []), 90)
        stats.p99_ttft = percentile(ttfts.get(tid, []), 99)
        stats.p50_tpot = percentile(tpots.get(tid, []), 50)
        stats.p90_tpot = percentile(tpots.get(tid, []), 90)
        stats.p99_tpot = percentile(tpots.get(tid, []), 99)

    return MetricsReport(
        name=name,
        duration_s=duration_s,
        goodput_series=series,
        background_series=bg_series,
        aggregate_goodput=met_total / duration_s if duration_s > 0 else 0.0,
        attainment=met_total / fg_total if fg_total else 0.0,
        per_tier=per_tier,
    )


def report_from_run(result, tiers, bucket_s: float = 1.0, name: str = "run",
                    duration_s: float | None = None) -> MetricsReport:
    rep = goodput(result.records, tiers, bucket_s, name, duration_s)
    rep.migration_count = result.migration_count
    rep.total_pause_ms = result.total_pause_ms
    rep.preemptions = result.preemptions
    return rep


def compare(reports: list[MetricsReport], baseline: str | None = None) -> list[dict]:
    """Per-policy summary rows with ratios against a designated baseline."""
    if not reports:
        raise MetricsError("no reports to compare")
    if baseline is None:
        baseline = reports[0].name
    base = next((r for r in reports if r.name == baseline), None)
    if base is None:
        raise MetricsError(f"baseline {baseline!r} not among reports")
    rows = []
    for rep in reports:
        ratio = (
            rep.aggregate_goodput / base.aggregate_goodput
            if base.aggregate_goodput > 0
            else (1.0 if rep.aggregate_goodput == base.aggregate_goodput else math.inf)
        )
        rows.append(
            {
                "name": rep.name,
                "aggregate_goodput": rep.aggregate_goodput,
                "attainment": rep.attainment,
                "goodput_vs_baseline": ratio,
                "migrations": rep.migration_count,
                "pause_ms": rep.total_pause_ms,
            }
        )
    return rows


def write_series_csv(reports: list[MetricsReport], path, bucket_s: float = 1.0):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "bucket_start_s", "goodput_rps", "background_rps"])
        for rep in reports:
            for i, (g, bg) in enumerate(
                zip(rep.goodput_series, rep.background_series)
            ):
                w.writerow([rep.name, i * bucket_s, g, bg])


def summary_dict(rep: MetricsReport) -> dict:
    return {
        "name": rep.name,
        "duration_s": rep.duration_s,
        "aggregate_goodput": rep.aggregate_goodput,
        "attainment": rep.attainment,
        "migrations": rep.migration_count,
        "pause_ms": rep.total_pause_ms,
        "preemptions": rep.preemptions,
        "tiers": {
            str(tid): {
                "completed": s.completed,
                "slo_met": s.slo_met,
                "goodput_rps": s.goodput_rps,
                "p50_ttft_s": s.p50_ttft,
                "p90_ttft_s": s.p90_ttft,
                "p99_ttft_s": s.p99_ttft,
                "p50_tpot_s": s.p50_tpot,
                "p90_tpot_s": s.p90_tpot,
                "p99_tpot_s": s.p99_tpot,
            }
            for tid, s in sorted(rep.per_tier.items())
        },
    }


def write_summary(rep: MetricsReport, path):
    with open(path, "w") as f:
        json.dump(summary_dict(rep), f, indent=1)


def write_records_jsonl(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "request_id": r.request_id,
                        "tier": r.tier_id,
                        "arrival_s": r.arrival,
                        "first_token_s": r.first_token_time,
                        "completion_s": r.completion_time,
                        "ttft_s": r.ttft,
                        "tpot_s": r.tpot,
                        "slo_met": r.slo_met,
                        "label": r.label,
                    }
                )
                + "\n"
            )
