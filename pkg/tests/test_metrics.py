"""Goodput bucketing, percentiles, comparison rows, and output writers."""

import csv
import json
import random
from types import SimpleNamespace

import pytest

from tpsim.engine import CompletionRecord
from tpsim.metrics import (
    MetricsError,
    compare,
    goodput,
    percentile,
    report_from_run,
    write_records_jsonl,
    write_series_csv,
    write_summary,
)
from tpsim.trace import SloTier

STRICT = SloTier(id=0, name="strict", ttft_target_ms=250.0, tpot_target_ms=25.0)
BG = SloTier(id=2, name="batch", background=True)


def _rec(rid, completion, tier=0, slo_met=True, ttft=0.1, tpot=0.01):
    return CompletionRecord(
        request_id=rid, tier_id=tier, arrival=0.0,
        first_token_time=ttft, completion_time=completion,
        ttft=ttft, tpot=tpot, slo_met=slo_met, label="feasible",
    )


def test_hand_goodput_five_records():
    # 3 compliant foreground + 1 violating + 1 background over 2 s
    records = [
        _rec(0, 0.3), _rec(1, 0.6), _rec(2, 1.4),
        _rec(3, 1.6, slo_met=False),
        _rec(4, 0.5, tier=2, slo_met=False),
    ]
    rep = goodput(records, [STRICT, BG], bucket_s=1.0, duration_s=2.0)
    assert rep.aggregate_goodput == pytest.approx(1.5)
    assert rep.attainment == pytest.approx(3 / 4)  # background excluded
    assert rep.goodput_series == [2.0, 1.0]
    assert rep.background_series == [1.0, 0.0]
    assert rep.per_tier[0].completed == 4
    assert rep.per_tier[0].slo_met == 3
    assert rep.per_tier[2].completed == 1
    assert rep.per_tier[2].slo_met == 0


def test_goodput_empty_and_validation():
    rep = goodput([], [STRICT], bucket_s=1.0)
    assert rep.aggregate_goodput == 0.0
    assert rep.attainment == 0.0
    assert rep.per_tier[0].p50_ttft is None
    with pytest.raises(MetricsError):
        goodput([], [STRICT], bucket_s=0.0)


def test_goodput_last_bucket_clamps():
    rep = goodput([_rec(0, 5.0)], [STRICT], bucket_s=1.0, duration_s=5.0)
    assert len(rep.goodput_series) == 5
    assert rep.goodput_series[-1] == 1.0


def test_percentile_hand_values():
    assert percentile([7.0], 50) == 7.0
    assert percentile([7.0], 99) == 7.0
    data = list(range(1, 101))
    assert percentile(data, 90) == 90
    assert percentile(data, 50) == 50
    assert percentile(data, 99) == 99
    assert percentile([], 50) is None


def test_percentile_order_invariant_and_monotone():
    rng = random.Random(4)
    data = [rng.uniform(0, 10) for _ in range(57)]
    shuffled = data[:]
    rng.shuffle(shuffled)
    assert percentile(shuffled, 90) == percentile(data, 90)
    p50, p90, p99 = (percentile(data, q) for q in (50, 90, 99))
    assert p50 <= p90 <= p99


def test_per_tier_percentiles():
    records = [_rec(i, 1.0, ttft=0.1 * (i + 1)) for i in range(10)]
    rep = goodput(records, [STRICT], duration_s=1.0)
    assert rep.per_tier[0].p50_ttft == pytest.approx(0.5)
    assert rep.per_tier[0].p90_ttft == pytest.approx(0.9)
    assert rep.per_tier[0].p99_ttft == pytest.approx(1.0)


def test_compare_ratios():
    a = goodput([_rec(0, 0.5), _rec(1, 0.9)], [STRICT], duration_s=1.0, name="a")
    b = goodput([_rec(0, 0.5)], [STRICT], duration_s=1.0, name="b")
    rows = compare([a, b])
    assert rows[0]["goodput_vs_baseline"] == pytest.approx(1.0)
    assert rows[1]["goodput_vs_baseline"] == pytest.approx(0.5)
    rows = compare([a, b], baseline="b")
    assert rows[0]["goodput_vs_baseline"] == pytest.approx(2.0)


def test_compare_errors():
    with pytest.raises(MetricsError):
        compare([])
    rep = goodput([], [STRICT], name="x")
    with pytest.raises(MetricsError):
        compare([rep], baseline="missing")


def test_report_from_run_carries_counters():
    result = SimpleNamespace(
        records=[_rec(0, 1.0)], migration_count=3, total_pause_ms=12.5, preemptions=1
    )
    rep = report_from_run(result, [STRICT], name="dyn")
    assert rep.migration_count == 3
    assert rep.total_pause_ms == 12.5
    assert rep.preemptions == 1
    assert rep.aggregate_goodput == pytest.approx(1.0)


def test_writers_round_trip(tmp_path):
    records = [_rec(0, 0.5), _rec(1, 1.5, slo_met=False)]
    rep = goodput(records, [STRICT], duration_s=2.0, name="demo")

    series_path = tmp_path / "series.csv"
    write_series_csv([rep], series_path)
    with open(series_path) as f:
        rows = list(csv.DictReader(f))
    assert [float(r["goodput_rps"]) for r in rows] == [1.0, 0.0]

    summary_path = tmp_path / "summary.json"
    write_summary(rep, summary_path)
    data = json.loads(summary_path.read_text())
    assert data["name"] == "demo"
    assert data["aggregate_goodput"] == pytest.approx(0.5)
    assert data["tiers"]["0"]["completed"] == 2

    records_path = tmp_path / "records.jsonl"
    write_records_jsonl(records, records_path)
    lines = [json.loads(line) for line in records_path.read_text().splitlines()]
    assert len(lines) == 2
    assert lines[0]["request_id"] == 0
    assert lines[1]["slo_met"] is False
