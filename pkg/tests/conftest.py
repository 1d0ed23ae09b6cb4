"""Shared test fixtures: hand-built profiles and tier sets."""

import pytest

# one line per acceptance criterion, printed in the terminal summary so the
# verdicts are visible regardless of output capture
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)

from tpsim.profile import DECODE, PREFILL, PerfProfile
from tpsim.trace import SloTier


def make_profile(
    entries,
    tp_levels=(1,),
    total_kv_heads=8,
    kv_bytes_per_token_per_head=4096,
    weight_full_copy_gb=26.0,
    gpu_memory_gb=80.0,
):
    return PerfProfile(
        gpu_type="test",
        model_name="test-model",
        tp_levels=tuple(tp_levels),
        entries=dict(entries),
        weight_full_copy_gb=weight_full_copy_gb,
        kv_bytes_per_token_per_head=kv_bytes_per_token_per_head,
        total_kv_heads=total_kv_heads,
        gpu_memory_gb=gpu_memory_gb,
    )


def flat_profile(
    prefill_ms=40.0,
    decode_ms=20.0,
    batches=(1, 2, 4),
    seqs=(64, 256),
    tp_levels=(1,),
    **kwargs,
):
    """Profile with constant latency everywhere; timelines become hand-computable."""
    entries = {}
    for tp in tp_levels:
        for b in batches:
            for s in seqs:
                entries[(PREFILL, tp, b, s)] = prefill_ms
                entries[(DECODE, tp, b, s)] = decode_ms
    return make_profile(entries, tp_levels=tp_levels, **kwargs)


@pytest.fixture
def strict_tier():
    return SloTier(id=0, name="strict", ttft_target_ms=250.0, tpot_target_ms=25.0)


@pytest.fixture
def relaxed_tier():
    return SloTier(id=1, name="relaxed", ttft_target_ms=2000.0, tpot_target_ms=40.0)


@pytest.fixture
def background_tier():
    return SloTier(id=2, name="batch", background=True)
