"""Request/tier definitions, trace IO, and synthetic workload generation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SloTier:
    """A class of requests sharing TTFT/TPOT latency targets."""

    id: int
    name: str
    ttft_target_ms: float = 0.0
    tpot_target_ms: float = 0.0
    background: bool = False

    def __post_init__(self):
        if not self.background:
            if self.ttft_target_ms <= 0 or self.tpot_target_ms <= 0:
                raise ValueError(
                    f"tier {self.id!r}: non-background tiers need positive "
                    f"ttft/tpot targets"
                )


@dataclass(frozen=True)
class Request:
    id: int
    tier_id: int
    arrival_time: float  # seconds from trace start
    prompt_len: int
    output_len: int

    def __post_init__(self):
        if self.arrival_time < 0:
            raise ValueError(f"request {self.id}: negative arrival_time")
        if self.prompt_len <= 0:
            raise ValueError(f"request {self.id}: prompt_len must be > 0")
        if self.output_len < 1:
            raise ValueError(f"request {self.id}: output_len must be >= 1")


@dataclass(frozen=True)
class BurstInterval:
    start: float
    end: float
    multiplier: float


@dataclass(frozen=True)
class LengthDist:
    """Lognormal token-length distribution, clamped to [1, max_len]."""

    median: float
    sigma: float
    max_len: int = 131072

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raw = rng.lognormal(mean=math.log(self.median), sigma=self.sigma, size=n)
        return np.clip(np.round(raw), 1, self.max_len).astype(int)


@dataclass(frozen=True)
class TierLoad:
    """Per-tier arrival-rate spec for the synthetic generator."""

    tier_id: int
    base_rps: float
    prompt_dist: LengthDist
    output_dist: LengthDist
    bursts: tuple[BurstInterval, ...] = ()


@dataclass(frozen=True)
class SyntheticSpec:
    duration: float
    tiers: tuple[TierLoad, ...]
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for load in self.tiers:
            if load.base_rps < 0:
                raise ValueError(f"tier {load.tier_id}: base_rps must be >= 0")
            for b in load.bursts:
                if not (0 <= b.start < b.end <= self.duration):
                    raise ValueError(
                        f"tier {load.tier_id}: burst [{b.start}, {b.end}) outside "
                        f"[0, {self.duration}]"
                    )
                if b.multiplier < 0:
                    raise ValueError(f"tier {load.tier_id}: negative burst multiplier")


@dataclass
class TierDemand:
    """Observed vs. served arrival rate for one tier over a control window."""

    tier_id: int
    rps_observed: float = 0.0
    served_rps: float = 0.0


class TraceFormatError(ValueError):
    pass


def load_trace(path, tiers) -> list[Request]:
    """Load a JSON-lines trace; returns requests sorted by arrival_time.

    Each line carries arrival_time_s, tier, prompt_len, output_len. Out-of-order
    timestamps are sorted with a warning; malformed records raise with the line
    number.
    """
    known = {t.id for t in tiers}
    requests = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tier_id = int(rec["tier"])
                if tier_id not in known:
                    raise TraceFormatError(
                        f"{path}:{lineno}: unknown tier id {tier_id}"
                    )
                req = Request(
                    id=len(requests),
                    tier_id=tier_id,
                    arrival_time=float(rec["arrival_time_s"]),
                    prompt_len=int(rec["prompt_len"]),
                    output_len=int(rec["output_len"]),
                )
            except TraceFormatError:
                raise
            except (KeyError, ValueError, TypeError) as e:
                raise TraceFormatError(f"{path}:{lineno}: malformed record: {e}") from e
            requests.append(req)

    times = [r.arrival_time for r in requests]
    if any(b < a for a, b in zip(times, times[1:])):
        warnings.warn(f"{path}: arrival times not monotone; sorting")
        requests.sort(key=lambda r: r.arrival_time)
    return requests


def save_trace(path, requests) -> None:
    with open(path, "w") as f:
        for r in requests:
            f.write(
                json.dumps(
                    {
                        "arrival_time_s": r.arrival_time,
                        "tier": r.tier_id,
                        "prompt_len": r.prompt_len,
                        "output_len": r.output_len,
                    }
                )
                + "\n"
            )


def _rate_at(load: TierLoad, t: float) -> float:
    rate = load.base_rps
    for b in load.bursts:
        if b.start <= t < b.end:
            rate *= b.multiplier
    return rate


def generate_trace(spec: SyntheticSpec) -> list[Request]:
    """Draw arrivals from a piecewise-homogeneous Poisson process per tier.

    Thinning against the per-tier peak rate keeps the draw exactly reproducible
    for a given seed.
    """
    rng = np.random.default_rng(spec.seed)
    raw: list[tuple[float, int, int, int]] = []
    for load in spec.tiers:
        peak = load.base_rps * max(
            [1.0] + [b.multiplier for b in load.bursts if b.multiplier > 1.0]
        )
        if peak <= 0:
            continue
        t = 0.0
        times = []
        while True:
            t += rng.exponential(1.0 / peak)
            if t >= spec.duration:
                break
            # thin to the instantaneous rate
            if rng.random() < _rate_at(load, t) / peak:
                times.append(t)
        n = len(times)
        prompts = load.prompt_dist.sample(rng, n)
        outputs = load.output_dist.sample(rng, n)
        for t, p, o in zip(times, prompts, outputs):
            raw.append((t, load.tier_id, int(p), int(o)))

    raw.sort()
    return [
        Request(id=i, tier_id=tid, arrival_time=t, prompt_len=p, output_len=o)
        for i, (t, tid, p, o) in enumerate(raw)
    ]


def observe_demand(requests, tiers, window: tuple[float, float]) -> list[TierDemand]:
    """Per-tier observed arrival rate over [start, end); served_rps starts at 0."""
    start, end = window
    if not start < end:
        raise ValueError("window start must precede end")
    counts = {t.id: 0 for t in tiers}
    for r in requests:
        if start <= r.arrival_time < end and r.tier_id in counts:
            counts[r.tier_id] += 1
    span = end - start
    return [
        TierDemand(tier_id=t.id, rps_observed=counts[t.id] / span) for t in tiers
    ]
