"""Experiment configuration: YAML schema, validation, and object construction."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from . import policy as policy_mod
from .engine import EngineConfig
from .migration import CostModelParams
from .profile import PerfProfile, bundled_profile, derive_slos, load_profile
from .trace import (
    BurstInterval,
    LengthDist,
    SloTier,
    SyntheticSpec,
    TierLoad,
    generate_trace,
    load_trace,
)

BUNDLED_PROFILES = ("a100-like", "h100-like")


class ConfigError(ValueError):
    """Validation failure; message carries the offending field path."""


@dataclass
class ExperimentConfig:
    profile: PerfProfile
    pool_size: int
    tiers: list[SloTier]
    trace_file: str | None
    synthetic: SyntheticSpec | None
    policy_name: str
    engine: EngineConfig
    avg_prompt_len: float
    avg_output_len: float
    tier_workload: dict[int, tuple[float, float]]
    headroom: float
    output_dir: str
    raw: dict = field(default_factory=dict, repr=False)

    def requests(self):
        if self.trace_file is not None:
            return load_trace(self.trace_file, self.tiers)
        return generate_trace(self.synthetic)


def _need(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"{path}.{key}: missing required field")
    return doc[key]


def _parse_tiers(doc: dict) -> list[SloTier]:
    tiers = []
    for i, t in enumerate(doc.get("tiers", [])):
        path = f"tiers[{i}]"
        background = bool(t.get("background", False))
        try:
            tier = SloTier(
                id=int(_need(t, "id", path)),
                name=str(t.get("name", f"tier-{t.get('id', i)}")),
                ttft_target_ms=float(t.get("ttft_ms", 0.0)),
                tpot_target_ms=float(t.get("tpot_ms", 0.0)),
                background=background,
            )
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        tiers.append(tier)
    if len({t.id for t in tiers}) != len(tiers):
        raise ConfigError("tiers: duplicate tier ids")
    return tiers


def _parse_synthetic(doc: dict, path: str) -> SyntheticSpec:
    loads = []
    for i, t in enumerate(doc.get("tiers", [])):
        tpath = f"{path}.tiers[{i}]"
        bursts = tuple(
            BurstInterval(float(b["start"]), float(b["end"]), float(b["multiplier"]))
            for b in t.get("bursts", [])
        )
        loads.append(
            TierLoad(
                tier_id=int(_need(t, "tier", tpath)),
                base_rps=float(_need(t, "base_rps", tpath)),
                prompt_dist=LengthDist(
                    median=float(_need(t, "prompt_median", tpath)),
                    sigma=float(t.get("prompt_sigma", 0.5)),
                ),
                output_dist=LengthDist(
                    median=float(_need(t, "output_median", tpath)),
                    sigma=float(t.get("output_sigma", 0.5)),
                ),
                bursts=bursts,
            )
        )
    try:
        return SyntheticSpec(
            duration=float(_need(doc, "duration", path)),
            tiers=tuple(loads),
            seed=int(doc.get("seed", 0)),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def resolve_profile(name_or_path: str) -> PerfProfile:
    if name_or_path in BUNDLED_PROFILES:
        return bundled_profile(name_or_path)
    if not os.path.exists(name_or_path):
        raise ConfigError(f"profile: file not found: {name_or_path}")
    return load_profile(name_or_path)


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    if overrides:
        doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    return parse_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_config(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    profile = resolve_profile(str(_need(doc, "profile", "")).strip())
    pool_size = int(_need(doc, "pool_size", ""))
    if pool_size < 1:
        raise ConfigError("pool_size: must be >= 1")

    workload = doc.get("workload", {})
    avg_prompt_len = float(workload.get("avg_prompt_len", 1024))
    avg_output_len = float(workload.get("avg_output_len", 100))
    tier_workload: dict[int, tuple[float, float]] = {}
    for i, t in enumerate(workload.get("per_tier", []) or []):
        path = f"workload.per_tier[{i}]"
        tier_workload[int(_need(t, "tier", path))] = (
            float(t.get("avg_prompt_len", avg_prompt_len)),
            float(t.get("avg_output_len", avg_output_len)),
        )

    if "tiers" in doc:
        tiers = _parse_tiers(doc)
    elif "derive_slos" in doc:
        d = doc["derive_slos"] or {}
        scale = float(d.get("scale", 1.0))
        if scale <= 0:
            raise ConfigError("derive_slos.scale: must be positive")
        strict, relaxed = derive_slos(
            profile,
            avg_prompt_len=avg_prompt_len,
            strict_batch=int(d.get("strict_batch", 1)),
            relaxed_batch=int(d.get("relaxed_batch", 128)),
            scale=scale,
        )
        tiers = [strict, relaxed]
    else:
        raise ConfigError("tiers: either tiers or derive_slos is required")

    trace_doc = doc.get("trace")
    if not isinstance(trace_doc, dict):
        raise ConfigError("trace: missing section")
    trace_file = trace_doc.get("file")
    synthetic = (
        _parse_synthetic(trace_doc["synthetic"], "trace.synthetic")
        if "synthetic" in trace_doc
        else None
    )
    if (trace_file is None) == (synthetic is None):
        raise ConfigError("trace: exactly one of trace.file or trace.synthetic")
    if trace_file is not None:
        if not os.path.isabs(trace_file):
            trace_file = os.path.join(base_dir, trace_file)
        if not os.path.exists(trace_file):
            raise ConfigError(f"trace.file: file not found: {trace_file}")

    engine_doc = doc.get("engine", {})
    cost_doc = engine_doc.get("cost_params", {})
    try:
        cost = CostModelParams(**cost_doc) if cost_doc else CostModelParams()
        engine = EngineConfig(
            window_s=float(engine_doc.get("window_s", 1.0)),
            switch_mode=str(engine_doc.get("switch_mode", "warm")),
            seed=int(engine_doc.get("seed", 0)),
            kv_accounting=bool(engine_doc.get("kv_accounting", False)),
            planning_delay_ms=float(engine_doc.get("planning_delay_ms", 25.0)),
            cost_params=cost,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"engine: {e}") from e

    return ExperimentConfig(
        profile=profile,
        pool_size=pool_size,
        tiers=tiers,
        trace_file=trace_file,
        synthetic=synthetic,
        policy_name=str(doc.get("policy", "dynamic")),
        engine=engine,
        avg_prompt_len=avg_prompt_len,
        avg_output_len=avg_output_len,
        tier_workload=tier_workload,
        headroom=float(doc.get("headroom", 1.0)),
        output_dir=str(doc.get("output_dir", "out")),
        raw=doc,
    )


def build_policy(name: str, cfg: ExperimentConfig, envelopes, trace=None):
    """Policy objects from a spec string: dynamic | split | oracle | static:P[/D]."""
    name = name.strip()
    if name == "dynamic":
        return policy_mod.DynamicPolicy(envelopes, cfg.tiers, cfg.pool_size)
    if name == "split":
        return policy_mod.split_policy(envelopes, cfg.tiers, cfg.pool_size)
    if name == "oracle":
        if trace is None:
            trace = cfg.requests()
        return policy_mod.OraclePolicy(
            envelopes, cfg.tiers, cfg.pool_size, trace, cfg.engine.window_s
        )
    if name.startswith("static:"):
        spec = name[len("static:"):]
        parts = spec.split("/")
        try:
            tp_p = int(parts[0])
            tp_d = int(parts[1]) if len(parts) > 1 else None
        except ValueError as e:
            raise ConfigError(f"policy: bad static spec {name!r}") from e
        config = policy_mod.static_config(
            envelopes, cfg.tiers, cfg.pool_size, tp_p, tp_d
        )
        label = f"static_tp{spec.replace('/', '_')}"
        return policy_mod.StaticPolicy(config, name=label)
    raise ConfigError(f"policy: unknown policy {name!r}")
