"""Experiment runner CLI: simulate, sweep, plan, migrate-plan, gen-trace, derive-slos."""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import replace

from . import engine as engine_mod
from . import metrics as metrics_mod
from . import migration as migration_mod
from . import policy as policy_mod
from .config import ConfigError, ExperimentConfig, build_policy, load_config, resolve_profile
from .profile import derive_slos
from .trace import SloTier, TierDemand, generate_trace, save_trace

EXIT_VALIDATION = 2


def _envelopes(cfg: ExperimentConfig):
    return policy_mod.make_envelopes(
        cfg.profile,
        cfg.tiers,
        cfg.avg_prompt_len,
        cfg.avg_output_len,
        cfg.headroom,
        per_tier=cfg.tier_workload or None,
    )


def _run_one(cfg: ExperimentConfig, policy_name: str, trace=None):
    envelopes = _envelopes(cfg)
    if trace is None:
        trace = cfg.requests()
    policy = build_policy(policy_name, cfg, envelopes, trace)
    result = engine_mod.run(
        trace, cfg.tiers, cfg.profile, policy, cfg.engine, envelopes
    )
    report = metrics_mod.report_from_run(
        result, cfg.tiers, name=getattr(policy, "name", policy_name),
        duration_s=None,
    )
    return result, report


def cmd_simulate(args) -> int:
    cfg = _apply_cli_overrides(load_config(args.config), args)
    os.makedirs(args.out or cfg.output_dir, exist_ok=True)
    out = args.out or cfg.output_dir
    result, report = _run_one(cfg, args.policy or cfg.policy_name)
    metrics_mod.write_records_jsonl(result.records, os.path.join(out, "records.jsonl"))
    metrics_mod.write_summary(report, os.path.join(out, "summary.json"))
    with open(os.path.join(out, "windows.jsonl"), "w") as f:
        for w in result.window_logs:
            f.write(
                json.dumps(
                    {
                        "window": w.window_index,
                        "time_s": w.time,
                        "changed_groups": w.changed_groups,
                        "pause_ms": w.pause_ms,
                        "demands": [
                            {
                                "tier": d.tier_id,
                                "rps_observed": d.rps_observed,
                                "served_rps": d.served_rps,
                            }
                            for d in w.demands
                        ],
                    }
                )
                + "\n"
            )
    print(
        f"simulate: {len(result.records)} completions, "
        f"goodput {report.aggregate_goodput:.2f} req/s, "
        f"attainment {report.attainment:.1%}"
    )
    return 0


_SWEEP_PARAMS = ("rps_scale", "slo_scale", "window", "pool_size")


def _scaled_config(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "window":
        return replace(cfg, engine=replace(cfg.engine, window_s=float(value)))
    if param == "pool_size":
        return replace(cfg, pool_size=int(value))
    if param == "slo_scale":
        tiers = [
            t
            if t.background
            else replace(
                t,
                ttft_target_ms=t.ttft_target_ms * value,
                tpot_target_ms=t.tpot_target_ms * value,
            )
            for t in cfg.tiers
        ]
        return replace(cfg, tiers=tiers)
    if param == "rps_scale":
        spec = cfg.synthetic
        if spec is None:
            raise ConfigError("sweep: rps_scale needs a synthetic trace source")
        loads = tuple(replace(t, base_rps=t.base_rps * value) for t in spec.tiers)
        return replace(cfg, synthetic=replace(spec, tiers=loads))
    raise ConfigError(f"sweep: unknown parameter {param!r}")


def cmd_sweep(args) -> int:
    cfg = _apply_cli_overrides(load_config(args.config), args)
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    policies = (args.policies or args.policy or cfg.policy_name).split(",")
    values = [float(v) for v in args.values.split(",")]
    rows = []
    for value in values:
        point_cfg = _scaled_config(cfg, args.parameter, value)
        for pol in policies:
            _, report = _run_one(point_cfg, pol)
            rows.append(
                {
                    "parameter": args.parameter,
                    "value": value,
                    "policy": report.name,
                    "aggregate_goodput": report.aggregate_goodput,
                    "attainment": report.attainment,
                }
            )
    path = os.path.join(out, f"sweep_{args.parameter}.csv")
    import csv

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(
            f"{r['parameter']}={r['value']:g} {r['policy']}: "
            f"goodput {r['aggregate_goodput']:.2f} req/s"
        )
    print(f"wrote {path}")
    return 0


def cmd_plan(args) -> int:
    profile = resolve_profile(args.profile)
    if args.pool_size < 1:
        raise ConfigError("pool_size: must be >= 1")
    with open(args.demands) as f:
        doc = json.load(f)
    tiers = []
    demands = []
    for t in doc["tiers"]:
        tiers.append(
            SloTier(
                id=int(t["id"]),
                name=str(t.get("name", f"tier-{t['id']}")),
                ttft_target_ms=float(t.get("ttft_ms", 0.0)),
                tpot_target_ms=float(t.get("tpot_ms", 0.0)),
                background=bool(t.get("background", False)),
            )
        )
        demands.append(
            TierDemand(
                tier_id=int(t["id"]),
                rps_observed=float(t.get("rps", 0.0)),
                served_rps=float(t.get("served_rps", 0.0)),
            )
        )
    envelopes = policy_mod.make_envelopes(
        profile, tiers, args.avg_prompt_len, args.avg_output_len
    )
    timings = []
    config = None
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        config = policy_mod.plan_window(envelopes, tiers, demands, args.pool_size)
        timings.append((time.perf_counter() - t0) * 1000.0)
    for g in config.groups:
        print(
            f"tier={g.tier_id:>2} stage={g.stage:<10} tp={g.tp} gpus={list(g.gpu_ids)}"
        )
    print(
        f"planning latency: median {statistics.median(timings):.3f} ms "
        f"over {len(timings)} runs"
    )
    return 0


def cmd_migrate_plan(args) -> int:
    with open(args.layout) as f:
        doc = json.load(f)
    kv_bytes = int(doc.get("kv_bytes_per_token_per_head", 4096))
    total_heads = int(doc["total_heads"])
    old_layouts = [
        migration_mod.KvLayout(
            group=tuple(g["gpus"]),
            tp=len(g["gpus"]),
            total_heads=total_heads,
            requests=tuple((int(r["id"]), int(r["context_len"])) for r in g["requests"]),
        )
        for g in doc["groups"]
    ]
    all_gpus = tuple(g for layout in old_layouts for g in layout.group)
    all_reqs = tuple(r for layout in old_layouts for r in layout.requests)
    if args.new_tp != len(all_gpus):
        raise ConfigError(
            f"new_tp: target tp {args.new_tp} must equal the merged group size "
            f"{len(all_gpus)}"
        )
    new = migration_mod.KvLayout(
        group=all_gpus,
        tp=args.new_tp,
        total_heads=total_heads,
        requests=all_reqs,
    )
    params = migration_mod.CostModelParams()
    plan = migration_mod.plan_repartition(
        old_layouts, new, kv_bytes, handshake_ms=params.handshake_ms
    )
    table = {
        "per_page_ms": migration_mod.latency_per_page(plan, params),
        "aggregate_ms": migration_mod.latency_aggregate(plan, params),
        "pipelined_ms": migration_mod.latency_pipelined(plan, params),
    }
    out_doc = {
        "transfers": [
            {
                "src_gpu": t.src_gpu,
                "dst_gpu": t.dst_gpu,
                "request_id": t.request_id,
                "head_lo": t.head_lo,
                "head_hi": t.head_hi,
                "bytes": t.bytes,
            }
            for t in plan.transfers
        ],
        "total_bytes": plan.total_bytes,
        "handshake_ms": plan.handshake_ms,
        "latency_ms": table,
    }
    text = json.dumps(out_doc, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(text)
    return 0


def cmd_gen_trace(args) -> int:
    cfg = _apply_cli_overrides(load_config(args.config), args)
    if cfg.synthetic is None:
        raise ConfigError("trace.synthetic: required for gen-trace")
    spec = cfg.synthetic
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    requests = generate_trace(spec)
    save_trace(args.out, requests)
    print(f"wrote {len(requests)} requests to {args.out}")
    return 0


def cmd_derive_slos(args) -> int:
    profile = resolve_profile(args.profile)
    if args.scale <= 0:
        raise ConfigError("scale: must be positive")
    strict, relaxed = derive_slos(
        profile,
        avg_prompt_len=args.avg_prompt_len,
        strict_batch=args.strict_batch,
        relaxed_batch=args.relaxed_batch,
        scale=args.scale,
    )
    for tier in (strict, relaxed):
        print(
            f"{tier.name}: ttft {tier.ttft_target_ms:.1f} ms, "
            f"tpot {tier.tpot_target_ms:.2f} ms"
        )
    return 0


def _apply_cli_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    engine = cfg.engine
    if getattr(args, "seed", None) is not None:
        engine = replace(engine, seed=args.seed)
        if cfg.synthetic is not None:
            cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=args.seed))
    if getattr(args, "switch_mode", None):
        engine = replace(engine, switch_mode=args.switch_mode)
    return replace(cfg, engine=engine)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpsim")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--policy")
        sp.add_argument("--switch-mode", dest="switch_mode")

    sp = sub.add_parser("simulate", help="run one simulation and write metrics")
    add_common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run one simulation per value per policy")
    add_common(sp)
    sp.add_argument("parameter", choices=_SWEEP_PARAMS)
    sp.add_argument("values", help="comma-separated values")
    sp.add_argument("--policies", help="comma-separated policy list")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plan", help="plan one control window and time it")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--demands", required=True, help="JSON tier/demand file")
    sp.add_argument("--pool-size", dest="pool_size", type=int, required=True)
    sp.add_argument("--avg-prompt-len", dest="avg_prompt_len", type=float, default=1024)
    sp.add_argument("--avg-output-len", dest="avg_output_len", type=float, default=100)
    sp.add_argument("--repeat", type=int, default=21)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("migrate-plan", help="plan a TP transition and cost it")
    sp.add_argument("--layout", required=True, help="JSON old-layout file")
    sp.add_argument("--new-tp", dest="new_tp", type=int, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_migrate_plan)

    sp = sub.add_parser("gen-trace", help="write a synthetic trace to a file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_trace)

    sp = sub.add_parser("derive-slos", help="derive strict/relaxed tiers from a profile")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--strict-batch", dest="strict_batch", type=int, default=1)
    sp.add_argument("--relaxed-batch", dest="relaxed_batch", type=int, default=128)
    sp.add_argument("--avg-prompt-len", dest="avg_prompt_len", type=float, default=1024)
    sp.set_defaults(func=cmd_derive_slos)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
