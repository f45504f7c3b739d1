"""End-to-end experiments: calibrate, prefill, schedule, decode and report.

Each step writes a versioned JSON fragment into the output directory;
``cmd_report`` merges the fragments into one RunReport. Every number in a
report comes from simulated clocks or exact arithmetic, so a fixed seed
reproduces the report byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quant
from .config import ExperimentConfig, UsageError
from .costs import derive_costs, problem_from_trace
from .graph import partition_sharing_graph, plan_chunks
from .model import (
    Model,
    TraceEntry,
    build_model,
    chunked_prefill,
    collect_site_activations,
    forward_full,
    greedy_decode,
    inject_outliers,
    load_model,
    planned_trace,
    prepare_quant,
    save_model,
)
from .rng import stream
from .scheduler import InstanceTooLarge, schedule_greedy, schedule_inorder, schedule_optimal, validate_schedule
from .shadow import memory_footprint

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
FRAGMENTS = ("calibrate", "prefill", "schedule", "decode")
FLOAT_ORACLE_TOL = 1e-4


class InvariantViolation(RuntimeError):
    pass


def _write_json(path, doc) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _fragment(kind: str, cfg: ExperimentConfig, body: dict) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, "seed": cfg.seed, "config": cfg.to_dict(), **body}


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def experiment_model(cfg: ExperimentConfig) -> Model:
    """Seeded toy model with embedding outliers on the configured channels."""
    mcfg = cfg.model_config
    base = build_model(mcfg)
    chans = [c for c in cfg.outliers.channels if c < mcfg.hidden]
    if not chans or cfg.outliers.token_fraction <= 0:
        return base
    model, _ = inject_outliers(base, chans, cfg.outliers.token_fraction, cfg.outliers.magnitude, seed=cfg.seed)
    return model


def calibration_prompts(cfg: ExperimentConfig) -> np.ndarray:
    rng = stream(cfg.seed, "calibration_prompts")
    return rng.integers(0, cfg.model.vocab, size=(cfg.calibration_prompts, cfg.calibration_len))


def eval_prompt(cfg: ExperimentConfig, length: int) -> np.ndarray:
    return stream(cfg.seed, f"prompt_{length}").integers(0, cfg.model.vocab, size=length)


def _layer_of(site: str) -> str:
    return site.rsplit(".", 1)[0]


@dataclass
class Calibration:
    profiles: list
    hot: quant.HotChannelTable
    importances: list
    pruned_sites: set


def calibrate_model(
    model: Model,
    prompts,
    percentile: float = quant.DEFAULT_PERCENTILE,
    coverage: float = quant.DEFAULT_COVERAGE,
    prune_rate: float = quant.DEFAULT_PRUNE_RATE,
    granularity: str = "layer",
) -> Calibration:
    """Profile every MatMul site, pick hot channels and prune low-importance layers.

    ``granularity="layer"`` ranks whole decoder layers (all four sites of a
    layer share one pruning decision); ``"site"`` ranks each MatMul alone.
    """
    acts = collect_site_activations(model, prompts)
    profiles = [quant.calibrate(acts[s], percentile, s) for s in model.site_names()]
    hot = quant.build_hot_channels(profiles, coverage)
    group = _layer_of if granularity == "layer" else None
    imps = quant.rank_layer_importance(profiles, group)
    pruned = quant.prune_unimportant(imps, prune_rate)
    sites = {s for s in model.site_names() if (group(s) if group else s) in pruned}
    return Calibration(profiles, hot, imps, sites)


def cmd_calibrate(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    model = experiment_model(cfg)
    save_model(model, out / "model")
    cal = calibrate_model(
        model, calibration_prompts(cfg), cfg.percentile, cfg.hot_coverage, cfg.prune_rate, cfg.importance_granularity
    )
    cdir = out / "calibration"
    cdir.mkdir(exist_ok=True)
    quant.save_profiles(cdir / "profiles.json", cal.profiles)
    quant.save_hot_channels(cdir / "hot_channels.json", cal.hot)
    quant.save_importance(cdir / "importance.json", cal.importances)
    for p in cal.profiles:
        if not p.scale > 0:
            raise InvariantViolation(f"{p.layer}: non-positive scale")
    body = {
        "calibration": {
            "sites": len(cal.profiles),
            "pruned_layers": sorted(li.layer for li in cal.importances if li.pruned),
            "kept_layers": sorted(li.layer for li in cal.importances if not li.pruned),
            "pruned_sites": len(cal.pruned_sites),
            "total_outliers": sum(p.total_outliers for p in cal.profiles),
            "hot_channels": {k: len(v) for k, v in cal.hot.channels.items()},
        }
    }
    frag = _fragment("calibrate", cfg, body)
    _write_json(out / "calibrate.json", frag)
    return frag


def load_calibration(out: Path, model: Model) -> Calibration:
    cdir = Path(out) / "calibration"
    paths = [cdir / n for n in ("profiles.json", "hot_channels.json", "importance.json")]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"missing calibration artifact {p}; run `calibrate` first")
    profiles = quant.load_profiles(paths[0])
    hot = quant.load_hot_channels(paths[1])
    imps = quant.load_importance(paths[2])
    pruned = {li.layer for li in imps if li.pruned}
    sites = {s for s in model.site_names() if s in pruned or _layer_of(s) in pruned}
    return Calibration(profiles, hot, imps, sites)


def _max_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def _rms_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)))


def cmd_prefill(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    model = load_model(out / "model") if (out / "model" / "manifest.json").exists() else experiment_model(cfg)
    modes = cfg.quant_modes
    cal = load_calibration(out, model) if len(modes) > 1 else None
    states = {}
    if "w8a8-naive" in modes:
        states["w8a8-naive"] = prepare_quant(model, cal.profiles, "w8a8-naive")
    if "w8a8-shadow" in modes:
        states["w8a8-shadow"] = prepare_quant(
            model, cal.profiles, "w8a8-shadow", cal.hot, cal.pruned_sites, out / "cold_weights.bin"
        )
    prompts = {}
    for length in cfg.prompt_lengths:
        tokens = eval_prompt(cfg, length)
        plan = plan_chunks(length, cfg.chunk_len)
        full = forward_full(model, tokens)
        res = chunked_prefill(model, tokens, plan, return_all_logits=True)
        err = _max_err(res.all_logits, full.all_logits)
        if err > FLOAT_ORACLE_TOL:
            raise InvariantViolation(f"float32 chunked prefill differs from full prefill by {err:.3g} at L={length}")
        entry = {
            "prompt_len": length,
            "num_chunks": plan.num_chunks,
            "pad": plan.pad,
            "oracle_error": {"float32": err},
            "oracle_rms_error": {"float32": _rms_err(res.all_logits, full.all_logits)},
        }
        trace = res.trace
        for mode, state in states.items():
            qres = chunked_prefill(model, tokens, plan, state, return_all_logits=True)
            entry["oracle_error"][mode] = _max_err(qres.all_logits, full.all_logits)
            entry["oracle_rms_error"][mode] = _rms_err(qres.all_logits, full.all_logits)
            if mode == "w8a8-shadow":
                trace = qres.trace
                entry["shadow_fetch"] = {
                    "resident_rows": sum(1 for e in qres.fetch_log.entries if e[2] == "resident"),
                    "fetched_rows": sum(1 for e in qres.fetch_log.entries if e[2] == "fetched"),
                    "fetched_bytes": qres.fetch_log.fetched_bytes,
                }
                entry["shadow_memory"] = memory_footprint(list(state.shadow.values())).to_dict()
        _, sharing = partition_sharing_graph(model, plan)
        entry["graph_memory"] = sharing.to_dict()
        _write_json(out / f"trace_L{length}.json", [e.to_dict() for e in trace])
        prompts[str(length)] = entry
        log.info("prefill L=%d: %s", length, entry["oracle_error"])
    frag = _fragment("prefill", cfg, {"prompts": prompts})
    _write_json(out / "prefill.json", frag)
    return frag


def _load_trace(path) -> list[TraceEntry]:
    fields = ("chunk", "layer", "stage", "name", "kind", "processor", "rows", "kv_rows", "outlier_channels")
    return [TraceEntry(**{k: d[k] for k in fields}) for d in _read_json(path)]


def cmd_schedule(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    mcfg = cfg.model_config
    prompts = {}
    for length in cfg.prompt_lengths:
        plan = plan_chunks(length, cfg.chunk_len)
        tpath = out / f"trace_L{length}.json"
        trace = _load_trace(tpath) if tpath.exists() else planned_trace(mcfg, plan)
        costs = derive_costs(trace, mcfg, cfg.cost_mode, npu_speedup=cfg.npu_speedup,
                             npu_cpu_ratio=cfg.npu_cpu_ratio, seed=cfg.seed)
        costs.write_json(out / f"costs_L{length}.json")
        graph, nodes = problem_from_trace(trace, costs)
        reports = {"inorder": schedule_inorder(graph, nodes), "greedy": schedule_greedy(graph, nodes)}
        if cfg.optimal == "always" or (cfg.optimal == "auto" and len(nodes) <= cfg.optimal_limit):
            try:
                reports["optimal"] = schedule_optimal(graph, nodes, cfg.optimal_limit)
            except InstanceTooLarge as e:
                raise UsageError(str(e)) from e
        for name, rep in reports.items():
            problems = validate_schedule(graph, nodes, rep)
            if problems:
                raise InvariantViolation(f"{name} schedule at L={length}: {problems[0]}")
            rep.write_gantt_csv(out / f"gantt_L{length}_{name}.csv")
        g, i = reports["greedy"], reports["inorder"]
        if "optimal" in reports and reports["optimal"].makespan > g.makespan:
            raise InvariantViolation("optimal schedule is longer than greedy")
        prompts[str(length)] = {
            "num_nodes": len(nodes),
            "makespan": {k: r.makespan for k, r in reports.items()},
            "bubble_rate": {k: r.bubble_rate for k, r in reports.items()},
            "busy": {k: r.busy for k, r in reports.items()},
            "greedy_improvement_pct": 100.0 * (1.0 - g.makespan / i.makespan),
            "tokens_per_sec": length / (g.makespan * 1e-6),
            "events": {k: r.to_dict()["events"] for k, r in reports.items()},
        }
    frag = _fragment("schedule", cfg, {"prompts": prompts})
    _write_json(out / "schedule.json", frag)
    return frag


def cmd_decode(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    model = load_model(out / "model") if (out / "model" / "manifest.json").exists() else experiment_model(cfg)
    length = cfg.prompt_lengths[0]
    tokens = eval_prompt(cfg, length)
    chunked = chunked_prefill(model, tokens, plan_chunks(length, cfg.chunk_len))
    full = forward_full(model, tokens, return_all_logits=False)
    a = greedy_decode(model, chunked.kv, cfg.decode_tokens, chunked.logits)
    b = greedy_decode(model, full.kv, cfg.decode_tokens, full.logits)
    if a != b:
        raise InvariantViolation(f"decode after chunked prefill {a} differs from full prefill {b}")
    frag = _fragment("decode", cfg, {"decode": {"prompt_len": length, "tokens": a}})
    _write_json(out / "decode.json", frag)
    return frag


def merge_fragments(fragments: list[dict]) -> dict:
    if not fragments:
        raise UsageError("no report fragments to merge")
    seeds = set()
    report: dict = {"schema_version": REPORT_SCHEMA_VERSION, "prompts": {}}
    for frag in fragments:
        if frag.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InvariantViolation(
                f"fragment {frag.get('kind')!r} has schema_version {frag.get('schema_version')!r}, "
                f"expected {REPORT_SCHEMA_VERSION}"
            )
        seeds.add(frag["seed"])
        report.setdefault("config", frag.get("config"))
        for key, val in frag.items():
            if key in ("schema_version", "kind", "seed", "config"):
                continue
            if key == "prompts":
                for length, entry in val.items():
                    report["prompts"].setdefault(length, {}).update(entry)
            else:
                report[key] = val
    if len(seeds) != 1:
        raise InvariantViolation(f"fragments come from different seeds: {sorted(seeds)}")
    report["seed"] = seeds.pop()
    report["prompts"] = dict(sorted(report["prompts"].items(), key=lambda kv: int(kv[0])))
    return report


def summarize(report: dict) -> str:
    lines = [f"seed {report['seed']}"]
    cal = report.get("calibration")
    if cal:
        lines.append(
            f"calibration: {cal['sites']} MatMul sites, shadow path pruned on {len(cal['pruned_layers'])} of "
            f"{len(cal['pruned_layers']) + len(cal['kept_layers'])} layers, "
            f"{cal['total_outliers']} outliers seen"
        )
    for length, e in report["prompts"].items():
        lines.append(f"prompt {length} tokens:")
        if "oracle_error" in e:
            errs = ", ".join(f"{k} {v:.3g}" for k, v in e["oracle_error"].items())
            lines.append(f"  max |logit error| vs full float prefill: {errs}")
            rms = ", ".join(f"{k} {v:.3g}" for k, v in e["oracle_rms_error"].items())
            lines.append(f"  rms logit error: {rms}")
        if "graph_memory" in e:
            gm = e["graph_memory"]
            lines.append(
                f"  graph memory: {gm['shared_subgraphs']}/{gm['total_subgraphs']} subgraphs shared, "
                f"naive/shared = {gm['naive_over_shared']:.2f}"
            )
        if "shadow_memory" in e:
            sm = e["shadow_memory"]
            lines.append(
                f"  shadow weights resident: {sm['hot_float_bytes']} of {sm['full_copy_float_bytes']} float bytes"
            )
        if "makespan" in e:
            ms = ", ".join(f"{k} {v}" for k, v in e["makespan"].items())
            br = ", ".join(f"{k} {v:.3f}" for k, v in e["bubble_rate"].items())
            lines.append(f"  makespan (us): {ms}; NPU bubble rate: {br}")
            lines.append(
                f"  out-of-order gain over in-order: {e['greedy_improvement_pct']:.1f}%, "
                f"{e['tokens_per_sec']:.0f} simulated tokens/s"
            )
    if "decode" in report:
        lines.append(f"greedy decode: {report['decode']['tokens']}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, paths=None) -> dict:
    out = _out(cfg)
    if paths is None:
        paths = [out / f"{k}.json" for k in FRAGMENTS if (out / f"{k}.json").exists()]
    report = merge_fragments([_read_json(p) for p in paths])
    _write_json(out / "report.json", report)
    (out / "summary.txt").write_text(summarize(report))
    return report


def cmd_demo(cfg: ExperimentConfig) -> dict:
    cmd_calibrate(cfg)
    cmd_prefill(cfg)
    cmd_schedule(cfg)
    cmd_decode(cfg)
    return cmd_report(cfg)
