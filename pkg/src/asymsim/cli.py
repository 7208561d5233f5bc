"""Experiment front-end: sweeps, the dynamic scenario, fragmentation analysis
and the sensitivity study, each emitting versioned CSV files.

Reproduction presets encode the grid of each reported experiment so a whole
figure is one command, e.g. `asymsim sweep --preset fig9 --out results/`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

from .errors import BudgetExceededError, ConfigError, OutOfMemoryError
from .hardware import SENSITIVITY_PRESETS, load_platform, platform_from_dict
from .memsim import fragmentation_report, fragmentation_rows
from .workload import BatchState, ScenarioPolicy, load_model, model_from_dict
from .engine import (ScenarioConfig, SystemVariant, run_generation, run_point,
                     speedup)


def _model(spec):
    return model_from_dict(spec) if isinstance(spec, dict) else load_model(spec)


def _platform(spec):
    return platform_from_dict(spec) if isinstance(spec, dict) else load_platform(spec)

SWEEP_SCHEMA = "# asymsim-sweep-v1"
DYNAMIC_SCHEMA = "# asymsim-dynamic-v1"
FRAG_SCHEMA = "# asymsim-frag-v1"
SENSITIVITY_SCHEMA = "# asymsim-sensitivity-v1"
TABLE_SCHEMA = "# asymsim-overhead-v1"

MODEL_GRIDS = {
    "gpt3-175b": (32, (512, 1024, 1536, 2048)),
    "chinchilla-70b": (64, (1024, 2048, 3072, 4096)),
    "llama2-70b": (128, (2048, 3072, 4096)),
}

_BASELINE = {"variant": "capacity-only", "policy": "none", "label": "capacity-only"}
_GREEDY = {"variant": "asymmetric", "policy": "greedy", "label": "asym-greedy"}
_ORACLE = {"variant": "asymmetric", "policy": "best", "translation": False,
           "label": "oracle"}


def _grid_config(model: str, runs: List[dict]) -> dict:
    batch, seqs = MODEL_GRIDS[model]
    return {"model": model, "platform": "original", "batch_size": batch,
            "seq_lens": list(seqs), "runs": [_BASELINE] + runs, "seed": 1234}


PRESETS: Dict[str, dict] = {
    "fig5": _grid_config("gpt3-175b", [
        {"variant": "asymmetric", "policy": "best", "label": "head-aware"},
        {"variant": "asymmetric", "policy": "sublayer", "label": "sublayer-granular"},
    ]),
    "fig6": _grid_config("gpt3-175b", [
        {"variant": "asymmetric", "policy": "best", "label": "best"},
        {"variant": "asymmetric", "policy": "flexgen", "label": "flexgen"},
    ]),
    "fig7": _grid_config("gpt3-175b", [
        {"variant": "asymmetric", "policy": "best", "label": "best"},
        {"variant": "asymmetric", "policy": "q-major", "label": "q-major"},
        {"variant": "asymmetric", "policy": "a-major", "label": "a-major"},
        {"variant": "asymmetric", "policy": "f-major", "label": "f-major"},
    ]),
    "fig9": _grid_config("gpt3-175b", [
        {"variant": "hierarchical", "policy": "none", "label": "hierarchical"},
        dict(_GREEDY), dict(_ORACLE),
    ]),
    "fig11": _grid_config("gpt3-175b", [dict(_GREEDY)]),
    "fig12": _grid_config("chinchilla-70b", [
        {"variant": "hierarchical", "policy": "none", "label": "hierarchical"},
        dict(_GREEDY), dict(_ORACLE),
    ]),
    "fig13": _grid_config("llama2-70b", [
        {"variant": "hierarchical", "policy": "none", "label": "hierarchical"},
        dict(_GREEDY), dict(_ORACLE),
    ]),
    "fig15": _grid_config("gpt3-175b", [
        dict(_GREEDY),
        {"variant": "multi-hbm:8", "policy": "none", "label": "8-hbm"},
    ]),
    "fig16": _grid_config("gpt3-175b", [
        dict(_GREEDY),
        {"variant": "multi-hbm:8", "policy": "none", "label": "8-hbm"},
    ]),
    "fig14": {
        "model": "gpt3-175b", "platform": "original", "batch_size": 32,
        "seed": 1234,
        "dynamic": {"iterations": 128, "termination_prob": 0.03125,
                    "prompt_min": 256, "prompt_max": 1536},
        "runs": [dict(_GREEDY), dict(_ORACLE),
                 {"variant": "asymmetric", "policy": "flexgen", "label": "flexgen"}],
    },
    "table3": {"models": list(MODEL_GRIDS), "platform": "original", "seed": 1234},
    "frag": {"model": "gpt3-175b", "platform": "original", "batch_size": 32,
             "seed": 1234, "page_size": 2 * 1024 * 1024},
    "sensitivity": _grid_config("gpt3-175b", [dict(_GREEDY)]),
}
PRESETS["dynamic"] = PRESETS["fig14"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def _write_csv(path: str, schema: str, header: List[str], rows: List[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(schema + "\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[h]) for h in header) + "\n")


def _load_config(args) -> dict:
    cfg: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset: {args.preset}")
        cfg = json.loads(json.dumps(PRESETS[args.preset]))  # deep copy
    if args.config:
        try:
            with open(args.config) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}:{e.lineno}: {e.msg}")
        cfg.update(user)
    if not cfg:
        raise ConfigError("provide --config and/or --preset")
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 1234)
    cfg.setdefault("platform", "original")
    if args.no_translation:
        cfg["translation"] = False
    cfg.setdefault("translation", True)
    cfg["barrier"] = args.barrier
    cfg["frag_mode"] = args.frag_mode
    if args.trace:
        cfg["trace"] = True
    return cfg


def _run_flags(cfg: dict, run: dict) -> dict:
    return {
        "translation": run.get("translation", cfg.get("translation", True)),
        "barrier": cfg.get("barrier", "stage"),
        "serial_stages": run.get("policy") == "sublayer",
    }


def _sweep_cell(model, platform, cfg, run, batch, seq, trace=None):
    variant = SystemVariant.parse(run["variant"])
    policy = run.get("policy") or "greedy"
    if variant.kind != "asymmetric":
        policy = "greedy"
    rep = run_point(model, batch, seq, platform, variant, policy,
                    trace=trace, **_run_flags(cfg, run))
    return rep


def _write_trace(out_dir: str, name: str, events: list) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def _write_json(path: str, payload) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def cmd_sweep(cfg: dict, out_dir: str, jobs: int) -> str:
    if "models" in cfg:  # table3-style overhead summary
        return _cmd_table3(cfg, out_dir, jobs)
    model = _model(cfg["model"])
    platform = _platform(cfg["platform"])
    batch = int(cfg["batch_size"])
    seqs = [int(s) for s in cfg.get("seq_lens", [])]
    if not seqs:
        raise ConfigError("seq_lens grid must be non-empty")
    runs = cfg.get("runs") or [_BASELINE, dict(_GREEDY)]
    baseline_spec = cfg.get("baseline", _BASELINE)

    cells = [(run, seq) for run in runs for seq in seqs]
    want_trace = bool(cfg.get("trace"))

    def work(cell):
        run, seq = cell
        trace = [] if want_trace else None
        rep = _sweep_cell(model, platform, cfg, run, batch, seq, trace)
        if want_trace:
            label = run.get("label") or run["variant"]
            _write_trace(out_dir, f"trace_{label}_s{seq}.jsonl", trace)
        return rep

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        reports = list(pool.map(work, cells))
    base_reports = {}
    for (run, seq), rep in zip(cells, reports):
        if (run.get("label") or run["variant"]) == (baseline_spec.get("label")
                                                    or baseline_spec["variant"]):
            base_reports[seq] = rep
    if not base_reports:
        for seq in seqs:
            base_reports[seq] = _sweep_cell(model, platform, cfg, baseline_spec,
                                            batch, seq)
    rows = []
    cap_bytes = platform.bandwidth_tier.capacity
    for (run, seq), rep in zip(cells, reports):
        it = rep.iterations[0]
        hbm_total = sum(it.footprint_bw.values())
        rows.append({
            "model": model.name,
            "platform": cfg["platform"] if isinstance(cfg["platform"], str) else "custom",
            "variant": run["variant"], "policy": run.get("policy") or "none",
            "label": run.get("label") or run["variant"],
            "batch": batch, "seq": seq,
            "latency_s": rep.mean_latency,
            "speedup": speedup(base_reports[seq], rep),
            "busy_bandwidth_s": it.busy["bandwidth"],
            "busy_capacity_s": it.busy["capacity"],
            "barrier_wait_s": it.barrier_wait,
            "hbm_qkv_bytes": it.footprint_bw["qkv-linear"],
            "hbm_attention_bytes": it.footprint_bw["attention"],
            "hbm_fc_bytes": it.footprint_bw["fc"],
            "hbm_activation_bytes": it.footprint_bw["activations"],
            "hbm_utilization": hbm_total / cap_bytes,
            "tlb_misses_bandwidth": it.tlb_misses["bandwidth"],
            "tlb_misses_capacity": it.tlb_misses["capacity"],
            "energy_per_token_j": rep.energy_per_token(),
            "n_qkv": it.mapping.n_qkv, "n_attention": it.mapping.n_attention,
            "n_fc": it.mapping.n_fc,
        })
    rows.sort(key=lambda r: (r["label"], r["seq"]))
    header = ["model", "platform", "variant", "policy", "label", "batch", "seq",
              "latency_s", "speedup", "busy_bandwidth_s", "busy_capacity_s",
              "barrier_wait_s", "hbm_qkv_bytes", "hbm_attention_bytes",
              "hbm_fc_bytes", "hbm_activation_bytes", "hbm_utilization",
              "tlb_misses_bandwidth", "tlb_misses_capacity",
              "energy_per_token_j", "n_qkv", "n_attention", "n_fc"]
    path = os.path.join(out_dir, "sweep.csv")
    _write_csv(path, SWEEP_SCHEMA, header, rows)
    _write_json(os.path.join(out_dir, "sweep.json"),
                {"schema": SWEEP_SCHEMA.lstrip("# "), "rows": rows})
    return path


def _cmd_table3(cfg: dict, out_dir: str, jobs: int) -> str:
    platform = _platform(cfg["platform"])
    rows = []
    for name in cfg["models"]:
        model = load_model(name)
        batch, seqs = MODEL_GRIDS[name]
        lat = {}
        for key, policy, translation in (("greedy_on", "greedy", True),
                                         ("greedy_off", "greedy", False),
                                         ("best_off", "best", False)):
            vals = []
            for s in seqs:
                rep = run_point(model, batch, s, platform,
                                SystemVariant("asymmetric"), policy,
                                translation=translation)
                vals.append(rep.mean_latency)
            lat[key] = sum(vals) / len(vals)
        abstraction = lat["greedy_on"] / lat["greedy_off"] - 1.0
        mapping_gap = lat["greedy_off"] / lat["best_off"] - 1.0
        rows.append({"model": model.name,
                     "abstraction_overhead": abstraction,
                     "mapping_overhead": mapping_gap,
                     "total_overhead": lat["greedy_on"] / lat["best_off"] - 1.0})
    header = ["model", "abstraction_overhead", "mapping_overhead", "total_overhead"]
    path = os.path.join(out_dir, "overheads.csv")
    _write_csv(path, TABLE_SCHEMA, header, rows)
    return path


def cmd_dynamic(cfg: dict, out_dir: str, jobs: int) -> str:
    if "dynamic" not in cfg:
        raise ConfigError("dynamic command requires a 'dynamic' section")
    model = _model(cfg["model"])
    platform = _platform(cfg["platform"])
    dyn = cfg["dynamic"]
    scen = ScenarioConfig(
        batch_size=int(cfg["batch_size"]),
        iterations=int(dyn.get("iterations", 128)),
        seed=int(cfg["seed"]),
        initial_seq_len=dyn.get("initial_seq_len"),
        termination=ScenarioPolicy(
            termination_prob=float(dyn.get("termination_prob", 0.0)),
            prompt_min=int(dyn.get("prompt_min", 1)),
            prompt_max=int(dyn.get("prompt_max", model.max_seq_len)),
        ),
    )
    checkpoints = {1, 32, 64, 96, 128}
    base = run_generation(model, scen, "greedy", platform,
                          SystemVariant("capacity-only"),
                          translation=cfg.get("translation", True))
    runs = cfg.get("runs") or [dict(_GREEDY)]
    rows = []
    for run in runs:
        variant = SystemVariant.parse(run["variant"])
        rep = run_generation(model, scen, run.get("policy") or "greedy",
                             platform, variant, **_run_flags(cfg, run))
        label = run.get("label") or run["variant"]
        cum_base = cum_subj = 0.0
        for i, (it_b, it_s) in enumerate(zip(base.iterations, rep.iterations), 1):
            cum_base += it_b.total_latency
            cum_subj += it_s.total_latency
            rows.append({
                "policy": label, "iteration": i,
                "checkpoint": 1 if i in checkpoints else 0,
                "kv_bytes": it_s.kv_bytes_total,
                "n_qkv": it_s.mapping.n_qkv,
                "n_attention": it_s.mapping.n_attention,
                "n_fc": it_s.mapping.n_fc,
                "migration_bytes": it_s.migration_bytes,
                "latency_s": it_s.total_latency,
                "baseline_latency_s": it_b.total_latency,
                "running_speedup": cum_base / cum_subj,
            })
    rows.sort(key=lambda r: (r["policy"], r["iteration"]))
    header = ["policy", "iteration", "checkpoint", "kv_bytes", "n_qkv",
              "n_attention", "n_fc", "migration_bytes", "latency_s",
              "baseline_latency_s", "running_speedup"]
    path = os.path.join(out_dir, "dynamic.csv")
    _write_csv(path, DYNAMIC_SCHEMA, header, rows)
    _write_json(os.path.join(out_dir, "dynamic.json"),
                {"schema": DYNAMIC_SCHEMA.lstrip("# "), "rows": rows})
    return path


def cmd_frag(cfg: dict, out_dir: str, jobs: int) -> str:
    model = _model(cfg["model"])
    platform = _platform(cfg["platform"])
    page = int(cfg.get("page_size", platform.translation.page_size))
    mode = cfg.get("frag_mode", "slack")
    batch_size = int(cfg["batch_size"])
    if "seq_lens" in cfg and cfg["seq_lens"]:
        lens = [int(s) for s in cfg["seq_lens"]]
        if len(lens) == 1:
            lens = lens * batch_size
        if len(lens) != batch_size:
            raise ConfigError("seq_lens must have batch_size entries (or one)")
        batch = BatchState(batch_size, tuple(lens))
    else:
        import random as _random
        rng = _random.Random(cfg["seed"])
        batch = BatchState(batch_size, tuple(
            rng.randint(1, model.max_seq_len) for _ in range(batch_size)))
    rows = fragmentation_rows(model, batch, page, mode)
    total = fragmentation_report(model, batch, page, mode)
    rows.append({"sublayer": "total",
                 "unit_count": sum(r["unit_count"] for r in rows),
                 "unit_bytes": sum(r["unit_bytes"] for r in rows),
                 "waste_bytes": total})
    frac = total / platform.bandwidth_tier.capacity
    for r in rows:
        r["fraction_of_bandwidth_capacity"] = (
            frac if r["sublayer"] == "total"
            else r["waste_bytes"] / platform.bandwidth_tier.capacity)
    header = ["sublayer", "unit_count", "unit_bytes", "waste_bytes",
              "fraction_of_bandwidth_capacity"]
    path = os.path.join(out_dir, "fragmentation.csv")
    _write_csv(path, FRAG_SCHEMA, header, rows)
    return path


def cmd_sensitivity(cfg: dict, out_dir: str, jobs: int) -> str:
    model = _model(cfg.get("model", "gpt3-175b"))
    batch = int(cfg.get("batch_size", MODEL_GRIDS["gpt3-175b"][0]))
    seqs = [int(s) for s in cfg.get("seq_lens", MODEL_GRIDS["gpt3-175b"][1])]

    cells = [(preset, seq) for preset in SENSITIVITY_PRESETS for seq in seqs]

    def work(cell):
        preset, seq = cell
        platform = load_platform(preset)
        base = run_point(model, batch, seq, platform,
                         SystemVariant("capacity-only"), "greedy",
                         translation=cfg.get("translation", True))
        subj = run_point(model, batch, seq, platform,
                         SystemVariant("asymmetric"), "greedy",
                         translation=cfg.get("translation", True))
        return speedup(base, subj), subj.mean_latency

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        results = list(pool.map(work, cells))
    rows = []
    for (preset, seq), (sp, lat) in zip(cells, results):
        rows.append({"preset": preset, "model": model.name, "batch": batch,
                     "seq": seq, "variant": "asymmetric", "policy": "greedy",
                     "latency_s": lat, "speedup": sp})
    rows.sort(key=lambda r: (r["preset"], r["seq"]))
    header = ["preset", "model", "batch", "seq", "variant", "policy",
              "latency_s", "speedup"]
    path = os.path.join(out_dir, "sensitivity.csv")
    _write_csv(path, SENSITIVITY_SCHEMA, header, rows)
    return path


COMMANDS = {"sweep": cmd_sweep, "dynamic": cmd_dynamic, "frag": cmd_frag,
            "sensitivity": cmd_sensitivity}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="asymsim",
        description="Asymmetric-memory LLM decode simulator experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON experiment config (see docs/config.md)")
    p.add_argument("--preset", help="built-in reproduction preset, e.g. fig9")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-translation", action="store_true")
    p.add_argument("--barrier", choices=("stage", "kernel"), default="stage")
    p.add_argument("--frag-mode", choices=("residue", "slack"), default="slack")
    p.add_argument("--trace", action="store_true",
                   help="dump per-kernel event traces next to the CSV")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        path = COMMANDS[args.command](cfg, args.out, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OutOfMemoryError as e:
        print(f"out of memory: {e}", file=sys.stderr)
        return 3
    except BudgetExceededError as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return 4
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
