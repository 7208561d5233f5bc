"""Generation-phase execution engine.

Runs decode iterations of the fused-kernel DAG on two per-tier timelines with
stage barriers, replays page-granular access sets through the per-tier TLBs,
applies the iteration-boundary events (mapping decision, allocation,
migration) and accumulates latency, footprint and energy.

Also implements the comparison variants: the capacity-only baseline (both
chips beside the capacity tier), strict hierarchical memory (compute beside
the bandwidth tier, the overflow streamed on demand) and a multi-module
bandwidth-only system with per-stage all-reduces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, OutOfMemoryError, ResidencyFault
from .hardware import PlatformSpec, compute_time, kernel_time
from .mapping import (ALL_CAPACITY, MappingDecision, capacity_budgets,
                      exhaustive_best, flexgen_map, greedy_map, major_map,
                      parse_static_policy, plan_migration, side_split_bytes,
                      sublayer_best)
from .memsim import MemoryState
from .workload import (BatchState, KernelDesc, ModelSpec, ScenarioPolicy,
                       Side, SublayerKind, advance_batch, build_layer_kernels,
                       footprint, mapping_counts, split_even,
                       stage_handoff_bytes)

STAGES = (SublayerKind.QKV_LINEAR, SublayerKind.ATTENTION, SublayerKind.FC)


@dataclass(frozen=True)
class SystemVariant:
    kind: str  # capacity-only | hierarchical | asymmetric | multi-hbm
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("capacity-only", "hierarchical", "asymmetric", "multi-hbm"):
            raise ConfigError(f"unknown system variant: {self.kind}")
        if self.kind == "multi-hbm" and self.k < 2:
            raise ConfigError("multi-hbm requires k >= 2")

    @staticmethod
    def parse(text: str) -> "SystemVariant":
        if text.startswith("multi-hbm"):
            k = int(text.split(":", 1)[1]) if ":" in text else 8
            return SystemVariant("multi-hbm", k)
        return SystemVariant(text)


ASYMMETRIC = SystemVariant("asymmetric")


@dataclass
class IterationReport:
    latency: float
    busy: Dict[str, float]
    barrier_wait: float
    migration_bytes: int
    migration_time: float
    tlb_hits: Dict[str, int]
    tlb_misses: Dict[str, int]
    footprint_bw: Dict[str, int]
    mapping: MappingDecision
    energy: float
    bytes_by_tier: Dict[str, int]
    interconnect_bytes: int
    iteration: int = 0
    kv_bytes_total: int = 0

    @property
    def total_latency(self) -> float:
        """Kernel timeline plus the boundary migration that preceded it."""
        return self.latency + self.migration_time

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "latency_s": self.latency,
            "migration_time_s": self.migration_time,
            "migration_bytes": self.migration_bytes,
            "busy_bandwidth_s": self.busy["bandwidth"],
            "busy_capacity_s": self.busy["capacity"],
            "barrier_wait_s": self.barrier_wait,
            "tlb_misses_bandwidth": self.tlb_misses["bandwidth"],
            "tlb_misses_capacity": self.tlb_misses["capacity"],
            "hbm_qkv_bytes": self.footprint_bw["qkv-linear"],
            "hbm_attention_bytes": self.footprint_bw["attention"],
            "hbm_fc_bytes": self.footprint_bw["fc"],
            "hbm_activation_bytes": self.footprint_bw["activations"],
            "n_qkv": self.mapping.n_qkv,
            "n_attention": self.mapping.n_attention,
            "n_fc": self.mapping.n_fc,
            "kv_bytes_total": self.kv_bytes_total,
            "energy_j": self.energy,
        }


@dataclass
class RunReport:
    iterations: List[IterationReport]
    scenario_key: tuple
    variant: SystemVariant
    policy: str

    @property
    def mean_latency(self) -> float:
        return sum(r.total_latency for r in self.iterations) / len(self.iterations)

    @property
    def energy_total(self) -> float:
        return sum(r.energy for r in self.iterations)

    def energy_per_token(self) -> float:
        batch_size = self.scenario_key[1]
        return self.energy_total / (len(self.iterations) * batch_size)


def speedup(baseline: RunReport, subject: RunReport) -> float:
    if baseline.scenario_key != subject.scenario_key:
        raise ConfigError("speedup requires matching scenarios")
    return baseline.mean_latency / subject.mean_latency


def energy_per_token(report: RunReport, params=None) -> float:
    """Recompute per-token energy from the stored per-iteration traffic."""
    total = 0.0
    for it in report.iterations:
        if params is None:
            total += it.energy
        else:
            total += _iteration_energy(
                it.bytes_by_tier, it.interconnect_bytes, it.total_latency,
                _static_modules(report.variant), params)
    return total / (len(report.iterations) * report.scenario_key[1])


def _static_modules(variant: SystemVariant) -> Dict[str, int]:
    if variant.kind == "capacity-only":
        return {"bandwidth": 0, "capacity": 1}
    if variant.kind == "multi-hbm":
        return {"bandwidth": variant.k, "capacity": 0}
    return {"bandwidth": 1, "capacity": 1}


def _iteration_energy(bytes_by_tier, interconnect_bytes, latency, modules, params) -> float:
    e = bytes_by_tier["bandwidth"] * params.bandwidth_dynamic_pj_per_byte * 1e-12
    e += bytes_by_tier["capacity"] * params.capacity_dynamic_pj_per_byte * 1e-12
    e += latency * (modules["bandwidth"] * params.bandwidth_static_watts
                    + modules["capacity"] * params.capacity_static_watts)
    e += interconnect_bytes * params.interconnect_pj_per_byte * 1e-12
    return e


# ---------------------------------------------------------------------------
# variant execution context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantContext:
    variant: SystemVariant
    platform: PlatformSpec          # adjusted platform the kernels run on
    mapping_override: Optional[MappingDecision]
    resident_fraction: float = 1.0  # hierarchical: share served at tier speed
    comm_per_stage: bool = False    # multi-hbm all-reduce at each barrier


def make_context(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
                 variant: SystemVariant) -> VariantContext:
    nh = model.num_heads
    all_bw = MappingDecision(n_attention=nh, n_qkv=nh, n_fc=nh)
    if variant.kind == "capacity-only":
        chips = platform.bandwidth_chips + platform.capacity_chips
        p = replace(platform, capacity_chips=chips)
        return VariantContext(variant, p, ALL_CAPACITY)
    if variant.kind == "hierarchical":
        fp = footprint(model, batch)
        data = fp.weights + fp.kv_cache
        usable = platform.bandwidth_tier.capacity - fp.activations
        if usable <= 0:
            raise OutOfMemoryError("bandwidth tier cannot hold the activations")
        h = min(1.0, usable / data) if data else 1.0
        return VariantContext(variant, platform, all_bw, resident_fraction=h)
    if variant.kind == "multi-hbm":
        k = variant.k
        tier = platform.bandwidth_tier
        scaled = replace(tier, capacity=tier.capacity * k, bandwidth=tier.bandwidth * k)
        p = replace(platform, bandwidth_tier=scaled, bandwidth_chips=k)
        fp = footprint(model, batch)
        if fp.total > scaled.capacity:
            raise OutOfMemoryError("multi-hbm variant cannot hold the footprint")
        return VariantContext(variant, p, all_bw, comm_per_stage=True)
    return VariantContext(variant, platform, None)


def _kernel_duration(k: KernelDesc, ctx: VariantContext, exposed_misses: int,
                     translation_on: bool) -> float:
    p = ctx.platform
    if ctx.variant.kind == "hierarchical" and k.total_bytes:
        h = ctx.resident_fraction
        stream_bw = min(p.capacity_tier.bandwidth, p.interconnect_bandwidth)
        t_mem = k.total_bytes * (h / p.bandwidth_tier.bandwidth
                                 + (1.0 - h) / stream_bw)
        t = max(compute_time(k, p.chip_per_tier, p.chips(k.side)), t_mem)
        t += p.tier(k.side).access_latency + p.chip_per_tier.launch_overhead
        if translation_on and exposed_misses:
            t += exposed_misses * p.translation.miss_latency
        return t
    misses = exposed_misses if translation_on else 0
    return kernel_time(k, k.side, p, misses)


# ---------------------------------------------------------------------------
# memory image wired to the kernel DAG
# ---------------------------------------------------------------------------

WEIGHT_MATRICES = {
    SublayerKind.QKV_LINEAR: (("wq", "dd"), ("wk", "dk"), ("wv", "dk")),
    SublayerKind.FC: (("wproj", "dd"), ("wffn1", "do"), ("wffn2", "do")),
}


def _matrix_bytes_per_layer(model: ModelSpec, shape: str) -> int:
    d, o = model.model_dim, model.ffn_dim
    bpe = model.bytes_per_element
    return {"dd": d * d * bpe, "dk": d * model.kv_dim * bpe, "do": d * o * bpe}[shape]


def setup_memory(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
                 mapping: MappingDecision) -> MemoryState:
    """Register and allocate every tensor pool as the mapping prescribes."""
    state = MemoryState(platform)
    nh = model.num_heads
    L = model.num_layers
    counts = mapping_counts(mapping)
    for sub, mats in WEIGHT_MATRICES.items():
        n = counts[sub]
        for name, shape in mats:
            per_layer = _matrix_bytes_per_layer(model, shape)
            fam = state.register_family(f"w:{name}", sub, nh, per_layer * L)
            bw_slice = split_even(per_layer, n, nh)[0]
            state.allocate_bytes(fam.bw_owner, bw_slice * L)
            state.allocate_bytes(fam.cap_owner, (per_layer - bw_slice) * L)
    tok = model.kv_dim * model.bytes_per_element  # per token per layer
    n_a = counts[SublayerKind.ATTENTION]
    reserve = model.max_seq_len * tok * L
    for i, s in enumerate(batch.seq_lens):
        for comp in ("k", "v"):
            fam = state.register_family(f"kv:{i}:{comp}",
                                        SublayerKind.ATTENTION, nh, reserve)
            bw_tok = split_even(tok, n_a, nh)[0]
            state.allocate_bytes(fam.bw_owner, bw_tok * s * L)
            state.allocate_bytes(fam.cap_owner, (tok - bw_tok) * s * L)
    bpe = model.bytes_per_element
    b, d, o = batch.batch_size, model.model_dim, model.ffn_dim
    act_buffers = (
        ("residual-stream", b * d * bpe),
        ("qkv-out", b * (d + 2 * model.kv_dim) * bpe),
        ("scores", model.num_heads * model.max_seq_len * b * bpe),
        ("ffn-buffer", b * (o + d) * bpe),
    )
    for name, size in act_buffers:
        for side in Side:
            key = f"act:{name}:{side.value}"
            state.register_owner(key, side, size)
            state.allocate_bytes(key, size)
    state.audit()
    return state


class PageReplayer:
    """Produces per-kernel logical page sets and drives the per-tier TLBs.

    Weight pools are laid out layer-major, so a layer's kernel touches one
    contiguous slice.  KV pools grow token-major; their pages are each
    translated once per iteration and the resulting misses are attributed
    evenly across the layers' attention kernels.
    """

    def __init__(self, state: MemoryState, model: ModelSpec, batch: BatchState,
                 mapping: MappingDecision):
        self.state = state
        self.model = model
        self.batch = batch
        self.counts = mapping_counts(mapping)
        self._kv_misses: Dict[Tuple[Side, str], Tuple[int, int]] = {}

    def _translate_range(self, side: Side, pages) -> int:
        tlb = self.state.tlbs[side]
        table = self.state.tables[side]
        misses = 0
        for p in pages:
            _, hit = tlb.access(p, table)
            if not hit:
                misses += 1
        return misses

    def _pool_slice_pages(self, owner_key: str, offset: int, length: int):
        pool = self.state.owners[owner_key]
        if length <= 0 or pool.bytes_used == 0:
            return range(0)
        length = min(length, max(pool.bytes_used - offset, 0))
        return pool.logical_range_for(offset, length, self.state.page_size)

    def _kv_stage_misses(self, side: Side, comp: str) -> Tuple[int, int]:
        """Translate every page of the side's K or V pools once; returns
        (per_layer_share, remainder) of the miss count."""
        key = (side, comp)
        if key not in self._kv_misses:
            misses = 0
            for i in range(self.batch.batch_size):
                fam = self.state.families[f"kv:{i}:{comp}"]
                owner = fam.bw_owner if side is Side.BANDWIDTH else fam.cap_owner
                pool = self.state.owners[owner]
                misses += self._translate_range(side, pool.logical_pages())
            L = self.model.num_layers
            self._kv_misses[key] = (misses // L, misses % L)
        return self._kv_misses[key]

    def misses_for(self, kernel: KernelDesc, layer: int) -> int:
        side = kernel.side
        name = kernel.id.rsplit(".", 1)[1]
        n = self.counts[kernel.sublayer]
        misses = 0
        if name == "gemm":  # fused qkv projection
            for mat, shape in WEIGHT_MATRICES[SublayerKind.QKV_LINEAR]:
                misses += self._weights(side, mat, shape, n, layer)
            misses += self._acts(side, "residual-stream", "qkv-out")
        elif name in ("proj", "ffn1", "ffn2"):
            mat = {"proj": "wproj", "ffn1": "wffn1", "ffn2": "wffn2"}[name]
            shape = "dd" if name == "proj" else "do"
            misses += self._weights(side, mat, shape, n, layer)
            misses += self._acts(side, "residual-stream", "ffn-buffer")
        elif name in ("qk", "av"):
            comp = "k" if name == "qk" else "v"
            share, rem = self._kv_stage_misses(side, comp)
            misses += share + (1 if layer < rem else 0)
            misses += self._acts(side, "scores")
        else:  # vector kernels
            misses += self._acts(side, "residual-stream")
        return misses

    def _weights(self, side: Side, mat: str, shape: str, n: int, layer: int) -> int:
        per_layer = _matrix_bytes_per_layer(self.model, shape)
        bw_slice = split_even(per_layer, n, self.model.num_heads)[0]
        length = bw_slice if side is Side.BANDWIDTH else per_layer - bw_slice
        fam = self.state.families[f"w:{mat}"]
        owner = fam.bw_owner if side is Side.BANDWIDTH else fam.cap_owner
        return self._translate_range(
            side, self._pool_slice_pages(owner, layer * length, length))

    def _acts(self, side: Side, *names: str) -> int:
        misses = 0
        for name in names:
            key = f"act:{name}:{side.value}"
            pool = self.state.owners.get(key)
            if pool is None or pool.bytes_used == 0:
                continue
            misses += self._translate_range(side, pool.logical_pages())
        return misses


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

def _stage_groups(kernels: List[KernelDesc]) -> List[Tuple[SublayerKind, Dict[Side, List[KernelDesc]]]]:
    stages = []
    for sub in STAGES:
        per_side: Dict[Side, List[KernelDesc]] = {}
        for k in kernels:
            if k.sublayer is sub:
                per_side.setdefault(k.side, []).append(k)
        stages.append((sub, per_side))
    return stages


def _transfer_times(model: ModelSpec, batch: BatchState, counts: Dict, ctx: VariantContext) -> Dict[str, float]:
    """Interconnect time charged at each stage boundary."""
    handoff = stage_handoff_bytes(model, batch)
    nh = model.num_heads
    p = ctx.platform
    w = p.interconnect_bandwidth
    n_q, n_a, n_f = (counts[SublayerKind.QKV_LINEAR],
                     counts[SublayerKind.ATTENTION], counts[SublayerKind.FC])

    if ctx.comm_per_stage:  # multi-hbm all-reduce per stage
        k = ctx.variant.k
        out = {}
        for key, nbytes in (("qkv->attn", handoff["qkv->attn"]),
                            ("attn->fc", handoff["attn->fc"]),
                            ("fc->next", handoff["fc->next"])):
            out[key] = 2 * (k - 1) / k * nbytes / w + k * p.per_hop_latency
        out["fc-internal"] = 0.0
        out["_bytes"] = int(sum(2 * (k - 1) / k * handoff[key] for key in
                                ("qkv->attn", "attn->fc", "fc->next")))
        return out

    if ctx.variant.kind != "asymmetric":
        return {"qkv->attn": 0.0, "attn->fc": 0.0, "fc-internal": 0.0,
                "fc->next": 0.0, "_bytes": 0}

    def cross(produced_n, consumer_n, nbytes):
        to_cap = nbytes * produced_n // nh if consumer_n < nh else 0
        to_bw = nbytes * (nh - produced_n) // nh if consumer_n > 0 else 0
        return to_cap, to_bw

    qa = abs(n_q - n_a) * handoff["qkv->attn"] // nh
    af = cross(n_a, n_f, handoff["attn->fc"])
    fi = cross(n_f, n_f, handoff["fc-internal"]) if 0 < n_f < nh else (0, 0)
    fq = cross(n_f, n_q, handoff["fc->next"])
    times = {
        "qkv->attn": qa / w,
        "attn->fc": max(af) / w,
        "fc-internal": max(fi) / w,
        "fc->next": max(fq) / w,
    }
    times["_bytes"] = int(qa + sum(af) + sum(fi) + sum(fq))
    return times


def run_iteration(model: ModelSpec, batch: BatchState, mapping: MappingDecision,
                  platform: PlatformSpec, memory: Optional[MemoryState] = None,
                  *, variant: SystemVariant = ASYMMETRIC,
                  serial_stages: bool = False, barrier: str = "stage",
                  translation: Optional[bool] = None,
                  trace: Optional[list] = None) -> IterationReport:
    """Simulate one generation iteration; returns its report.

    With a MemoryState the per-kernel page sets are replayed through the
    per-tier TLBs and the exposed translation stalls are charged; without
    one the run is purely analytic (translation-free).
    """
    ctx = make_context(model, batch, platform, variant)
    eff_mapping = ctx.mapping_override or mapping
    eff_mapping.validate(model)
    if translation is None:
        translation = platform.translation.enabled
    if memory is not None and variant.kind == "asymmetric":
        _check_residency(model, batch, memory, eff_mapping)

    kernels = build_layer_kernels(model, batch, eff_mapping, 0)
    counts = mapping_counts(eff_mapping)
    transfers = _transfer_times(model, batch, counts, ctx)
    replayer = None
    if memory is not None and translation:
        replay_mapping = eff_mapping if variant.kind == "asymmetric" else mapping
        replayer = PageReplayer(memory, model, batch, replay_mapping)

    frac = platform.translation.exposed_miss_fraction
    clock = {Side.BANDWIDTH: 0.0, Side.CAPACITY: 0.0}
    busy = {Side.BANDWIDTH: 0.0, Side.CAPACITY: 0.0}
    barrier_wait = 0.0
    bytes_by_tier = {Side.BANDWIDTH: 0, Side.CAPACITY: 0}
    stream_bytes = 0  # hierarchical on-demand traffic

    stage_list = _stage_groups(kernels)
    boundary_after = {SublayerKind.QKV_LINEAR: ("qkv->attn",),
                      SublayerKind.ATTENTION: ("attn->fc",),
                      SublayerKind.FC: ("fc-internal", "fc->next")}

    for layer in range(model.num_layers):
        for sub, per_side in stage_list:
            start = max(clock.values())
            if barrier == "kernel" and len(per_side) > 1:
                # sync the two sides after every fused kernel position
                t = start
                lists = list(per_side.values())
                for pos in range(max(len(l) for l in lists)):
                    ends = []
                    for side, ks in per_side.items():
                        if pos >= len(ks):
                            continue
                        d = _dur(ks[pos], ctx, replayer, layer, frac, translation)
                        busy[side] += d
                        _emit(trace, t, side, ks[pos], d, layer)
                        ends.append(t + d)
                    t = max(ends)
                for side in per_side:
                    clock[side] = t
            else:
                for side, ks in per_side.items():
                    t = start
                    for k in ks:
                        d = _dur(k, ctx, replayer, layer, frac, translation)
                        busy[side] += d
                        _emit(trace, t, side, k, d, layer)
                        t += d
                    clock[side] = t
                if serial_stages and len(per_side) > 1:
                    # naive granularity: the sides run one after the other
                    total = sum(clock[s] - start for s in per_side)
                    for side in per_side:
                        clock[side] = start + total
            if len(per_side) > 1:
                ends = [clock[s] for s in per_side]
                barrier_wait += max(ends) - min(ends)
            # stage bytes move on the executing tiers
            for side, ks in per_side.items():
                stage_bytes = sum(k.total_bytes for k in ks)
                if ctx.variant.kind == "hierarchical":
                    resident = int(stage_bytes * ctx.resident_fraction)
                    bytes_by_tier[Side.BANDWIDTH] += resident
                    bytes_by_tier[Side.CAPACITY] += stage_bytes - resident
                    stream_bytes += stage_bytes - resident
                else:
                    bytes_by_tier[side] += stage_bytes
            t_x = sum(transfers[b] for b in boundary_after[sub])
            if t_x:
                end = max(clock.values()) + t_x
                for side in clock:
                    clock[side] = end

    latency = max(clock.values())
    interconnect_bytes = transfers["_bytes"] * model.num_layers + stream_bytes

    hits = {s.value: (memory.tlbs[s].hits if memory else 0) for s in Side}
    misses = {s.value: (memory.tlbs[s].misses if memory else 0) for s in Side}

    fp_bw = _bandwidth_footprint(model, batch, eff_mapping, ctx)
    modules = _static_modules(variant)
    energy = _iteration_energy(
        {s.value: bytes_by_tier[s] for s in Side}, interconnect_bytes, latency,
        modules, platform.energy)
    return IterationReport(
        latency=latency,
        busy={s.value: busy[s] for s in Side},
        barrier_wait=barrier_wait,
        migration_bytes=0,
        migration_time=0.0,
        tlb_hits=hits,
        tlb_misses=misses,
        footprint_bw=fp_bw,
        mapping=eff_mapping,
        energy=energy,
        bytes_by_tier={s.value: bytes_by_tier[s] for s in Side},
        interconnect_bytes=interconnect_bytes,
        iteration=batch.iteration,
        kv_bytes_total=footprint(model, batch).kv_cache,
    )


def _dur(k: KernelDesc, ctx, replayer, layer, frac, translation) -> float:
    exposed = 0
    if replayer is not None:
        raw = replayer.misses_for(k, layer)
        exposed = int(raw * frac)
    return _kernel_duration(k, ctx, exposed, translation)


def _emit(trace, t, side, kernel, dur, layer):
    if trace is not None:
        kid = f"L{layer}" + kernel.id[kernel.id.index("."):]
        trace.append({"time": t, "tier": side.value, "kernel": kid,
                      "event": "start"})
        trace.append({"time": t + dur, "tier": side.value, "kernel": kid,
                      "event": "end"})


def _bandwidth_footprint(model, batch, mapping, ctx) -> Dict[str, int]:
    if ctx.variant.kind == "capacity-only":
        return {"qkv-linear": 0, "attention": 0, "fc": 0, "activations": 0}
    counts = mapping_counts(mapping)
    out = {}
    for sub, key in ((SublayerKind.QKV_LINEAR, "qkv-linear"),
                     (SublayerKind.ATTENTION, "attention"),
                     (SublayerKind.FC, "fc")):
        out[key] = side_split_bytes(model, batch, sub, counts[sub])[0]
    out["activations"] = footprint(model, batch).activations
    if ctx.variant.kind == "hierarchical":
        h = ctx.resident_fraction
        for sub in ("qkv-linear", "attention", "fc"):
            total = {"qkv-linear": model.num_layers * model.qkv_weight_bytes_per_layer(),
                     "attention": footprint(model, batch).kv_cache,
                     "fc": model.num_layers * model.fc_weight_bytes_per_layer()}[sub]
            out[sub] = int(total * h)
    elif ctx.variant.kind == "multi-hbm":
        # per bandwidth module: the shards spread evenly over k devices
        out = {key: val // ctx.variant.k for key, val in out.items()}
    return out


def _check_residency(model, batch, memory, mapping) -> None:
    # page-granular migration leaves at most a couple of pages of drift per
    # pool until the next reconcile; anything beyond that is a bug
    counts = mapping_counts(mapping)
    page = memory.page_size
    for name, fam in memory.families.items():
        n = counts[fam.sublayer]
        total = memory.owners[fam.bw_owner].bytes_used + memory.owners[fam.cap_owner].bytes_used
        want_bw = split_even(total, n, fam.groups)[0]
        have_bw = memory.owners[fam.bw_owner].bytes_used
        if abs(have_bw - want_bw) > 4 * page + total // 32:
            raise ResidencyFault(
                f"{name}: bandwidth-side bytes {have_bw} inconsistent with mapping "
                f"share {want_bw}")


# ---------------------------------------------------------------------------
# analytic evaluator (translation-free, identical arithmetic)
# ---------------------------------------------------------------------------

class AnalyticEvaluator:
    """Closed-form iteration latency as a function of the mapping.

    Matches run_iteration with translation disabled exactly; exposes a
    vectorized (N+1)^3 latency cube for the exhaustive searches.
    """

    def __init__(self, model: ModelSpec, batch: BatchState,
                 platform: PlatformSpec, variant: SystemVariant = ASYMMETRIC):
        self.model = model
        self.batch = batch
        self.platform = platform
        self.variant = variant
        self.ctx = make_context(model, batch, platform, variant)
        self._tables: Optional[dict] = None

    def latency(self, mapping: MappingDecision, serial_stages: bool = False) -> float:
        report = run_iteration(self.model, self.batch, mapping, self.platform,
                               None, variant=self.variant,
                               serial_stages=serial_stages, translation=False)
        return report.latency

    def _stage_tables(self) -> dict:
        if self._tables is not None:
            return self._tables
        nh = self.model.num_heads
        t_bw = {s: np.zeros(nh + 1) for s in STAGES}
        t_cap = {s: np.zeros(nh + 1) for s in STAGES}
        for n in range(nh + 1):
            m = MappingDecision(n_attention=n, n_qkv=n, n_fc=n)
            kernels = build_layer_kernels(self.model, self.batch, m, 0)
            for sub, per_side in _stage_groups(kernels):
                for side, ks in per_side.items():
                    tot = sum(_kernel_duration(k, self.ctx, 0, False) for k in ks)
                    (t_bw if side is Side.BANDWIDTH else t_cap)[sub][n] = tot
        self._tables = {"bw": t_bw, "cap": t_cap}
        return self._tables

    def latency_cube(self) -> np.ndarray:
        """Latency[nq, na, nf] under stage barriers (asymmetric variant)."""
        tables = self._stage_tables()
        nh = self.model.num_heads
        handoff = stage_handoff_bytes(self.model, self.batch)
        w = self.platform.interconnect_bandwidth
        L = self.model.num_layers

        def stage(sub):
            return np.maximum(tables["bw"][sub], tables["cap"][sub])

        tq = stage(SublayerKind.QKV_LINEAR)
        ta = stage(SublayerKind.ATTENTION)
        tf = stage(SublayerKind.FC)
        n = np.arange(nh + 1)

        qa = (np.abs(n[:, None] - n[None, :]) * handoff["qkv->attn"] // nh) / w

        def cross_cube(prod, cons, nbytes):
            to_cap = np.where(cons[None, :] < nh, nbytes * prod[:, None] // nh, 0)
            to_bw = np.where(cons[None, :] > 0, nbytes * (nh - prod[:, None]) // nh, 0)
            return np.maximum(to_cap, to_bw) / w

        af = cross_cube(n, n, handoff["attn->fc"])       # [na, nf]
        fi_vec = np.where((n > 0) & (n < nh),
                          np.maximum(handoff["fc-internal"] * n // nh,
                                     handoff["fc-internal"] * (nh - n) // nh), 0) / w
        fq = cross_cube(n, n, handoff["fc->next"])       # [nf, nq]

        cube = (tq[:, None, None] + ta[None, :, None] + tf[None, None, :]
                + qa[:, None, :].transpose(0, 2, 1)      # [nq, na]
                + af[None, :, :]
                + fi_vec[None, None, :]
                + fq.T[:, None, :])                      # [nq, nf] -> broadcast
        return cube * L


# ---------------------------------------------------------------------------
# mapping policies wired to the evaluator
# ---------------------------------------------------------------------------

class MappingPolicy:
    """Callable policy with optional per-run state (reset between runs)."""

    name = "static"

    def __init__(self, fn: Callable, name: str, frozen: bool = False):
        self._fn = fn
        self.name = name
        self.frozen = frozen
        self._cached: Optional[MappingDecision] = None

    def reset(self) -> None:
        self._cached = None

    def decide(self, model: ModelSpec, batch: BatchState,
               platform: PlatformSpec) -> MappingDecision:
        if self.frozen and self._cached is not None:
            d = self._cached
            return _clamp_feasible(model, batch, platform, d)
        d = self._fn(model, batch, platform)
        if self.frozen:
            self._cached = d
        return d


def _clamp_feasible(model, batch, platform, decision) -> MappingDecision:
    usable_bw, _ = capacity_budgets(model, batch, platform)
    used = 0
    out = {}
    for sub in (SublayerKind.ATTENTION, SublayerKind.QKV_LINEAR, SublayerKind.FC):
        n = {SublayerKind.ATTENTION: decision.n_attention,
             SublayerKind.QKV_LINEAR: decision.n_qkv,
             SublayerKind.FC: decision.n_fc}[sub]
        while n > 0 and used + side_split_bytes(model, batch, sub, n)[0] > usable_bw:
            n -= 1
        used += side_split_bytes(model, batch, sub, n)[0]
        out[sub] = n
    return MappingDecision(n_attention=out[SublayerKind.ATTENTION],
                           n_qkv=out[SublayerKind.QKV_LINEAR],
                           n_fc=out[SublayerKind.FC])


def make_policy(name: str, budget: int = 2_000_000) -> MappingPolicy:
    static = parse_static_policy(name)
    if static is not None:
        return MappingPolicy(lambda m, b, p: static, name)
    if name == "greedy":
        return MappingPolicy(greedy_map, name)
    if name == "flexgen":
        # offline placement: solved once per run, then held static
        return MappingPolicy(flexgen_map, name, frozen=True)
    if name == "best":
        def best(m, b, p):
            return exhaustive_best(m, b, p, AnalyticEvaluator(m, b, p), budget)
        return MappingPolicy(best, name)
    if name in ("q-major", "a-major", "f-major"):
        favored = {"q-major": SublayerKind.QKV_LINEAR,
                   "a-major": SublayerKind.ATTENTION,
                   "f-major": SublayerKind.FC}[name]
        def major(m, b, p, favored=favored):
            return major_map(m, b, p, AnalyticEvaluator(m, b, p), favored, budget)
        return MappingPolicy(major, name)
    if name == "sublayer":
        def sub(m, b, p):
            return sublayer_best(m, b, p, AnalyticEvaluator(m, b, p))
        return MappingPolicy(sub, name)
    raise ConfigError(f"unknown mapping policy: {name}")


# ---------------------------------------------------------------------------
# multi-iteration runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    batch_size: int
    iterations: int = 1
    seed: int = 0
    initial_seq_len: Optional[int] = None   # uniform start, or None to draw
    termination: ScenarioPolicy = field(default_factory=ScenarioPolicy)

    def key(self, model: ModelSpec) -> tuple:
        return (model.name, self.batch_size, self.iterations, self.seed,
                self.initial_seq_len, self.termination.termination_prob,
                self.termination.prompt_min, self.termination.prompt_max,
                self.termination.target_lens)

    def initial_batch(self, model: ModelSpec, rng: random.Random) -> BatchState:
        if self.initial_seq_len is not None:
            return BatchState.uniform(self.batch_size, self.initial_seq_len)
        hi = min(self.termination.prompt_max, model.max_seq_len)
        lens = tuple(rng.randint(self.termination.prompt_min, hi)
                     for _ in range(self.batch_size))
        return BatchState(self.batch_size, lens)


def _reconcile_kv(memory: MemoryState, model: ModelSpec, batch: BatchState,
                  mapping: MappingDecision) -> None:
    """Bring every KV pool to the size the batch and mapping prescribe.

    Idempotent: survivors gain one token's pages, terminated requests shrink
    or regrow to their new drawn length; a retry after an out-of-memory
    remap continues where the first pass stopped.
    """
    tok = model.kv_dim * model.bytes_per_element
    L = model.num_layers
    bw_tok = split_even(tok, mapping.n_attention, model.num_heads)[0]
    for i, s in enumerate(batch.seq_lens):
        for comp in ("k", "v"):
            fam = memory.families[f"kv:{i}:{comp}"]
            for owner, target in ((fam.bw_owner, bw_tok * s * L),
                                  (fam.cap_owner, (tok - bw_tok) * s * L)):
                have = memory.owners[owner].bytes_used
                if have < target:
                    memory.allocate_bytes(owner, target - have)
                elif have > target:
                    memory.truncate_bytes(owner, have - target)


def run_generation(model: ModelSpec, scenario: ScenarioConfig, policy,
                   platform: PlatformSpec, variant: SystemVariant = ASYMMETRIC,
                   *, translation: Optional[bool] = None,
                   barrier: str = "stage",
                   serial_stages: bool = False,
                   trace: Optional[list] = None) -> RunReport:
    """Run a generation scenario; deterministic under a fixed seed."""
    if isinstance(policy, str):
        policy = make_policy(policy)
    policy.reset()
    rng = random.Random(scenario.seed)
    batch = scenario.initial_batch(model, rng)
    # capacity-only also carries a live memory image so both sides of a
    # speedup pay the same translation costs; hierarchical and multi-hbm
    # placements do not fit the standard pools and stay analytic
    use_memory = variant.kind in ("asymmetric", "capacity-only")

    if variant.kind == "asymmetric":
        mapping = policy.decide(model, batch, platform)
    else:
        mapping = ALL_CAPACITY
    memory = setup_memory(model, batch, platform, mapping) if use_memory else None

    reports: List[IterationReport] = []
    pending_migration = (0, 0.0)
    for _ in range(scenario.iterations):
        rep = run_iteration(model, batch, mapping, platform, memory,
                            variant=variant, translation=translation,
                            barrier=barrier, serial_stages=serial_stages,
                            trace=trace)
        rep.migration_bytes, rep.migration_time = pending_migration
        pending_migration = (0, 0.0)
        reports.append(rep)
        if len(reports) == scenario.iterations:
            break
        batch = advance_batch(batch, scenario.termination, rng, model)
        mig_bytes, mig_time = 0, 0.0

        def migrate_to(new_mapping):
            nonlocal mapping, mig_bytes, mig_time
            if new_mapping == mapping or memory is None:
                mapping = new_mapping
                return
            plan = plan_migration(mapping, new_mapping, memory)
            mig_time += memory.execute_migration(plan)
            moved = plan.total_bytes(memory.page_size)
            mig_bytes += moved["toCapacity"] + moved["toBandwidth"]
            mapping = new_mapping

        if use_memory:
            for attempt in range(3 * model.num_heads):
                try:
                    _reconcile_kv(memory, model, batch, mapping)
                    break
                except OutOfMemoryError:
                    if variant.kind != "asymmetric":
                        raise
                    # evict: take the policy's fresh decision, then keep
                    # shrinking the bandwidth share in fc, qkv, attention order
                    fallback = policy.decide(model, batch, platform)
                    if fallback == mapping or attempt > 0:
                        fallback = _evict_one(mapping)
                    migrate_to(fallback)
            else:
                raise OutOfMemoryError("bandwidth tier cannot absorb the batch")
        if variant.kind == "asymmetric":
            migrate_to(policy.decide(model, batch, platform))
        pending_migration = (mig_bytes, mig_time)
    return RunReport(reports, scenario.key(model), variant, policy.name)


def _evict_one(mapping: MappingDecision) -> MappingDecision:
    if mapping.n_fc > 0:
        return replace(mapping, n_fc=mapping.n_fc - 1)
    if mapping.n_qkv > 0:
        return replace(mapping, n_qkv=mapping.n_qkv - 1)
    if mapping.n_attention > 0:
        return replace(mapping, n_attention=mapping.n_attention - 1)
    raise OutOfMemoryError("nothing left to evict from the bandwidth tier")


def run_variant(model: ModelSpec, scenario: ScenarioConfig,
                platform: PlatformSpec, variant: SystemVariant,
                policy: str = "greedy", **kw) -> RunReport:
    return run_generation(model, scenario, policy, platform, variant, **kw)


def run_point(model: ModelSpec, batch_size: int, seq_len: int,
              platform: PlatformSpec, variant: SystemVariant,
              policy: str = "greedy", **kw) -> RunReport:
    """Single-iteration measurement at a fixed (B, S) point."""
    scen = ScenarioConfig(batch_size=batch_size, iterations=1,
                          initial_seq_len=seq_len)
    return run_generation(model, scen, policy, platform, variant, **kw)
