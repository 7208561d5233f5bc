"""Kernel-memory mapping policies for the two-sided memory system.

A MappingDecision assigns `n` head/column-groups of each sublayer to the
bandwidth side (the remaining N-n go to the capacity side).  Policies:

* greedy_map      -- per-sublayer min-max balance in priority order
                     attention, qkv-linear, fc under residual capacity
* flexgen_map     -- host-offloading-style placement: one shared weight
                     fraction, FLOP+capacity cost model only
* exhaustive_best -- full (N+1)^3 search under an iteration-latency evaluator
* major_map       -- favored sublayer pinned at its capacity max, rest searched
* sublayer_best   -- whole-sublayer placement with serialized sides (the
                     naive granularity baseline)
* plan_migration  -- page moves implied by a mapping change
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .errors import BudgetExceededError, ConfigError, OutOfMemoryError
from .hardware import PlatformSpec, compute_time, peak_throughput
from .workload import (BatchState, ModelSpec, OpClass, Side, SublayerKind,
                       build_layer_kernels, footprint, split_even)

SUBLAYER_PRIORITY = (SublayerKind.ATTENTION, SublayerKind.QKV_LINEAR, SublayerKind.FC)


@dataclass(frozen=True)
class MappingDecision:
    n_attention: int
    n_qkv: int
    n_fc: int

    def count(self, sublayer: SublayerKind) -> int:
        return {SublayerKind.ATTENTION: self.n_attention,
                SublayerKind.QKV_LINEAR: self.n_qkv,
                SublayerKind.FC: self.n_fc}[sublayer]

    def as_tuple(self) -> tuple:
        return (self.n_qkv, self.n_attention, self.n_fc)

    def validate(self, model: ModelSpec) -> None:
        for n in (self.n_attention, self.n_qkv, self.n_fc):
            if not 0 <= n <= model.num_heads:
                raise OutOfMemoryError(
                    f"mapping count {n} outside [0, {model.num_heads}]")


ALL_CAPACITY = MappingDecision(0, 0, 0)


@dataclass(frozen=True)
class PeakExecParams:
    alpha_attention: Optional[float] = None
    alpha_qkv: Optional[float] = None
    alpha_fc: Optional[float] = None

    def __post_init__(self):
        for a in (self.alpha_attention, self.alpha_qkv, self.alpha_fc):
            if a is not None and a <= 0:
                raise ValueError("alpha multipliers must be positive")

    def alpha(self, sublayer: SublayerKind) -> Optional[float]:
        return {SublayerKind.ATTENTION: self.alpha_attention,
                SublayerKind.QKV_LINEAR: self.alpha_qkv,
                SublayerKind.FC: self.alpha_fc}[sublayer]


@dataclass(frozen=True)
class MigrationMove:
    owner: str
    page_count: int
    direction: str  # "toCapacity" | "toBandwidth"


@dataclass(frozen=True)
class MigrationPlan:
    moves: tuple

    def total_bytes(self, page_size: int) -> dict:
        out = {"toCapacity": 0, "toBandwidth": 0}
        for m in self.moves:
            out[m.direction] += m.page_count * page_size
        return out

    @property
    def empty(self) -> bool:
        return not self.moves


# ---------------------------------------------------------------------------
# resident-byte accounting and capacity budgets
# ---------------------------------------------------------------------------

def sublayer_resident_bytes(model: ModelSpec, batch: BatchState,
                            sublayer: SublayerKind) -> int:
    """Total placed bytes of one sublayer (weights, or KV for attention)."""
    if sublayer is SublayerKind.QKV_LINEAR:
        return model.num_layers * model.qkv_weight_bytes_per_layer()
    if sublayer is SublayerKind.FC:
        return model.num_layers * model.fc_weight_bytes_per_layer()
    return 2 * model.num_layers * model.kv_dim * model.bytes_per_element * batch.total_tokens


def side_split_bytes(model: ModelSpec, batch: BatchState,
                     sublayer: SublayerKind, n: int) -> tuple:
    return split_even(sublayer_resident_bytes(model, batch, sublayer), n, model.num_heads)


def capacity_reserve(model: ModelSpec, batch: BatchState, page_size: int,
                     window: int = 1) -> int:
    """Headroom withheld from the placement budget: activation replicas, the
    KV pages of the next scheduling window, and per-owner page slack."""
    growth = window * batch.batch_size * model.kv_bytes_per_token()
    owners = 2 * 2 * batch.batch_size + 12 + 8  # kv pools + weight + act pools
    return footprint(model, batch).activations + growth + owners * page_size


def capacity_budgets(model: ModelSpec, batch: BatchState,
                     platform: PlatformSpec, window: int = 1) -> tuple:
    page = platform.translation.page_size
    reserve = capacity_reserve(model, batch, page, window)
    usable_bw = max(platform.bandwidth_tier.capacity - reserve, 0)
    usable_cap = max(platform.capacity_tier.capacity - reserve, 0)
    return usable_bw, usable_cap


def check_total_fits(model: ModelSpec, batch: BatchState,
                     platform: PlatformSpec) -> None:
    usable_bw, usable_cap = capacity_budgets(model, batch, platform)
    total = sum(sublayer_resident_bytes(model, batch, s) for s in SUBLAYER_PRIORITY)
    if total > max(usable_bw, 0) + max(usable_cap, 0):
        raise OutOfMemoryError(
            f"footprint {total} exceeds combined usable capacity")


def feasible(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
             decision: MappingDecision) -> bool:
    usable_bw, usable_cap = capacity_budgets(model, batch, platform)
    bw = cap = 0
    for sub in SUBLAYER_PRIORITY:
        b, c = side_split_bytes(model, batch, sub, decision.count(sub))
        bw += b
        cap += c
    return bw <= usable_bw and cap <= usable_cap


# ---------------------------------------------------------------------------
# peak-execution estimate (Algorithm 1's cost model)
# ---------------------------------------------------------------------------

def _sublayer_side_kernels(model: ModelSpec, batch: BatchState,
                           sublayer: SublayerKind, n: int, side: Side) -> list:
    mapping = SimpleNamespace(n_attention=n, n_qkv=n, n_fc=n)
    return [k for k in build_layer_kernels(model, batch, mapping, 0)
            if k.sublayer is sublayer and k.side is side]


def peak_exec_estimate(model: ModelSpec, batch: BatchState,
                       sublayer: SublayerKind, n: int, side: Side,
                       platform: PlatformSpec,
                       params: Optional[PeakExecParams] = None) -> float:
    """Estimated per-layer execution time of one side of one sublayer stage.

    With an explicit alpha the ideal compute time of the dominant kernel
    class is scaled by it; by default the roofline correction applies, i.e.
    memory-bound kernels are charged their bandwidth time.
    """
    count = n if side is Side.BANDWIDTH else model.num_heads - n
    if count == 0:
        return 0.0
    kernels = _sublayer_side_kernels(model, batch, sublayer, n, side)
    alpha = params.alpha(sublayer) if params else None
    chip = platform.chip_per_tier
    chips = platform.chips(side)
    if alpha is not None:
        dominant = OpClass.GEMV if sublayer is SublayerKind.ATTENTION else (
            OpClass.GEMM if batch.batch_size > 1 else OpClass.GEMV)
        flops = sum(k.flops for k in kernels if k.op_class is dominant)
        return alpha * flops / (peak_throughput(chip, dominant) * chips)
    bw = platform.tier(side).bandwidth
    return sum(max(compute_time(k, chip, chips), k.total_bytes / bw)
               for k in kernels)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

def greedy_map(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
               params: Optional[PeakExecParams] = None) -> MappingDecision:
    """Per-sublayer min-max split in the order attention, qkv-linear, fc.

    For each sublayer the split n minimizes the larger of the two sides'
    peak-execution estimates, subject to both sides fitting in the residual
    tier capacities; ties break toward larger n (prefer the bandwidth tier).
    """
    check_total_fits(model, batch, platform)
    rem_bw, rem_cap = capacity_budgets(model, batch, platform)
    nh = model.num_heads
    chosen = {}
    for sub in SUBLAYER_PRIORITY:
        best_n, best_t = None, None
        for n in range(nh + 1):
            b_bw, b_cap = side_split_bytes(model, batch, sub, n)
            if b_bw > rem_bw or b_cap > rem_cap:
                continue
            t = max(peak_exec_estimate(model, batch, sub, n, Side.BANDWIDTH,
                                       platform, params),
                    peak_exec_estimate(model, batch, sub, n, Side.CAPACITY,
                                       platform, params))
            if best_t is None or t < best_t or (t == best_t and n > best_n):
                best_n, best_t = n, t
        if best_n is None:
            raise OutOfMemoryError(
                f"no feasible split for {sub.value} under residual capacity")
        b_bw, b_cap = side_split_bytes(model, batch, sub, best_n)
        rem_bw -= b_bw
        rem_cap -= b_cap
        chosen[sub] = best_n
    return MappingDecision(n_attention=chosen[SublayerKind.ATTENTION],
                           n_qkv=chosen[SublayerKind.QKV_LINEAR],
                           n_fc=chosen[SublayerKind.FC])


def flexgen_map(model: ModelSpec, batch: BatchState,
                platform: PlatformSpec) -> MappingDecision:
    """Two-tier adaptation of the offloading linear program.

    Weights form a single group (qkv-linear and fc share one fraction), the
    KV cache and activations are the other two; the cost model counts only
    the FLOPs and capacity assigned to each side, enumerated at 1/N
    resolution.  Being an offline planner, it budgets the KV cache at the
    maximum sequence length rather than the current one.  Ties resolve
    toward the most balanced fractions.
    """
    check_total_fits(model, batch, platform)
    nh = model.num_heads
    usable_bw, usable_cap = capacity_budgets(model, batch, platform)
    fp = footprint(model, batch)
    weights, acts = fp.weights, fp.activations
    kv = (2 * model.num_layers * model.kv_dim * model.bytes_per_element
          * batch.batch_size * model.max_seq_len)

    one = SimpleNamespace(n_attention=nh, n_qkv=nh, n_fc=nh)
    kernels = build_layer_kernels(model, batch, one, 0)
    gemm_flops = model.num_layers * sum(
        k.flops for k in kernels if k.sublayer is not SublayerKind.ATTENTION)
    att_flops = model.num_layers * sum(
        k.flops for k in kernels if k.sublayer is SublayerKind.ATTENTION)
    peak_bw = peak_throughput(platform.chip_per_tier, OpClass.GEMM) * platform.bandwidth_chips
    peak_cap = peak_throughput(platform.chip_per_tier, OpClass.GEMM) * platform.capacity_chips

    fr = np.arange(nh + 1) / nh
    w = fr[:, None, None]
    c = fr[None, :, None]
    h = fr[None, None, :]
    flops_bw = w * gemm_flops + c * att_flops
    obj = np.maximum(flops_bw / peak_bw, (gemm_flops + att_flops - flops_bw) / peak_cap)
    bytes_bw = w * weights + c * kv + h * acts
    bytes_cap = (1 - w) * weights + (1 - c) * kv + (1 - h) * acts
    infeasible = (bytes_bw > usable_bw) | (bytes_cap > usable_cap)
    obj = np.where(infeasible, np.inf, obj)
    if not np.isfinite(obj).any():
        raise OutOfMemoryError("no feasible placement fractions")
    best = obj.min()
    ties = np.argwhere(obj == best)
    center = nh / 2
    key = lambda ixs: (abs(ixs[0] - center) + abs(ixs[1] - center) + abs(ixs[2] - center),
                       -ixs[0], -ixs[1], -ixs[2])
    wi, ci, _ = min(map(tuple, ties), key=key)
    return MappingDecision(n_attention=int(ci), n_qkv=int(wi), n_fc=int(wi))


def _feasibility_cube(model: ModelSpec, batch: BatchState,
                      platform: PlatformSpec) -> np.ndarray:
    """Boolean cube [nq, na, nf] of capacity-feasible decisions."""
    nh = model.num_heads
    usable_bw, usable_cap = capacity_budgets(model, batch, platform)
    n = np.arange(nh + 1)
    parts = {}
    for sub in SUBLAYER_PRIORITY:
        total = sublayer_resident_bytes(model, batch, sub)
        bw = total * n // nh
        parts[sub] = (bw, total - bw)
    bw = (parts[SublayerKind.QKV_LINEAR][0][:, None, None]
          + parts[SublayerKind.ATTENTION][0][None, :, None]
          + parts[SublayerKind.FC][0][None, None, :])
    cap = (parts[SublayerKind.QKV_LINEAR][1][:, None, None]
           + parts[SublayerKind.ATTENTION][1][None, :, None]
           + parts[SublayerKind.FC][1][None, None, :])
    return (bw <= usable_bw) & (cap <= usable_cap)


def _argmin_with_tiebreak(cube: np.ndarray) -> MappingDecision:
    best = cube.min()
    if not np.isfinite(best):
        raise OutOfMemoryError("no capacity-feasible mapping exists")
    ties = np.argwhere(cube == best)
    # deterministic: lexicographically largest (n_a, n_q, n_f)
    nq, na, nf = max(map(tuple, ties), key=lambda t: (t[1], t[0], t[2]))
    return MappingDecision(n_attention=int(na), n_qkv=int(nq), n_fc=int(nf))


def exhaustive_best(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
                    evaluator, budget: int = 2_000_000,
                    stride: int = 1) -> MappingDecision:
    """Full search over the (N+1)^3 mapping space with an analytic evaluator."""
    check_total_fits(model, batch, platform)
    nh = model.num_heads
    candidates = (nh // stride + 1) ** 3
    if candidates > budget:
        raise BudgetExceededError(
            f"{candidates} candidates exceed budget {budget}; "
            "use the greedy policy or a coarser stride")
    cube = evaluator.latency_cube().copy()
    cube[~_feasibility_cube(model, batch, platform)] = np.inf
    if stride > 1:
        keep = np.zeros(nh + 1, dtype=bool)
        keep[::stride] = True
        keep[nh] = True
        mask = ~(keep[:, None, None] & keep[None, :, None] & keep[None, None, :])
        cube[mask] = np.inf
    return _argmin_with_tiebreak(cube)


def major_map(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
              evaluator, favored: SublayerKind,
              budget: int = 2_000_000) -> MappingDecision:
    """Pin the favored sublayer at its capacity-feasible maximum, then search
    the remaining two variables exhaustively."""
    check_total_fits(model, batch, platform)
    nh = model.num_heads
    if (nh + 1) ** 2 > budget:
        raise BudgetExceededError("major search exceeds budget")
    usable_bw, _ = capacity_budgets(model, batch, platform)
    n_fav = 0
    for n in range(nh, -1, -1):
        if side_split_bytes(model, batch, favored, n)[0] <= usable_bw:
            n_fav = n
            break
    cube = evaluator.latency_cube().copy()
    cube[~_feasibility_cube(model, batch, platform)] = np.inf
    axis = {SublayerKind.QKV_LINEAR: 0, SublayerKind.ATTENTION: 1,
            SublayerKind.FC: 2}[favored]
    mask = np.ones(nh + 1, dtype=bool)
    mask[n_fav] = False
    if axis == 0:
        cube[mask, :, :] = np.inf
    elif axis == 1:
        cube[:, mask, :] = np.inf
    else:
        cube[:, :, mask] = np.inf
    return _argmin_with_tiebreak(cube)


def sublayer_best(model: ModelSpec, batch: BatchState, platform: PlatformSpec,
                  evaluator) -> MappingDecision:
    """Best whole-sublayer placement (the naive mapping granularity).

    qkv-linear and fc are placed entirely on one side; attention may split
    its KV cache across the sides but the sides execute serially, so the
    evaluator must be queried in serialized-stage mode.
    """
    check_total_fits(model, batch, platform)
    nh = model.num_heads
    best = None
    for nq in (0, nh):
        for nf in (0, nh):
            for na in range(nh + 1):
                d = MappingDecision(n_attention=na, n_qkv=nq, n_fc=nf)
                if not feasible(model, batch, platform, d):
                    continue
                t = evaluator.latency(d, serial_stages=True)
                if best is None or t < best[0]:
                    best = (t, d)
    if best is None:
        raise OutOfMemoryError("no feasible sublayer-granular placement")
    return best[1]


# ---------------------------------------------------------------------------
# migration planning
# ---------------------------------------------------------------------------

def plan_migration(old: MappingDecision, new: MappingDecision,
                   state) -> MigrationPlan:
    """Page moves required to realize `new` given pools sized for `old`.

    `state` is a memsim.MemoryState; for every owner pool whose bandwidth-side
    share changed, whole pages move in one direction, each page listed once.
    """
    moves = []
    for family in state.owner_families():
        n_old = old.count(family.sublayer)
        n_new = new.count(family.sublayer)
        if n_old == n_new:
            continue
        target_bw = split_even(state.family_total(family.name), n_new,
                               family.groups)[0]
        target_pages = state.pages_needed(target_bw)
        current_pages = state.owner_page_count(family.bw_owner)
        delta = target_pages - current_pages
        # the named owner is the source pool the pages leave
        if delta > 0:
            moves.append(MigrationMove(family.cap_owner, delta, "toBandwidth"))
        elif delta < 0:
            moves.append(MigrationMove(family.bw_owner, -delta, "toCapacity"))
    return MigrationPlan(tuple(moves))


# ---------------------------------------------------------------------------
# policy registry
# ---------------------------------------------------------------------------

POLICY_NAMES = ("greedy", "flexgen", "best", "q-major", "a-major", "f-major",
                "sublayer")


def parse_static_policy(name: str) -> Optional[MappingDecision]:
    if name.startswith("static:"):
        try:
            nq, na, nf = (int(x) for x in name.split(":", 1)[1].split(","))
        except ValueError as e:
            raise ConfigError(f"bad static policy spec: {name}") from e
        return MappingDecision(n_attention=na, n_qkv=nq, n_fc=nf)
    return None
