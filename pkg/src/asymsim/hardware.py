"""Two-tier hardware description and the roofline kernel-time model.

The defaults mirror a Grace-Hopper-like board: a 96GB/3TB/s bandwidth-centric
module and a 512GB/544GB/s capacity-centric module, one 4-core accelerator
chip per side, joined by a 960GB/s interconnect.

Kernel time is the roofline maximum of compute and memory-streaming time plus
fixed access and launch overheads.  Two effects of the accelerator units are
folded into the compute term:

* GEMMs run on the weight-stationary 128x128 systolic array, whose tile
  turnover is bounded by weight loading; with fewer activation rows than the
  array height the effective throughput scales by rows/128.
* The MV unit streams its operand once per dot-product group, so attention
  compute is charged against the MV peak with the kernel's pre-scaled FLOPs.

Translation misses are pipelined behind the data stream by the MMU; only the
exposed fraction of the per-miss latency is charged (see TranslationSpec).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

from .errors import ConfigError
from .workload import KernelDesc, OpClass, Side, VECTOR_CLASSES

MB = 10 ** 6
GB = 10 ** 9
TB = 10 ** 12
PAGE_2MB = 2 * 1024 * 1024


@dataclass(frozen=True)
class MemoryTierSpec:
    capacity: int            # bytes
    bandwidth: float         # bytes/second
    access_latency: float    # seconds

    def __post_init__(self):
        if self.capacity <= 0 or self.bandwidth <= 0 or self.access_latency < 0:
            raise ConfigError("memory tier parameters must be positive")


@dataclass(frozen=True)
class ChipSpec:
    cores: int = 4
    mm_rows: int = 128
    mm_cols: int = 128
    mv_arrays: int = 32
    mv_lanes: int = 128
    vector_lanes: int = 128
    frequency: float = 1e9
    spm_bytes_per_core: int = 32 * 1024 * 1024  # 16MB double buffered
    launch_overhead: float = 5e-6

    def __post_init__(self):
        if min(self.cores, self.mm_rows, self.mm_cols, self.mv_arrays,
               self.mv_lanes, self.vector_lanes) <= 0 or self.frequency <= 0:
            raise ConfigError("chip parameters must be positive")


@dataclass(frozen=True)
class TranslationSpec:
    tlb_entries: int = 2048
    page_size: int = PAGE_2MB
    miss_latency: float = 300e-9
    enabled: bool = True
    # fraction of miss latency not hidden behind the data stream; the MMU
    # translates ahead of the transfer with multiple outstanding walks
    exposed_miss_fraction: float = 0.05

    def __post_init__(self):
        if self.tlb_entries <= 0:
            raise ConfigError("tlb_entries must be positive")
        if self.page_size <= 0 or (self.page_size & (self.page_size - 1)) != 0:
            raise ConfigError("page_size must be a power of two")
        if not 0.0 <= self.exposed_miss_fraction <= 1.0:
            raise ConfigError("exposed_miss_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class EnergyParams:
    # calibration knobs; the shipped defaults reproduce the qualitative
    # per-token ordering (asymmetric < capacity-only < multi-HBM)
    bandwidth_dynamic_pj_per_byte: float = 42.0
    capacity_dynamic_pj_per_byte: float = 36.0
    bandwidth_static_watts: float = 40.0
    capacity_static_watts: float = 115.0
    interconnect_pj_per_byte: float = 10.0

    def __post_init__(self):
        if min(self.bandwidth_dynamic_pj_per_byte, self.capacity_dynamic_pj_per_byte,
               self.bandwidth_static_watts, self.capacity_static_watts,
               self.interconnect_pj_per_byte) < 0:
            raise ConfigError("energy coefficients must be non-negative")


@dataclass(frozen=True)
class PlatformSpec:
    bandwidth_tier: MemoryTierSpec
    capacity_tier: MemoryTierSpec
    interconnect_bandwidth: float
    chip_per_tier: ChipSpec = field(default_factory=ChipSpec)
    translation: TranslationSpec = field(default_factory=TranslationSpec)
    energy: EnergyParams = field(default_factory=EnergyParams)
    bandwidth_chips: int = 1
    capacity_chips: int = 1
    # multi-HBM all-reduce: per-hop latency calibrated to profiled multi-GPU
    # collectives (k hops per stage)
    per_hop_latency: float = 60e-6

    def __post_init__(self):
        if self.interconnect_bandwidth <= 0:
            raise ConfigError("interconnect_bandwidth must be positive")
        if self.bandwidth_chips < 1 or self.capacity_chips < 1:
            raise ConfigError("chip counts must be >= 1")

    def tier(self, side: Side) -> MemoryTierSpec:
        return self.bandwidth_tier if side is Side.BANDWIDTH else self.capacity_tier

    def chips(self, side: Side) -> int:
        return self.bandwidth_chips if side is Side.BANDWIDTH else self.capacity_chips


def peak_throughput(chip: ChipSpec, op_class: OpClass) -> float:
    """Peak FLOP/s of the unit that executes the given kernel class."""
    if op_class is OpClass.GEMM:
        return chip.cores * chip.mm_rows * chip.mm_cols * 2 * chip.frequency
    if op_class is OpClass.GEMV:
        return chip.cores * chip.mv_arrays * chip.mv_lanes * 2 * chip.frequency
    if op_class in VECTOR_CLASSES:
        return chip.cores * chip.vector_lanes * chip.frequency
    raise ConfigError(f"unknown op class {op_class}")


def gemm_row_utilization(chip: ChipSpec, rows: int) -> float:
    """Weight-stationary arrays turn over one tile per mm_rows cycles; with
    fewer activation rows the array idles for the remainder."""
    return min(1.0, max(rows, 1) / chip.mm_rows)


def compute_time(kernel: KernelDesc, chip: ChipSpec, chips: int) -> float:
    peak = peak_throughput(chip, kernel.op_class) * chips
    if kernel.op_class is OpClass.GEMM:
        peak *= gemm_row_utilization(chip, kernel.rows)
    return kernel.flops / peak if kernel.flops else 0.0


def kernel_time(kernel: KernelDesc, side: Side, platform: PlatformSpec,
                translation_misses: int = 0) -> float:
    """Roofline time of one fused kernel on the given side."""
    tier = platform.tier(side)
    chip = platform.chip_per_tier
    t_compute = compute_time(kernel, chip, platform.chips(side))
    t_memory = kernel.total_bytes / tier.bandwidth
    t = max(t_compute, t_memory) + tier.access_latency + chip.launch_overhead
    if platform.translation.enabled and translation_misses:
        t += translation_misses * platform.translation.miss_latency
    return t


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _original() -> PlatformSpec:
    return PlatformSpec(
        bandwidth_tier=MemoryTierSpec(96 * GB, 3 * TB, 32e-9),
        capacity_tier=MemoryTierSpec(512 * GB, 544 * GB, 45e-9),
        interconnect_bandwidth=960 * GB,
    )


def _scale_tier(tier: MemoryTierSpec, capacity=1.0, bandwidth=1.0) -> MemoryTierSpec:
    return MemoryTierSpec(int(tier.capacity * capacity), tier.bandwidth * bandwidth,
                          tier.access_latency)


def platform_preset(name: str) -> PlatformSpec:
    base = _original()
    presets = {
        "original": base,
        "hbmcap-less": replace(base, bandwidth_tier=_scale_tier(base.bandwidth_tier, capacity=0.5)),
        "hbmcap-more": replace(base, bandwidth_tier=_scale_tier(base.bandwidth_tier, capacity=2.0)),
        "hbmbw-less": replace(base, bandwidth_tier=_scale_tier(base.bandwidth_tier, bandwidth=0.75)),
        "hbmbw-more": replace(base, bandwidth_tier=MemoryTierSpec(96 * GB, 4 * TB, 32e-9)),
        "lpddrbw-less": replace(base, capacity_tier=_scale_tier(base.capacity_tier, bandwidth=0.75)),
        "lpddrbw-more": replace(base, capacity_tier=_scale_tier(base.capacity_tier, bandwidth=1.25)),
        "hbmchip-more": replace(base, bandwidth_chips=2),
        "lpddrchip-more": replace(base, capacity_chips=2),
    }
    key = name.lower()
    if key not in presets:
        raise ConfigError(f"unknown platform preset: {name}")
    return presets[key]


SENSITIVITY_PRESETS = (
    "original", "hbmcap-less", "hbmcap-more", "hbmbw-less", "hbmbw-more",
    "lpddrbw-less", "lpddrbw-more", "hbmchip-more", "lpddrchip-more",
)


def _tier_from_dict(cfg: dict) -> MemoryTierSpec:
    return MemoryTierSpec(int(cfg["capacity"]), float(cfg["bandwidth"]),
                          float(cfg["access_latency"]))


def platform_from_dict(cfg: dict) -> PlatformSpec:
    try:
        kwargs = dict(
            bandwidth_tier=_tier_from_dict(cfg["bandwidth_tier"]),
            capacity_tier=_tier_from_dict(cfg["capacity_tier"]),
            interconnect_bandwidth=float(cfg["interconnect_bandwidth"]),
        )
        for key, cls in (("chip_per_tier", ChipSpec), ("translation", TranslationSpec),
                         ("energy", EnergyParams)):
            if key in cfg:
                kwargs[key] = cls(**cfg[key])
        for key in ("bandwidth_chips", "capacity_chips"):
            if key in cfg:
                kwargs[key] = int(cfg[key])
        if "per_hop_latency" in cfg:
            kwargs["per_hop_latency"] = float(cfg["per_hop_latency"])
        return PlatformSpec(**kwargs)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad platform config: {e}") from e


def load_platform(name_or_path: str) -> PlatformSpec:
    try:
        return platform_preset(name_or_path)
    except ConfigError:
        pass
    try:
        ref = resources.files("asymsim.configs.platforms") / f"{name_or_path.lower()}.json"
        if ref.is_file():
            return platform_from_dict(json.loads(ref.read_text()))
    except (ModuleNotFoundError, FileNotFoundError):
        pass
    try:
        with open(name_or_path) as f:
            return platform_from_dict(json.load(f))
    except FileNotFoundError:
        raise ConfigError(f"unknown platform preset or file: {name_or_path}")
