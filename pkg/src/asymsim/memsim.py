"""Paged memory abstraction: flat page tables, LRU TLBs, free-space manager.

Both tiers share one logical address space.  Every tensor pool (owner) gets a
reserved logical window at registration and grows into it, so a kernel always
sees one contiguous logical range per pool no matter how physical pages are
scattered or migrated.  Owners never share pages.

Pools are pooled across layers (the mapping is uniform over layers): weights
per (matrix, side), KV cache per (request slot, K|V, side), plus a few global
activation workspaces.
"""

from __future__ import annotations

import json
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import OutOfMemoryError, ResidencyFault
from .workload import BatchState, ModelSpec, Side, SublayerKind, split_even


class PageTable:
    """Flat logical->physical map for one tier."""

    def __init__(self, tier: Side, page_size: int):
        self.tier = tier
        self.page_size = page_size
        self.entries: Dict[int, int] = {}

    def install(self, logical: int, physical: int) -> None:
        self.entries[logical] = physical

    def drop(self, logical: int) -> int:
        return self.entries.pop(logical)

    def lookup(self, logical: int) -> int:
        try:
            return self.entries[logical]
        except KeyError:
            raise ResidencyFault(
                f"unmapped logical page {logical} on {self.tier.value} tier")

    def injective(self) -> bool:
        vals = self.entries.values()
        return len(set(vals)) == len(vals)


class TlbState:
    """Fully associative LRU TLB with hit/miss counters."""

    def __init__(self, capacity: int = 2048):
        self.capacity = capacity
        self.resident: "OrderedDict[int, int]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def access(self, logical: int, table: PageTable) -> Tuple[int, bool]:
        """Translate one page; returns (physical, hit)."""
        if logical in self.resident:
            self.hits += 1
            self.resident.move_to_end(logical)
            return self.resident[logical], True
        physical = table.lookup(logical)
        self.misses += 1
        if len(self.resident) >= self.capacity:
            self.resident.popitem(last=False)
        self.resident[logical] = physical
        return physical, False

    def invalidate(self, pages: Iterable[int]) -> None:
        for p in pages:
            self.resident.pop(p, None)

    def flush(self) -> None:
        self.resident.clear()


def translate(tlb: TlbState, table: PageTable, logical: int) -> Tuple[int, bool]:
    return tlb.access(logical, table)


class FreeSpaceManager:
    """Per-tier physical frame pool plus frame ownership ledger."""

    def __init__(self, tier: Side, total_frames: int):
        self.tier = tier
        self.total_frames = total_frames
        self.free: deque = deque(range(total_frames))
        self.ledger: Dict[int, str] = {}

    @property
    def free_frames(self) -> int:
        return len(self.free)

    def take(self, n: int, owner: str) -> List[int]:
        if n > len(self.free):
            raise OutOfMemoryError(
                f"{self.tier.value} tier out of physical pages "
                f"({n} requested, {len(self.free)} free)")
        frames = [self.free.popleft() for _ in range(n)]
        for f in frames:
            self.ledger[f] = owner
        return frames

    def release(self, frames: Iterable[int]) -> None:
        for f in frames:
            del self.ledger[f]
            self.free.append(f)

    def consistent(self) -> bool:
        owned = set(self.ledger)
        free = set(self.free)
        return not (owned & free) and len(owned) + len(free) == self.total_frames


@dataclass
class OwnerPool:
    """One tensor pool: a contiguous logical window on one tier."""
    key: str
    side: Side
    sublayer: Optional[SublayerKind]
    base_page: int
    reserved_pages: int
    bytes_used: int = 0
    frames: List[int] = field(default_factory=list)

    @property
    def page_count(self) -> int:
        return len(self.frames)

    def logical_pages(self) -> range:
        return range(self.base_page, self.base_page + self.page_count)

    def logical_range_for(self, offset: int, length: int, page_size: int) -> range:
        if length <= 0:
            return range(0)
        first = self.base_page + offset // page_size
        last = self.base_page + (offset + length - 1) // page_size
        return range(first, last + 1)


@dataclass(frozen=True)
class OwnerFamily:
    """A pair of side pools holding the two splits of one tensor group."""
    name: str
    sublayer: SublayerKind
    groups: int
    bw_owner: str
    cap_owner: str


class MemoryState:
    """Mutable two-tier memory image owned by a single run."""

    def __init__(self, platform, logical_pages_hint: int = 0):
        self.platform = platform
        self.page_size = platform.translation.page_size
        ps = self.page_size
        self.tables = {s: PageTable(s, ps) for s in Side}
        self.tlbs = {s: TlbState(platform.translation.tlb_entries) for s in Side}
        self.fsms = {
            Side.BANDWIDTH: FreeSpaceManager(
                Side.BANDWIDTH, platform.bandwidth_tier.capacity // ps),
            Side.CAPACITY: FreeSpaceManager(
                Side.CAPACITY, platform.capacity_tier.capacity // ps),
        }
        self.owners: Dict[str, OwnerPool] = {}
        self.families: Dict[str, OwnerFamily] = {}
        self._next_logical = 0

    # -- registration ------------------------------------------------------

    def pages_needed(self, nbytes: int) -> int:
        return -(-nbytes // self.page_size)

    def register_owner(self, key: str, side: Side, reserved_bytes: int,
                       sublayer: Optional[SublayerKind] = None) -> OwnerPool:
        if key in self.owners:
            raise ResidencyFault(f"owner {key} registered twice")
        pages = max(self.pages_needed(reserved_bytes), 1)
        pool = OwnerPool(key, side, sublayer, self._next_logical, pages)
        self._next_logical += pages
        self.owners[key] = pool
        return pool

    def register_family(self, name: str, sublayer: SublayerKind,
                        groups: int, reserved_bytes: int) -> OwnerFamily:
        bw = self.register_owner(f"{name}:bw", Side.BANDWIDTH, reserved_bytes,
                                 sublayer)
        cap = self.register_owner(f"{name}:cap", Side.CAPACITY, reserved_bytes,
                                  sublayer)
        fam = OwnerFamily(name, sublayer, groups, bw.key, cap.key)
        self.families[name] = fam
        return fam

    def owner_families(self) -> List[OwnerFamily]:
        return list(self.families.values())

    def owner_page_count(self, key: str) -> int:
        return self.owners[key].page_count

    def family_total(self, name: str) -> int:
        fam = self.families[name]
        return (self.owners[fam.bw_owner].bytes_used
                + self.owners[fam.cap_owner].bytes_used)

    # -- allocation --------------------------------------------------------

    def allocate(self, owner_key: str, n_pages: int) -> List[int]:
        """Take n physical pages for the owner and extend its logical range."""
        if n_pages == 0:
            return []
        pool = self.owners[owner_key]
        if pool.page_count + n_pages > pool.reserved_pages:
            raise OutOfMemoryError(
                f"owner {owner_key} exceeds its logical reservation")
        frames = self.fsms[pool.side].take(n_pages, owner_key)
        table = self.tables[pool.side]
        start = pool.base_page + pool.page_count
        for i, frame in enumerate(frames):
            table.install(start + i, frame)
        pool.frames.extend(frames)
        return frames

    def allocate_bytes(self, owner_key: str, nbytes: int) -> int:
        """Grow the pool to hold nbytes more; returns pages allocated."""
        pool = self.owners[owner_key]
        target = self.pages_needed(pool.bytes_used + nbytes)
        grow = max(0, target - pool.page_count)
        self.allocate(owner_key, grow)
        pool.bytes_used += nbytes
        return grow

    def truncate_bytes(self, owner_key: str, nbytes: int) -> int:
        """Shrink the pool by nbytes, freeing whole tail pages."""
        pool = self.owners[owner_key]
        pool.bytes_used = max(0, pool.bytes_used - nbytes)
        keep = self.pages_needed(pool.bytes_used)
        drop = pool.page_count - keep
        if drop > 0:
            self._release_tail(pool, drop)
        return max(drop, 0)

    def free_owner(self, owner_key: str) -> None:
        pool = self.owners[owner_key]
        self._release_tail(pool, pool.page_count)
        pool.bytes_used = 0

    def _release_tail(self, pool: OwnerPool, n: int) -> List[int]:
        frames = pool.frames[len(pool.frames) - n:]
        del pool.frames[len(pool.frames) - n:]
        table = self.tables[pool.side]
        logicals = []
        start = pool.base_page + pool.page_count
        for i in range(n):
            logical = start + i
            table.drop(logical)
            logicals.append(logical)
        self.fsms[pool.side].release(frames)
        self.tlbs[pool.side].invalidate(logicals)
        return frames

    # -- migration ---------------------------------------------------------

    def execute_migration(self, plan) -> float:
        """Move the planned pages between tiers; returns the transfer time.

        Destination pages are allocated, sources freed, both page tables
        updated and the affected TLB entries invalidated.  Each direction is
        charged bytes/min(interconnect, source bw, destination bw); the two
        directions overlap, so the total is the maximum over directions.
        """
        moved = {"toCapacity": 0, "toBandwidth": 0}
        # evictions free bandwidth-tier pages the inbound moves may need
        ordered = sorted(plan.moves, key=lambda m: m.direction != "toCapacity")
        for move in ordered:
            src_pool = self.owners[move.owner]
            fam = self.families[move.owner.rsplit(":", 1)[0]]
            dst_key = fam.cap_owner if move.direction == "toCapacity" else fam.bw_owner
            if dst_key == move.owner:
                raise ResidencyFault(f"move {move} sources its own destination")
            src_bytes = src_pool.bytes_used
            take = min(move.page_count, src_pool.page_count)
            byte_share = min(src_bytes, take * self.page_size)
            self.allocate(dst_key, take)
            self.owners[dst_key].bytes_used += byte_share
            src_pool.bytes_used -= byte_share
            self._release_tail(src_pool, take)
            moved[move.direction] += take * self.page_size
        p = self.platform
        times = []
        for direction, nbytes in moved.items():
            if not nbytes:
                continue
            src = p.bandwidth_tier if direction == "toCapacity" else p.capacity_tier
            dst = p.capacity_tier if direction == "toCapacity" else p.bandwidth_tier
            rate = min(p.interconnect_bandwidth, src.bandwidth, dst.bandwidth)
            times.append(nbytes / rate)
        return max(times, default=0.0)

    # -- auditing ----------------------------------------------------------

    def audit(self) -> None:
        for side in Side:
            if not self.tables[side].injective():
                raise ResidencyFault(f"{side.value} page table not injective")
            if not self.fsms[side].consistent():
                raise ResidencyFault(f"{side.value} free pool / ledger overlap")
            mapped = len(self.tables[side].entries)
            owned = len(self.fsms[side].ledger)
            if mapped != owned:
                raise ResidencyFault(
                    f"{side.value}: {mapped} mappings vs {owned} owned frames")
        for pool in self.owners.values():
            start = pool.base_page
            for i in range(pool.page_count):
                if start + i not in self.tables[pool.side].entries:
                    raise ResidencyFault(f"owner {pool.key} logical range has a hole")

    def audit_dump(self) -> dict:
        return {
            "page_size": self.page_size,
            "tiers": {
                side.value: {
                    "mapped_pages": len(self.tables[side].entries),
                    "free_pages": self.fsms[side].free_frames,
                    "tlb": {"hits": self.tlbs[side].hits,
                            "misses": self.tlbs[side].misses,
                            "resident": len(self.tlbs[side].resident)},
                } for side in Side
            },
            "owners": {
                k: {"side": p.side.value, "pages": p.page_count,
                    "bytes_used": p.bytes_used, "base_page": p.base_page}
                for k, p in sorted(self.owners.items())
            },
        }

    def dump_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.audit_dump(), f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# fragmentation analysis
# ---------------------------------------------------------------------------

def _waste(size: int, page_size: int, mode: str) -> int:
    residue = size % page_size
    if mode == "residue":
        return residue
    if mode == "slack":
        return (page_size - residue) % page_size
    raise ValueError(f"unknown frag mode: {mode}")


def fragmentation_units(model: ModelSpec, batch: BatchState) -> List[Tuple[str, str, int]]:
    """(group, unit name, bytes) for every minimum unsplittable tensor unit.

    Units are the allocator's pools under a representative even head split:
    per-matrix weight side-regions, per-request K/V side-regions, and the
    replicated activation workspaces.
    """
    bpe = model.bytes_per_element
    nh, half = model.num_heads, model.num_heads // 2
    d, o, L = model.model_dim, model.ffn_dim, model.num_layers
    units = []
    matrices = {
        "qkv-linear": (("wq", d * d), ("wk", d * model.kv_dim), ("wv", d * model.kv_dim)),
        "fc": (("wproj", d * d), ("wffn1", d * o), ("wffn2", o * d)),
    }
    for group, mats in matrices.items():
        for name, per_layer in mats:
            total = per_layer * bpe * L
            bw, cap = split_even(total, half, nh)
            units.append((group, f"{name}:bw", bw))
            units.append((group, f"{name}:cap", cap))
    for i, s in enumerate(batch.seq_lens):
        total = s * model.kv_dim * bpe * L
        bw, cap = split_even(total, half, nh)
        for comp in ("k", "v"):
            units.append(("attention", f"{comp}{i}:bw", bw))
            units.append(("attention", f"{comp}{i}:cap", cap))
    b = batch.batch_size
    buffers = (
        ("residual-stream", b * d * bpe),
        ("qkv-out", b * (d + 2 * model.kv_dim) * bpe),
        ("scores", model.num_heads * batch.total_tokens * bpe),
        ("ffn-buffer", b * (o + d) * bpe),
    )
    for name, size in buffers:
        for side in ("bw", "cap"):
            units.append(("activations", f"{name}:{side}", size))
    return units


def fragmentation_report(model: ModelSpec, batch: BatchState, page_size: int,
                         mode: str = "slack") -> int:
    """Total internal fragmentation bytes across all tensor units."""
    return sum(_waste(size, page_size, mode)
               for _, _, size in fragmentation_units(model, batch))


def fragmentation_rows(model: ModelSpec, batch: BatchState, page_size: int,
                       mode: str = "slack") -> List[dict]:
    """Per-sublayer aggregation used by the frag CSV."""
    agg: Dict[str, List[int]] = {}
    for group, _, size in fragmentation_units(model, batch):
        cnt, total, waste = agg.setdefault(group, [0, 0, 0])
        agg[group] = [cnt + 1, total + size, waste + _waste(size, page_size, mode)]
    return [{"sublayer": g, "unit_count": v[0], "unit_bytes": v[1],
             "waste_bytes": v[2]} for g, v in sorted(agg.items())]
