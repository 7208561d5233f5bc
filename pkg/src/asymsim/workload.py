"""Decode-iteration workload: fused-kernel DAG with exact FLOP/byte accounting.

One generation-phase iteration of a decoder LLM is described as three
pipeline stages per layer (qkv-linear, attention, fc).  Each stage is split
at head / column-group granularity between the two memory sides, kernels of
the same type on one side are fused, and a barrier closes each stage.

All byte and FLOP fields are integers; two-sided splits use floor/remainder
so that totals are conserved exactly regardless of the mapping.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Optional

from .errors import ConfigError

FLOPS_PER_MAC = 2
# exp lookup plus normalize, charged on the vector/SFU units
SOFTMAX_FLOPS_PER_SCORE = 2


class Side(Enum):
    BANDWIDTH = "bandwidth"
    CAPACITY = "capacity"

    @property
    def peer(self) -> "Side":
        return Side.CAPACITY if self is Side.BANDWIDTH else Side.BANDWIDTH


class SublayerKind(Enum):
    QKV_LINEAR = "qkv-linear"
    ATTENTION = "attention"
    FC = "fc"


class OpClass(Enum):
    GEMM = "gemm"
    GEMV = "gemv"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    RESIDUAL = "residual"
    ACTIVATION = "activation"


VECTOR_CLASSES = (OpClass.SOFTMAX, OpClass.LAYERNORM, OpClass.RESIDUAL, OpClass.ACTIVATION)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    num_heads: int
    head_dim: int
    model_dim: int
    ffn_dim: int
    kv_groups: int = 1
    bytes_per_element: int = 1
    max_seq_len: int = 2048

    def __post_init__(self):
        counts = (self.num_layers, self.num_heads, self.head_dim,
                  self.model_dim, self.ffn_dim, self.kv_groups, self.max_seq_len)
        if any(c <= 0 for c in counts):
            raise ConfigError(f"{self.name}: all counts must be strictly positive")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConfigError(f"{self.name}: model_dim must equal num_heads * head_dim")
        if self.num_heads % self.kv_groups != 0:
            raise ConfigError(f"{self.name}: kv_groups must divide num_heads")
        if self.bytes_per_element not in (1, 2):
            raise ConfigError(f"{self.name}: bytes_per_element must be 1 or 2")

    @property
    def kv_dim(self) -> int:
        """Width of the shared K (or V) projection: D/g."""
        return self.model_dim // self.kv_groups

    def qkv_weight_bytes_per_layer(self) -> int:
        d = self.model_dim
        return (d * d + 2 * d * self.kv_dim) * self.bytes_per_element

    def fc_weight_bytes_per_layer(self) -> int:
        d, o = self.model_dim, self.ffn_dim
        return (d * d + 2 * d * o) * self.bytes_per_element

    def kv_bytes_per_token(self) -> int:
        """KV-cache growth per generated token per request, all layers."""
        return 2 * self.num_layers * self.kv_dim * self.bytes_per_element


@dataclass(frozen=True)
class BatchState:
    batch_size: int
    seq_lens: tuple
    iteration: int = 0

    def __post_init__(self):
        if len(self.seq_lens) != self.batch_size:
            raise ConfigError("seq_lens length must equal batch_size")
        if any(s < 1 for s in self.seq_lens):
            raise ConfigError("sequence lengths must be >= 1")

    @staticmethod
    def uniform(batch_size: int, seq_len: int) -> "BatchState":
        return BatchState(batch_size, tuple([seq_len] * batch_size))

    @property
    def total_tokens(self) -> int:
        return sum(self.seq_lens)

    @property
    def max_seq(self) -> int:
        return max(self.seq_lens)

    def validate_against(self, model: ModelSpec) -> None:
        if self.max_seq > model.max_seq_len:
            raise ConfigError(
                f"sequence length {self.max_seq} exceeds max_seq_len {model.max_seq_len}")


@dataclass(frozen=True)
class ScenarioPolicy:
    """Termination/replacement law for the dynamic-sequence-length scenario."""
    termination_prob: float = 0.0
    prompt_min: int = 1
    prompt_max: int = 1024
    target_lens: Optional[tuple] = None  # per-request absolute stop lengths

    def __post_init__(self):
        if not 0.0 <= self.termination_prob <= 1.0:
            raise ConfigError("termination_prob must lie in [0, 1]")
        if self.prompt_min < 1 or self.prompt_max < self.prompt_min:
            raise ConfigError("prompt length bounds invalid")


@dataclass(frozen=True)
class KernelDesc:
    id: str
    layer_index: int
    sublayer: SublayerKind
    op_class: OpClass
    flops: int
    weight_bytes: int
    kv_bytes: int
    activation_in_bytes: int
    activation_out_bytes: int
    partition: tuple  # [start, end) head/column-group indices
    side: Side
    deps: tuple
    barrier_group: str
    rows: int = 1  # activation rows seen by a GEMM (weight-stationary utilization)

    @property
    def total_bytes(self) -> int:
        return (self.weight_bytes + self.kv_bytes +
                self.activation_in_bytes + self.activation_out_bytes)

    def __post_init__(self):
        if self.flops < 0 or min(self.weight_bytes, self.kv_bytes,
                                 self.activation_in_bytes, self.activation_out_bytes) < 0:
            raise ConfigError(f"kernel {self.id}: negative cost field")
        if self.sublayer is SublayerKind.ATTENTION and self.weight_bytes:
            raise ConfigError(f"kernel {self.id}: attention kernels carry no weights")
        if self.sublayer is not SublayerKind.ATTENTION and self.kv_bytes:
            raise ConfigError(f"kernel {self.id}: only attention kernels read the KV cache")


def split_even(total: int, n: int, groups: int) -> tuple:
    """Exact two-way split of an integer quantity by group count.

    The bandwidth side gets floor(total*n/groups); the capacity side gets the
    remainder, so the two parts always sum to `total`.
    """
    bw = total * n // groups
    return bw, total - bw


@dataclass(frozen=True)
class FootprintBreakdown:
    qkv_weights: int
    fc_weights: int
    kv_cache: int
    activations: int

    @property
    def weights(self) -> int:
        return self.qkv_weights + self.fc_weights

    @property
    def total(self) -> int:
        return self.weights + self.kv_cache + self.activations


def footprint(model: ModelSpec, batch: BatchState) -> FootprintBreakdown:
    bpe = model.bytes_per_element
    b = batch.batch_size
    d, o, g = model.model_dim, model.ffn_dim, model.kv_groups
    tokens = batch.total_tokens
    kv = 2 * model.num_layers * model.kv_dim * bpe * tokens
    # peak live activations of one iteration: residual stream plus the widest
    # transient of any stage (qkv outputs, attention scores, or ffn buffer)
    scores = model.num_heads * tokens
    peak_transient = max(b * (d + 2 * (d // g)), scores + b * d, b * o + b * d)
    acts = bpe * (b * d + peak_transient)
    return FootprintBreakdown(
        qkv_weights=model.num_layers * model.qkv_weight_bytes_per_layer(),
        fc_weights=model.num_layers * model.fc_weight_bytes_per_layer(),
        kv_cache=kv,
        activations=acts,
    )


# ---------------------------------------------------------------------------
# kernel enumeration
# ---------------------------------------------------------------------------

def mapping_counts(mapping) -> dict:
    return {
        SublayerKind.QKV_LINEAR: mapping.n_qkv,
        SublayerKind.ATTENTION: mapping.n_attention,
        SublayerKind.FC: mapping.n_fc,
    }


def check_mapping(model: ModelSpec, mapping) -> None:
    for sub, n in mapping_counts(mapping).items():
        if not 0 <= n <= model.num_heads:
            raise ConfigError(
                f"mapping count {n} for {sub.value} outside [0, {model.num_heads}]")


def _attention_flops_per_layer(model: ModelSpec, tokens: int) -> int:
    # QK^T plus AV over the cached tokens; with grouped-query attention the
    # g query heads of a group advance in lockstep against one KV stream, so
    # the charged compute scales with the KV width D/g.
    return 2 * FLOPS_PER_MAC * model.kv_dim * tokens


def build_layer_kernels(model: ModelSpec, batch: BatchState, mapping,
                        layer_index: int, prev_barrier: str = "") -> list:
    """Fused kernels of one decoder layer under the given mapping."""
    check_mapping(model, mapping)
    batch.validate_against(model)

    bpe = model.bytes_per_element
    b = batch.batch_size
    d, o, g, nh = model.model_dim, model.ffn_dim, model.kv_groups, model.num_heads
    tokens = batch.total_tokens
    gemm_op = OpClass.GEMM if b > 1 else OpClass.GEMV

    counts = mapping_counts(mapping)
    kernels = []
    prev_ids: tuple = ()

    def sides_for(n):
        out = []
        if n > 0:
            out.append((Side.BANDWIDTH, (0, n)))
        if n < nh:
            out.append((Side.CAPACITY, (n, nh)))
        return out

    def side_share(total, n, side):
        bw_part = split_even(total, n, nh)[0]
        return bw_part if side is Side.BANDWIDTH else total - bw_part

    def add(stage_kernels):
        nonlocal prev_ids
        kernels.extend(stage_kernels)
        prev_ids = tuple(k.id for k in stage_kernels)

    lid = f"L{layer_index}"

    # --- qkv-linear stage -------------------------------------------------
    n = counts[SublayerKind.QKV_LINEAR]
    group = f"{lid}.qkv"
    qkv_flops = FLOPS_PER_MAC * b * (d * d + 2 * d * model.kv_dim)
    qkv_w = model.qkv_weight_bytes_per_layer()
    qkv_out = b * (d + 2 * model.kv_dim) * bpe
    ln_flops, ln_bytes = 4 * b * d, 2 * b * d * bpe
    stage = []
    for side, part in sides_for(n):
        tag = f"{lid}.qkv.{side.value}"
        share = lambda total: side_share(total, n, side)
        lnb = share(ln_bytes)
        ln = KernelDesc(f"{tag}.ln", layer_index, SublayerKind.QKV_LINEAR,
                        OpClass.LAYERNORM, share(ln_flops), 0, 0,
                        lnb // 2, lnb - lnb // 2, part, side, prev_ids, group)
        gemm = KernelDesc(f"{tag}.gemm", layer_index, SublayerKind.QKV_LINEAR,
                          gemm_op, share(qkv_flops), share(qkv_w), 0,
                          b * d * bpe, share(qkv_out),
                          part, side, (ln.id,), group, rows=b)
        stage.extend([ln, gemm])
    add(stage)

    # --- attention stage --------------------------------------------------
    n = counts[SublayerKind.ATTENTION]
    group = f"{lid}.attn"
    att_flops = _attention_flops_per_layer(model, tokens)  # QK + AV combined
    qk_flops, av_flops = att_flops // 2, att_flops - att_flops // 2
    k_bytes = tokens * model.kv_dim * bpe
    v_bytes = k_bytes
    scores_bytes = model.num_heads * tokens * bpe
    sm_flops = SOFTMAX_FLOPS_PER_SCORE * model.num_heads * tokens
    stage = []
    qkv_ids = prev_ids
    for side, part in sides_for(n):
        tag = f"{lid}.attn.{side.value}"
        share = lambda total: side_share(total, n, side)
        qk = KernelDesc(f"{tag}.qk", layer_index, SublayerKind.ATTENTION,
                        OpClass.GEMV, share(qk_flops), 0, share(k_bytes),
                        share(b * d * bpe), share(scores_bytes),
                        part, side, qkv_ids, group)
        sm = KernelDesc(f"{tag}.softmax", layer_index, SublayerKind.ATTENTION,
                        OpClass.SOFTMAX, share(sm_flops), 0, 0,
                        share(scores_bytes), share(scores_bytes),
                        part, side, (qk.id,), group)
        av = KernelDesc(f"{tag}.av", layer_index, SublayerKind.ATTENTION,
                        OpClass.GEMV, share(av_flops), 0, share(v_bytes),
                        share(scores_bytes), share(b * d * bpe),
                        part, side, (sm.id,), group)
        stage.extend([qk, sm, av])
    add(stage)

    # --- fc stage (projection + feed-forward) ------------------------------
    n = counts[SublayerKind.FC]
    group = f"{lid}.fc"
    attn_ids = prev_ids
    stage = []
    vec_flops, vec_bytes = b * d, 3 * b * d * bpe
    for side, part in sides_for(n):
        tag = f"{lid}.fc.{side.value}"
        share = lambda total: side_share(total, n, side)
        proj = KernelDesc(f"{tag}.proj", layer_index, SublayerKind.FC, gemm_op,
                          share(FLOPS_PER_MAC * b * d * d), share(d * d * bpe), 0,
                          b * d * bpe, share(b * d * bpe), part, side, attn_ids,
                          group, rows=b)
        res1 = KernelDesc(f"{tag}.residual1", layer_index, SublayerKind.FC,
                          OpClass.RESIDUAL, share(vec_flops), 0, 0,
                          share(vec_bytes - vec_bytes // 3), share(vec_bytes // 3),
                          part, side, (proj.id,), group)
        ln2 = KernelDesc(f"{tag}.ln2", layer_index, SublayerKind.FC,
                         OpClass.LAYERNORM, share(4 * b * d), 0, 0,
                         share(b * d * bpe), share(b * d * bpe),
                         part, side, (res1.id,), group)
        ff1 = KernelDesc(f"{tag}.ffn1", layer_index, SublayerKind.FC, gemm_op,
                         share(FLOPS_PER_MAC * b * d * o), share(d * o * bpe), 0,
                         b * d * bpe, share(b * o * bpe), part, side, (ln2.id,),
                         group, rows=b)
        act = KernelDesc(f"{tag}.act", layer_index, SublayerKind.FC,
                         OpClass.ACTIVATION, share(b * o), 0, 0,
                         share(b * o * bpe), share(b * o * bpe),
                         part, side, (ff1.id,), group)
        ff2 = KernelDesc(f"{tag}.ffn2", layer_index, SublayerKind.FC, gemm_op,
                         share(FLOPS_PER_MAC * b * o * d), share(o * d * bpe), 0,
                         b * o * bpe, share(b * d * bpe), part, side, (act.id,),
                         group, rows=b)
        res2 = KernelDesc(f"{tag}.residual2", layer_index, SublayerKind.FC,
                          OpClass.RESIDUAL, share(vec_flops), 0, 0,
                          share(vec_bytes - vec_bytes // 3), share(vec_bytes // 3),
                          part, side, (ff2.id,), group)
        stage.extend([proj, res1, ln2, ff1, act, ff2, res2])
    add(stage)

    return kernels


def enumerate_kernels(model: ModelSpec, batch: BatchState, mapping) -> list:
    """Fused kernel DAG for one generation iteration across all layers."""
    kernels = []
    prev = ""
    for l in range(model.num_layers):
        layer = build_layer_kernels(model, batch, mapping, l, prev)
        # first stage of layer l depends on the last stage of layer l-1
        if prev:
            last_ids = tuple(k.id for k in kernels if k.barrier_group == prev)
            patched = []
            for k in layer:
                if k.barrier_group == f"L{l}.qkv" and k.op_class is OpClass.LAYERNORM:
                    k = replace(k, deps=last_ids)
                patched.append(k)
            layer = patched
        kernels.extend(layer)
        prev = f"L{l}.fc"
    return kernels


def stage_handoff_bytes(model: ModelSpec, batch: BatchState) -> dict:
    """Full-width activation bytes handed across each stage boundary.

    Used to charge interconnect transfers when the consuming stage occupies
    the peer side; the fc stage has two internal full-width handoffs (the
    ln2 -> ffn1 and activation -> ffn2 inputs are fully copied).
    """
    bpe = model.bytes_per_element
    b, d, o = batch.batch_size, model.model_dim, model.ffn_dim
    return {
        "qkv->attn": b * (d + 2 * model.kv_dim) * bpe,
        "attn->fc": b * d * bpe,
        "fc-internal": b * (d + o) * bpe,
        "fc->next": b * d * bpe,
    }


def advance_batch(batch: BatchState, policy: ScenarioPolicy,
                  rng: random.Random, model: Optional[ModelSpec] = None) -> BatchState:
    """Advance one iteration: survivors grow by one token, finished requests
    are replaced by new ones with drawn prompt lengths (batch size fixed)."""
    max_len = model.max_seq_len if model else None
    new_lens = []
    for i, s in enumerate(batch.seq_lens):
        if policy.target_lens is not None:
            done = s + 1 >= policy.target_lens[i % len(policy.target_lens)]
        else:
            done = rng.random() < policy.termination_prob
        if not done and max_len is not None and s + 1 > max_len:
            done = True
        if done:
            hi = policy.prompt_max if max_len is None else min(policy.prompt_max, max_len)
            new_lens.append(rng.randint(policy.prompt_min, hi))
        else:
            new_lens.append(s + 1)
    return BatchState(batch.batch_size, tuple(new_lens), batch.iteration + 1)


# ---------------------------------------------------------------------------
# model presets
# ---------------------------------------------------------------------------

def model_from_dict(cfg: dict) -> ModelSpec:
    try:
        return ModelSpec(**cfg)
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from e


def load_model(name_or_path: str) -> ModelSpec:
    """Load a model spec by preset name or from a JSON file."""
    preset = name_or_path.lower()
    try:
        ref = resources.files("asymsim.configs.models") / f"{preset}.json"
        if ref.is_file():
            return model_from_dict(json.loads(ref.read_text()))
    except (ModuleNotFoundError, FileNotFoundError):
        pass
    try:
        with open(name_or_path) as f:
            return model_from_dict(json.load(f))
    except FileNotFoundError:
        raise ConfigError(f"unknown model preset or file: {name_or_path}")


MODEL_PRESETS = ("gpt3-175b", "chinchilla-70b", "llama2-70b")
