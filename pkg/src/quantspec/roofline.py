"""Exact FLOP/MOP counters, arithmetic intensity, and ridge-point
classification for decoder-only transformer inference.

Counting conventions (used consistently by all tests):
  - matmul of [m,k] x [k,n] costs 2*m*k*n FLOPs;
  - the linear operation set is the seven weight-to-activation matrices
    (query/key/value/output projections, MLP up and down, classifier);
  - every tensor is counted once per producer and once per consumer, so a
    matmul moves input + weights + output bytes;
  - prefill attention FLOPs carry a 0.5 causal-mask factor;
  - the score matrix is never materialized: attention moves only O(B*S)
    score-statistics bytes per layer;
  - nonlinear work (softmax, norms, gated activation) is added to the
    aggregate FLOPs with small documented constants and no extra MOPs
    (assumed fused with their producers).

Latency model: max(flops/peak_flops, mops/peak_bw); an operation is
memory-bound iff its intensity falls below the hardware ridge point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError

FP16_BYTES = 2.0
INT8_BYTES = 1.0
INT4_BYTES = 0.5

SOFTMAX_FLOPS_PER_SCORE = 5.0
NORM_FLOPS_PER_ELEM = 4.0
ACT_FLOPS_PER_ELEM = 4.0


@dataclass(frozen=True)
class HardwareSpec:
    """Peak numbers of one device; always configuration-supplied."""

    name: str
    peak_flops: float  # FLOP/s
    peak_bw: float  # bytes/s
    vram_bytes: float
    devices: int = 1

    def __post_init__(self) -> None:
        if min(self.peak_flops, self.peak_bw, self.vram_bytes) <= 0 or self.devices < 1:
            raise ConfigError("hardware spec values must be positive")

    @property
    def ridge(self) -> float:
        return self.peak_flops / self.peak_bw

    @classmethod
    def from_json(cls, path) -> "HardwareSpec":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(
            name=str(data.get("name", "custom")),
            peak_flops=float(data["peak_flops"]),
            peak_bw=float(data["peak_bw"]),
            vram_bytes=float(data["vram_bytes"]),
            devices=int(data.get("devices", 1)),
        )


@dataclass(frozen=True)
class ModelDims:
    """Transformer dimensions relevant to counting."""

    hidden: int
    num_layers: int
    mlp_hidden: int
    vocab: int
    num_heads: int = 32

    @property
    def kv_dim(self) -> int:
        return self.hidden

    def linear_weight_count(self) -> int:
        """Elements of the seven counted matrices."""
        d, m = self.hidden, self.mlp_hidden
        return self.num_layers * (4 * d * d + 2 * d * m) + d * self.vocab

    def linear_act_width(self) -> int:
        """Sum of input+output widths of the counted matrices (per token)."""
        d, m = self.hidden, self.mlp_hidden
        return self.num_layers * (4 * (d + d) + 2 * (d + m)) + (d + self.vocab)

    def total_weight_count(self) -> int:
        """All resident weights: adds the gated-MLP third matrix, the
        embedding table and the norm gains."""
        d = self.hidden
        extra = self.num_layers * d * self.mlp_hidden  # gate
        extra += self.vocab * d  # embedding
        extra += (2 * self.num_layers + 1) * d  # norm gains
        return self.linear_weight_count() + extra


LLAMA2_7B = ModelDims(hidden=4096, num_layers=32, mlp_hidden=11008, vocab=32000, num_heads=32)

_DIMS_PRESETS = {"llama2-7b": LLAMA2_7B}


def dims_preset(name: str) -> ModelDims:
    try:
        return _DIMS_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dims preset {name!r}; available: {sorted(_DIMS_PRESETS)}")


@dataclass(frozen=True)
class WorkloadPoint:
    """One (batch, context) evaluation point with per-element byte widths."""

    batch: int
    context_len: int
    gen_len: int = 1
    bytes_weights: float = FP16_BYTES
    bytes_kv: float = FP16_BYTES
    bytes_act: float = FP16_BYTES

    def __post_init__(self) -> None:
        if min(self.batch, self.context_len, self.gen_len) < 1:
            raise ConfigError("workload point dimensions must be positive")
        if min(self.bytes_weights, self.bytes_kv, self.bytes_act) <= 0:
            raise ConfigError("bytes-per-element must be positive")


@dataclass(frozen=True)
class RooflinePoint:
    flops: float
    mops: float

    @property
    def intensity(self) -> float:
        return self.flops / self.mops


@dataclass(frozen=True)
class PhaseCounts:
    linear: RooflinePoint
    attention: RooflinePoint
    aggregate: RooflinePoint


@dataclass(frozen=True)
class Classification:
    bound: str  # "compute" | "memory"
    latency: float


def count_prefill(w: WorkloadPoint, dims: ModelDims) -> PhaseCounts:
    """Exact counts for one full prompt pass of ``context_len`` tokens."""
    b, s = w.batch, w.context_len
    d, layers = dims.hidden, dims.num_layers

    lin_flops = 2.0 * b * s * dims.linear_weight_count()
    lin_mops = dims.linear_weight_count() * w.bytes_weights
    lin_mops += b * s * dims.linear_act_width() * w.bytes_act

    att_flops = 0.5 * 4.0 * b * s * s * d * layers  # qk + av, causal-halved
    att_mops = layers * (4.0 * b * s * d + b * s) * w.bytes_act  # q/k/v/o + score stats

    softmax = SOFTMAX_FLOPS_PER_SCORE * 0.5 * b * s * s * dims.num_heads * layers
    norms = NORM_FLOPS_PER_ELEM * b * s * d * (2 * layers + 1)
    act = ACT_FLOPS_PER_ELEM * b * s * dims.mlp_hidden * layers
    agg_flops = lin_flops + att_flops + softmax + norms + act
    agg_mops = lin_mops + att_mops

    return PhaseCounts(
        linear=RooflinePoint(lin_flops, lin_mops),
        attention=RooflinePoint(att_flops, att_mops),
        aggregate=RooflinePoint(agg_flops, agg_mops),
    )


def count_decode(w: WorkloadPoint, dims: ModelDims) -> PhaseCounts:
    """Exact counts for generating ``gen_len`` tokens at context ``context_len``.

    Weights and the KV history are reloaded for every generated token.
    """
    b, s, k = w.batch, w.context_len, w.gen_len
    d, layers = dims.hidden, dims.num_layers

    lin_flops = 2.0 * b * dims.linear_weight_count()
    lin_mops = dims.linear_weight_count() * w.bytes_weights
    lin_mops += b * dims.linear_act_width() * w.bytes_act

    att_flops = 4.0 * b * s * d * layers
    kv_bytes = 2.0 * b * s * dims.kv_dim * w.bytes_kv * layers
    att_mops = kv_bytes + layers * (b * s + 2.0 * b * d) * w.bytes_act

    softmax = SOFTMAX_FLOPS_PER_SCORE * b * s * dims.num_heads * layers
    norms = NORM_FLOPS_PER_ELEM * b * d * (2 * layers + 1)
    act = ACT_FLOPS_PER_ELEM * b * dims.mlp_hidden * layers
    agg_flops = lin_flops + att_flops + softmax + norms + act
    agg_mops = lin_mops + att_mops

    return PhaseCounts(
        linear=RooflinePoint(k * lin_flops, k * lin_mops),
        attention=RooflinePoint(k * att_flops, k * att_mops),
        aggregate=RooflinePoint(k * agg_flops, k * agg_mops),
    )


def classify(point: RooflinePoint, hw: HardwareSpec) -> Classification:
    """Ridge comparison plus the max(compute, memory) latency model."""
    latency = max(point.flops / hw.peak_flops, point.mops / hw.peak_bw)
    bound = "compute" if point.intensity >= hw.ridge else "memory"
    return Classification(bound=bound, latency=latency)


def attention_latency_fraction(counts: PhaseCounts, hw: HardwareSpec) -> float:
    """Attention's share of the aggregate modeled latency."""
    att = classify(counts.attention, hw).latency
    agg = classify(counts.aggregate, hw).latency
    return att / agg if agg > 0 else 0.0


# ---------------------------------------------------------------------------
# KV-vs-weights memory accounting
# ---------------------------------------------------------------------------


def kv_cache_bytes(batch: int, context_len: int, dims: ModelDims, bytes_kv: float = FP16_BYTES) -> float:
    """K and V for every token of every sequence, all layers."""
    return 2.0 * batch * context_len * dims.num_layers * dims.kv_dim * bytes_kv


@dataclass(frozen=True)
class KvMemoryRow:
    batch: int
    context_len: int
    kv_bytes: float
    weight_bytes: float
    ratio: float
    fits: bool


def kv_memory_sweep(
    batches,
    context_lens,
    dims: ModelDims,
    hw: HardwareSpec,
    *,
    bytes_kv: float = FP16_BYTES,
    bytes_weights: float = FP16_BYTES,
) -> list[KvMemoryRow]:
    weight_bytes = dims.total_weight_count() * bytes_weights
    rows = []
    for b in batches:
        for s in context_lens:
            kv = kv_cache_bytes(b, s, dims, bytes_kv)
            rows.append(
                KvMemoryRow(
                    batch=b,
                    context_len=s,
                    kv_bytes=kv,
                    weight_bytes=weight_bytes,
                    ratio=kv / weight_bytes,
                    fits=kv + weight_bytes <= hw.vram_bytes * hw.devices,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Speculative speedup model
# ---------------------------------------------------------------------------


def speedup_model(
    acceptance_rate: float,
    gamma: int,
    draft_cost: float,
    target_cost: float,
    ar_cost: float = 1.0,
) -> float:
    """Expected speedup of one speculative cycle over autoregressive decoding.

    Expected emitted tokens per cycle E = (1 - a^(gamma+1)) / (1 - a) for
    a < 1 (gamma+1 at a = 1); speedup = E * ar_cost / (gamma*draft_cost +
    target_cost).  Costs are per-token latencies in any common unit.
    """
    if not 0.0 <= acceptance_rate <= 1.0:
        raise ConfigError(f"acceptance rate must lie in [0, 1], got {acceptance_rate}")
    if gamma < 1:
        raise ConfigError(f"gamma must be >= 1, got {gamma}")
    a = acceptance_rate
    expected = float(gamma + 1) if a >= 1.0 else (1.0 - a ** (gamma + 1)) / (1.0 - a)
    return expected * ar_cost / (gamma * draft_cost + target_cost)


def decode_token_latency(
    dims: ModelDims,
    batch: int,
    context_len: int,
    hw: HardwareSpec,
    *,
    bytes_weights: float,
    bytes_kv: float,
    bytes_act: float = FP16_BYTES,
) -> float:
    """Modeled per-token decode latency under the given byte widths."""
    w = WorkloadPoint(
        batch=batch,
        context_len=context_len,
        bytes_weights=bytes_weights,
        bytes_kv=bytes_kv,
        bytes_act=bytes_act,
    )
    return classify(count_decode(w, dims).aggregate, hw).latency


def modeled_ablation_speedup(
    acceptance_rate: float,
    gamma: int,
    *,
    dims: ModelDims,
    batch: int,
    context_len: int,
    hw: HardwareSpec,
    kv_quant: bool,
    weight_quant: bool,
) -> float:
    """Cost-model speedup of one quantization configuration.

    The autoregressive baseline runs 16-bit weights and KV; the draft loads
    4-bit weights and/or the 4-bit KV view when the corresponding toggle is
    on; verification always runs 16-bit weights but reads the 8-bit KV view
    when the KV cache is quantized.
    """
    ar = decode_token_latency(dims, batch, context_len, hw, bytes_weights=FP16_BYTES, bytes_kv=FP16_BYTES)
    draft = decode_token_latency(
        dims,
        batch,
        context_len,
        hw,
        bytes_weights=INT4_BYTES if weight_quant else FP16_BYTES,
        bytes_kv=INT4_BYTES if kv_quant else FP16_BYTES,
    )
    verify = decode_token_latency(
        dims,
        batch,
        context_len,
        hw,
        bytes_weights=FP16_BYTES,
        bytes_kv=INT8_BYTES if kv_quant else FP16_BYTES,
    )
    return speedup_model(acceptance_rate, gamma, draft, verify, ar)
