"""A small decoder-only transformer (RMSNorm, rotary positions, MHA, gated
MLP) that runs prefill and per-token decode against full-precision or
hierarchical caches.

Attention during decode is computed chunk-wise: each cache segment
contributes partial softmax statistics (running max, denominator, weighted
numerator) that are merged across segments, so the quantized region and the
recent-token buffers never need to be concatenated.

Weight file format ("QSPW"): magic, u8 version, little-endian config header,
then named float32 tensors, then a CRC32 of the tensor body.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import quant
from .cache import CacheLayout, CacheView, FpKVCache, HierarchicalKVCache
from .errors import ConfigError, DataError, DimensionError, EmptyPromptError, FormatError
from .roofline import ACT_FLOPS_PER_ELEM, NORM_FLOPS_PER_ELEM, SOFTMAX_FLOPS_PER_SCORE
from .tensor import DTYPE, rmsnorm, rope, silu

WEIGHT_MAGIC = b"QSPW"
WEIGHT_VERSION = 1

F32_BYTES = 4.0
INT4_BYTES = 0.5


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    hidden: int
    mlp_hidden: int
    vocab: int
    max_positions: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.hidden != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden ({self.hidden}) must equal num_heads*head_dim "
                f"({self.num_heads}*{self.head_dim})"
            )
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if min(self.num_layers, self.mlp_hidden, self.max_positions) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray  # [V, d]
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray  # [d, V]

    def named_tensors(self):
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "mlp_norm"):
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded random weights with 1/sqrt(fan_in) scaling."""
    rng = np.random.default_rng(seed)
    d, m, v = config.hidden, config.mlp_hidden, config.vocab

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(DTYPE)

    layers = [
        LayerWeights(
            wq=mat(d, d),
            wk=mat(d, d),
            wv=mat(d, d),
            wo=mat(d, d),
            w_gate=mat(d, m),
            w_up=mat(d, m),
            w_down=mat(m, d),
            attn_norm=np.ones(d, dtype=DTYPE),
            mlp_norm=np.ones(d, dtype=DTYPE),
        )
        for _ in range(config.num_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=rng.standard_normal((v, d)).astype(DTYPE),
        layers=layers,
        final_norm=np.ones(d, dtype=DTYPE),
        lm_head=mat(d, v),
    )


# ---------------------------------------------------------------------------
# INT4 draft weights
# ---------------------------------------------------------------------------

_QUANTIZED_MATS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass
class QuantizedModelWeights:
    """Draft-path weight set: INT4 planes plus a cached float32 dequantization.

    Embedding lookups and norm gains stay float32.
    """

    config: ModelConfig
    planes: dict[str, quant.QuantizedLinear]
    layers: list[LayerWeights]  # dequantized copies used for compute
    lm_head: np.ndarray
    int4_weight_bytes: float


def quantize_model_weights(weights: ModelWeights, group_size: int) -> QuantizedModelWeights:
    planes: dict[str, quant.QuantizedLinear] = {}
    deq_layers: list[LayerWeights] = []
    total_bytes = 0.0
    for i, lw in enumerate(weights.layers):
        deq = {}
        for name in _QUANTIZED_MATS:
            q = quant.quantize_weights(getattr(lw, name), group_size)
            planes[f"layers.{i}.{name}"] = q
            deq[name] = quant.dequantize_weights(q)
            total_bytes += q.code_bytes()
        deq_layers.append(
            LayerWeights(
                attn_norm=lw.attn_norm,
                mlp_norm=lw.mlp_norm,
                **deq,
            )
        )
    q_head = quant.quantize_weights(weights.lm_head, group_size)
    planes["lm_head"] = q_head
    total_bytes += q_head.code_bytes()
    return QuantizedModelWeights(
        config=weights.config,
        planes=planes,
        layers=deq_layers,
        lm_head=quant.dequantize_weights(q_head),
        int4_weight_bytes=total_bytes,
    )


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _merged_attention(q: np.ndarray, segments, scale: float) -> np.ndarray:
    """Multi-head attention of one query over [T, H, hd] segments.

    Maintains per-head running max / denominator / numerator across
    segments; equal to monolithic softmax attention over the concatenation.
    """
    n_heads, head_dim = q.shape
    m = np.full(n_heads, -np.inf, dtype=np.float64)
    denom = np.zeros(n_heads, dtype=np.float64)
    acc = np.zeros((n_heads, head_dim), dtype=np.float64)
    for k_seg, v_seg in segments:
        scores = np.einsum("thd,hd->ht", k_seg, q, dtype=np.float64) * scale
        seg_max = scores.max(axis=1)
        m_new = np.maximum(m, seg_max)
        alpha = np.exp(m - m_new)
        p = np.exp(scores - m_new[:, None])
        denom = denom * alpha + p.sum(axis=1)
        acc = acc * alpha[:, None] + np.einsum("ht,thd->hd", p, v_seg, dtype=np.float64)
        m = m_new
    return (acc / denom[:, None]).astype(DTYPE)


def chunked_attention(q: np.ndarray, chunks, scale: float | None = None) -> np.ndarray:
    """Single-head attention of ``q`` over a list of (K, V) chunks.

    Each chunk is [t, dim]; the merged result equals monolithic softmax
    attention over the concatenated sequence.
    """
    q = np.asarray(q, dtype=DTYPE).ravel()
    if not chunks:
        raise ConfigError("chunked attention needs at least one chunk")
    dim = q.size
    segs = []
    total = 0
    for k, v in chunks:
        k = np.asarray(k, dtype=DTYPE)
        v = np.asarray(v, dtype=DTYPE)
        if k.ndim != 2 or k.shape[1] != dim or v.shape != k.shape:
            raise DimensionError(f"chunk shapes {k.shape}/{v.shape} do not match head dim {dim}")
        total += k.shape[0]
        if k.shape[0]:
            segs.append((k.reshape(-1, 1, dim), v.reshape(-1, 1, dim)))
    if total == 0:
        raise ConfigError("chunked attention needs at least one token")
    if scale is None:
        scale = 1.0 / np.sqrt(dim)
    return _merged_attention(q.reshape(1, dim), segs, scale).ravel()


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


@dataclass
class StepCost:
    """Per-step modeled load/compute accounting (desk storage model)."""

    flops: float = 0.0
    weight_bytes: float = 0.0
    kv_quantized_bytes: float = 0.0
    kv_param_bytes: float = 0.0
    kv_fp_bytes: float = 0.0
    kv_quantized_elements: int = 0

    @property
    def total_bytes(self) -> float:
        return self.weight_bytes + self.kv_quantized_bytes + self.kv_param_bytes + self.kv_fp_bytes

    def add(self, other: "StepCost") -> None:
        self.flops += other.flops
        self.weight_bytes += other.weight_bytes
        self.kv_quantized_bytes += other.kv_quantized_bytes
        self.kv_param_bytes += other.kv_param_bytes
        self.kv_fp_bytes += other.kv_fp_bytes
        self.kv_quantized_elements += other.kv_quantized_elements


def _weight_elem_count(config: ModelConfig) -> int:
    d, m, v = config.hidden, config.mlp_hidden, config.vocab
    return config.num_layers * (4 * d * d + 3 * d * m) + d * v


def _rope_block(x: np.ndarray, base: float) -> np.ndarray:
    """Apply per-position rotation to [S, H, hd]; position = row index."""
    s, _, hd = x.shape
    out = np.empty_like(x)
    for pos in range(s):
        out[pos] = rope(x[pos], pos, base)
    return out


def prefill(
    weights: ModelWeights,
    tokens,
    cache_mode: str = "fp",
    *,
    group_size: int | None = None,
    sensitive_layers: frozenset[int] = frozenset(),
) -> tuple[np.ndarray, FpKVCache | HierarchicalKVCache]:
    """Causal forward over the prompt; returns last-token logits and a cache.

    Prefill always runs full-precision weights; ``cache_mode`` selects how
    the prompt K/V are stored afterwards.
    """
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size == 0:
        raise EmptyPromptError("prompt must contain at least one token")
    if ids.size > cfg.max_positions:
        raise ConfigError(f"prompt of {ids.size} tokens exceeds max positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise DataError(f"token ids must lie in [0, {cfg.vocab})")
    if cache_mode not in ("fp", "hierarchical"):
        raise ConfigError(f"unknown cache mode {cache_mode!r}")

    s = ids.size
    h_dim, n_heads = cfg.head_dim, cfg.num_heads
    scale = 1.0 / np.sqrt(h_dim)
    x = weights.embedding[ids]
    causal = np.triu(np.full((s, s), -np.inf, dtype=DTYPE), k=1)
    keys, vals = [], []
    for lw in weights.layers:
        h = rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        q = _rope_block((h @ lw.wq).reshape(s, n_heads, h_dim), cfg.rope_base)
        k = _rope_block((h @ lw.wk).reshape(s, n_heads, h_dim), cfg.rope_base)
        v = (h @ lw.wv).reshape(s, n_heads, h_dim)
        scores = np.einsum("shd,thd->hst", q, k, dtype=np.float64) * scale + causal
        scores -= scores.max(axis=2, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=2, keepdims=True)
        ctx = np.einsum("hst,thd->shd", p, v, dtype=np.float64).astype(DTYPE)
        x = x + ctx.reshape(s, cfg.hidden) @ lw.wo
        hm = rmsnorm(x, lw.mlp_norm, cfg.norm_eps)
        x = x + (silu(hm @ lw.w_gate) * (hm @ lw.w_up)) @ lw.w_down
        keys.append(np.ascontiguousarray(k.reshape(s, cfg.hidden)))
        vals.append(np.ascontiguousarray(v.reshape(s, cfg.hidden)))

    logits = rmsnorm(x[-1], weights.final_norm, cfg.norm_eps) @ weights.lm_head
    if cache_mode == "hierarchical":
        g = group_size if group_size is not None else 128
        layout = CacheLayout(cfg.num_layers, n_heads, h_dim, g, frozenset(sensitive_layers))
        cache = HierarchicalKVCache.from_prefill(layout, keys, vals)
    else:
        cache = FpKVCache.from_prefill(keys, vals)
    return logits.astype(DTYPE), cache


def decode_step(
    weights: ModelWeights,
    token: int,
    cache,
    *,
    view: str = "fp",
    weight_mode: str = "fp",
    draft_weights: QuantizedModelWeights | None = None,
) -> tuple[np.ndarray, StepCost]:
    """One decode pass: append the token's K/V, attend over ``view``, return logits.

    ``view`` selects the dequantized cache representation ("draft" loads the
    upper planes only, "target" both planes, "fp" plain storage).  INT4
    weights are only valid on the draft path.
    """
    cfg = weights.config
    if not 0 <= token < cfg.vocab:
        raise DataError(f"token id {token} outside vocab {cfg.vocab}")
    if cache.seq_len == 0:
        raise ConfigError("decode requires a prefilled cache")
    if weight_mode not in ("fp", "int4"):
        raise ConfigError(f"unknown weight mode {weight_mode!r}")
    if weight_mode == "int4":
        if draft_weights is None:
            raise ConfigError("weight_mode='int4' requires quantized draft weights")
        if view != "draft":
            raise ConfigError("INT4 weights are only used on the draft view")
    view_fns = {
        "fp": getattr(cache, "fp_view", None),
        "draft": getattr(cache, "draft_view", None),
        "target": getattr(cache, "target_view", None),
    }
    view_fn = view_fns.get(view)
    if view_fn is None:
        raise ConfigError(f"cache {type(cache).__name__} does not provide a {view!r} view")

    position = cache.seq_len
    if position >= cfg.max_positions:
        raise ConfigError(f"position {position} exceeds max positions {cfg.max_positions}")
    n_heads, h_dim = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(h_dim)
    mats = draft_weights.layers if weight_mode == "int4" else weights.layers
    lm_head = draft_weights.lm_head if weight_mode == "int4" else weights.lm_head

    cost = StepCost()
    cost.weight_bytes = (
        draft_weights.int4_weight_bytes
        if weight_mode == "int4"
        else F32_BYTES * _weight_elem_count(cfg)
    )

    x = weights.embedding[token].copy()
    d, m = cfg.hidden, cfg.mlp_hidden
    for layer, lw in enumerate(mats):
        h = rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        q = rope((h @ lw.wq).reshape(n_heads, h_dim), position, cfg.rope_base)
        k = rope((h @ lw.wk).reshape(n_heads, h_dim), position, cfg.rope_base)
        v = (h @ lw.wv).reshape(n_heads, h_dim)
        cache.append_decode_token(layer, k.reshape(d), v.reshape(d))

        cv: CacheView = view_fn(layer)
        cost.kv_quantized_bytes += cv.quantized_bytes
        cost.kv_param_bytes += cv.param_bytes
        cost.kv_fp_bytes += cv.fp_bytes
        cost.kv_quantized_elements += cv.quantized_elements
        segs = [
            (ks.reshape(-1, n_heads, h_dim), vs.reshape(-1, n_heads, h_dim))
            for ks, vs in cv.segments
        ]
        ctx = _merged_attention(q, segs, scale)

        x = x + ctx.reshape(d) @ lw.wo
        hm = rmsnorm(x, lw.mlp_norm, cfg.norm_eps)
        x = x + (silu(hm @ lw.w_gate) * (hm @ lw.w_up)) @ lw.w_down

        t_ctx = cv.seq_len
        cost.flops += 2.0 * (4 * d * d + 3 * d * m)  # projections + gated MLP
        cost.flops += 4.0 * t_ctx * d  # qk + av over the context
        cost.flops += SOFTMAX_FLOPS_PER_SCORE * t_ctx * n_heads
        cost.flops += NORM_FLOPS_PER_ELEM * 2 * d + ACT_FLOPS_PER_ELEM * m

    logits = rmsnorm(x, weights.final_norm, cfg.norm_eps) @ lm_head
    cost.flops += 2.0 * d * cfg.vocab + NORM_FLOPS_PER_ELEM * d
    return logits.astype(DTYPE), cost


# ---------------------------------------------------------------------------
# Weight file I/O
# ---------------------------------------------------------------------------


def save_weights(path, weights: ModelWeights) -> None:
    cfg = weights.config
    body = bytearray()
    for name, arr in weights.named_tensors():
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        arr32 = np.asarray(arr, dtype="<f4")
        body += struct.pack("<B", arr32.ndim)
        for dim in arr32.shape:
            body += struct.pack("<I", dim)
        body += arr32.tobytes()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<B", WEIGHT_VERSION))
        f.write(
            struct.pack(
                "<7I",
                cfg.num_layers,
                cfg.num_heads,
                cfg.head_dim,
                cfg.hidden,
                cfg.mlp_hidden,
                cfg.vocab,
                cfg.max_positions,
            )
        )
        f.write(struct.pack("<2d", cfg.rope_base, cfg.norm_eps))
        f.write(struct.pack("<Q", len(body)))
        f.write(bytes(body))
        f.write(struct.pack("<I", zlib.crc32(bytes(body))))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError("weight file truncated")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise FormatError("bad weight-file magic")
    (version,) = struct.unpack("<B", take(1))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight-file version {version}")
    dims = struct.unpack("<7I", take(28))
    rope_base, norm_eps = struct.unpack("<2d", take(16))
    config = ModelConfig(*dims, rope_base=float(rope_base), norm_eps=float(norm_eps))
    (body_len,) = struct.unpack("<Q", take(8))
    body = take(body_len)
    (crc,) = struct.unpack("<I", take(4))
    if zlib.crc32(body) != crc:
        raise FormatError("weight-file checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    boff = 0
    while boff < len(body):
        if boff + 2 > len(body):
            raise FormatError("weight file truncated inside tensor table")
        (name_len,) = struct.unpack_from("<H", body, boff)
        boff += 2
        name = body[boff : boff + name_len].decode("utf-8")
        boff += name_len
        (rank,) = struct.unpack_from("<B", body, boff)
        boff += 1
        shape = struct.unpack_from(f"<{rank}I", body, boff)
        boff += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        end = boff + 4 * count
        if end > len(body):
            raise FormatError("weight file truncated inside tensor data")
        tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=boff).reshape(shape).astype(DTYPE)
        boff = end

    def grab(name: str, shape: tuple[int, ...]) -> np.ndarray:
        arr = tensors.get(name)
        if arr is None:
            raise FormatError(f"weight file missing tensor {name!r}")
        if arr.shape != shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    d, mh, v = config.hidden, config.mlp_hidden, config.vocab
    layers = [
        LayerWeights(
            wq=grab(f"layers.{i}.wq", (d, d)),
            wk=grab(f"layers.{i}.wk", (d, d)),
            wv=grab(f"layers.{i}.wv", (d, d)),
            wo=grab(f"layers.{i}.wo", (d, d)),
            w_gate=grab(f"layers.{i}.w_gate", (d, mh)),
            w_up=grab(f"layers.{i}.w_up", (d, mh)),
            w_down=grab(f"layers.{i}.w_down", (mh, d)),
            attn_norm=grab(f"layers.{i}.attn_norm", (d,)),
            mlp_norm=grab(f"layers.{i}.mlp_norm", (d,)),
        )
        for i in range(config.num_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=grab("embedding", (v, d)),
        layers=layers,
        final_norm=grab("final_norm", (d,)),
        lm_head=grab("lm_head", (d, v)),
    )
