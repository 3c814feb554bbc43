"""Hierarchical KV cache: two 4-bit planes per tensor plus a double
full-precision buffer holding the most recent tokens.

Keys are quantized with per-channel groups fitted over each flushed block of
``group_size`` tokens (a group spans G tokens of one channel); values with
per-token groups over channel runs (a group never spans tokens).  The
full-precision region keeps between G and 2G of the newest tokens: ``fp1``
is (re)filled at every flush, ``fp2`` collects decode appends and absorbs
rollbacks.  Layers listed as sensitive skip quantization entirely and keep
their history in float32.

Storage-model byte accounting: 0.5 B per 4-bit code, 8 B per (scale, zero)
group pair, 4 B per float32 buffer element.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .errors import (
    BufferOverflowError,
    CacheIntegrityError,
    ConfigError,
    DimensionError,
    EmptyPromptError,
    FormatError,
)

FP_ELEM_BYTES = 4.0
DRAFT_CODE_BYTES = 0.5  # upper plane only
TARGET_CODE_BYTES = 1.0  # upper + lower planes

SNAPSHOT_MAGIC = b"QSKV"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class CacheLayout:
    """Static shape of one cache instance."""

    num_layers: int
    num_heads: int
    head_dim: int
    group_size: int
    sensitive_layers: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError("cache layout dimensions must be positive")
        if self.group_size < 1:
            raise ConfigError(f"group size must be >= 1, got {self.group_size}")
        bad = [l for l in self.sensitive_layers if not 0 <= l < self.num_layers]
        if bad:
            raise ConfigError(f"sensitive layer indices out of range: {bad}")

    @property
    def kv_dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclass
class CacheView:
    """Token-ordered dequantized segments plus byte-load accounting."""

    segments: list[tuple[np.ndarray, np.ndarray]]
    quantized_bytes: float = 0.0
    param_bytes: float = 0.0
    fp_bytes: float = 0.0
    quantized_elements: int = 0

    @property
    def seq_len(self) -> int:
        return sum(k.shape[0] for k, _ in self.segments)

    def concat(self) -> tuple[np.ndarray, np.ndarray]:
        ks = [k for k, _ in self.segments]
        vs = [v for _, v in self.segments]
        return np.concatenate(ks, axis=0), np.concatenate(vs, axis=0)


@dataclass
class MemoryReport:
    """Exact byte totals per storage component."""

    upper_bytes: float
    lower_bytes: float
    param_bytes: float
    fp_buffer_bytes: float
    archived_fp_bytes: float

    @property
    def total(self) -> float:
        return (
            self.upper_bytes
            + self.lower_bytes
            + self.param_bytes
            + self.fp_buffer_bytes
            + self.archived_fp_bytes
        )


@dataclass
class _LayerStore:
    """Per-layer quantized history: one plane quartet per flushed block."""

    key_upper: list[quant.QuantPlane] = field(default_factory=list)
    key_lower: list[quant.QuantPlane] = field(default_factory=list)
    value_upper: list[quant.QuantPlane] = field(default_factory=list)
    value_lower: list[quant.QuantPlane] = field(default_factory=list)
    archived_k: list[np.ndarray] = field(default_factory=list)  # sensitive layers only
    archived_v: list[np.ndarray] = field(default_factory=list)


class HierarchicalKVCache:
    """Mutable per-session cache; one logical owner mutates it at a time."""

    def __init__(self, layout: CacheLayout):
        self.layout = layout
        g, kv = layout.group_size, layout.kv_dim
        self._stores = [_LayerStore() for _ in range(layout.num_layers)]
        self._fp1_k = [np.zeros((g, kv), dtype=np.float32) for _ in range(layout.num_layers)]
        self._fp1_v = [np.zeros((g, kv), dtype=np.float32) for _ in range(layout.num_layers)]
        self._fp2_k = [np.zeros((g, kv), dtype=np.float32) for _ in range(layout.num_layers)]
        self._fp2_v = [np.zeros((g, kv), dtype=np.float32) for _ in range(layout.num_layers)]
        self._fp1_len = 0
        self._fp2_len = np.zeros(layout.num_layers, dtype=np.int64)  # per-layer append progress
        self.quantized_token_count = 0
        self._view_memo: dict[tuple[int, str], tuple[int, np.ndarray, np.ndarray]] = {}

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def from_prefill(
        cls,
        layout: CacheLayout,
        keys: list[np.ndarray],
        values: list[np.ndarray],
    ) -> "HierarchicalKVCache":
        """Build a cache from per-layer prompt K/V of shape [S_P, kv_dim].

        The oldest ``floor((S_P-G)/G)*G`` tokens are quantized block by
        block; of the remaining r in [G, 2G), the oldest G fill fp1 and the
        rest land in fp2.  Prompts shorter than G sit entirely in a partial
        fp1.
        """
        if len(keys) != layout.num_layers or len(values) != layout.num_layers:
            raise DimensionError("prefill K/V must supply one tensor per layer")
        s_p = int(keys[0].shape[0])
        if s_p == 0:
            raise EmptyPromptError("cannot prefill an empty prompt")
        g = layout.group_size
        for k, v in zip(keys, values):
            if k.shape != (s_p, layout.kv_dim) or v.shape != (s_p, layout.kv_dim):
                raise DimensionError(
                    f"prefill tensors must be [S_P, {layout.kv_dim}], got {k.shape} / {v.shape}"
                )
        cache = cls(layout)
        n_quant = ((s_p - g) // g) * g if s_p >= g else 0
        rest = s_p - n_quant
        fp1_n = min(g, rest)
        fp2_n = rest - fp1_n
        for layer in range(layout.num_layers):
            k = np.asarray(keys[layer], dtype=np.float32)
            v = np.asarray(values[layer], dtype=np.float32)
            for b in range(n_quant // g):
                cache._quantize_block(layer, k[b * g : (b + 1) * g], v[b * g : (b + 1) * g])
            cache._fp1_k[layer][:fp1_n] = k[n_quant : n_quant + fp1_n]
            cache._fp1_v[layer][:fp1_n] = v[n_quant : n_quant + fp1_n]
            if fp2_n:
                cache._fp2_k[layer][:fp2_n] = k[n_quant + fp1_n :]
                cache._fp2_v[layer][:fp2_n] = v[n_quant + fp1_n :]
        cache._fp1_len = fp1_n
        cache._fp2_len[:] = fp2_n
        cache.quantized_token_count = n_quant
        return cache

    # ------------------------------------------------------------------
    # counters
    # ------------------------------------------------------------------

    @property
    def fp1_len(self) -> int:
        return self._fp1_len

    @property
    def fp2_len(self) -> int:
        """Append progress of the newest-token buffer (layer-0 count)."""
        return int(self._fp2_len[0])

    @property
    def fp_token_count(self) -> int:
        return self._fp1_len + self.fp2_len

    @property
    def seq_len(self) -> int:
        return self.quantized_token_count + self.fp_token_count

    def fp2_space(self) -> int:
        return self.layout.group_size - self.fp2_len

    def check_layer_consistency(self) -> None:
        if not np.all(self._fp2_len == self._fp2_len[0]):
            raise CacheIntegrityError(f"per-layer append counts diverged: {self._fp2_len.tolist()}")

    # ------------------------------------------------------------------
    # mutation
    # ------------------------------------------------------------------

    def append_decode_token(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Store one token's K/V row in fp2 for ``layer``.

        The logical length advances once per full layer sweep; callers feed
        layers in order for each token.
        """
        kv = self.layout.kv_dim
        k = np.asarray(k, dtype=np.float32).ravel()
        v = np.asarray(v, dtype=np.float32).ravel()
        if k.size != kv or v.size != kv:
            raise DimensionError(f"expected kv rows of width {kv}, got {k.size}/{v.size}")
        pos = int(self._fp2_len[layer])
        if pos >= self.layout.group_size:
            raise BufferOverflowError(
                f"fp2 is full (layer {layer}); the engine must flush before appending"
            )
        self._fp2_k[layer][pos] = k
        self._fp2_v[layer][pos] = v
        self._fp2_len[layer] = pos + 1

    def rollback(self, n_reject: int) -> None:
        """Drop the last ``n_reject`` fp2 tokens in every layer."""
        if n_reject < 0:
            raise ConfigError(f"rollback count must be nonnegative, got {n_reject}")
        if n_reject == 0:
            return
        self.check_layer_consistency()
        if n_reject > self.fp2_len:
            raise CacheIntegrityError(
                f"cannot roll back {n_reject} tokens; fp2 holds only {self.fp2_len}"
            )
        self._fp2_len -= n_reject

    def flush_if_full(self) -> bool:
        """Quantize fp1 and rotate fp2 into it once fp2 reaches capacity.

        Only call after verification has settled fp2's contents.  While fp1
        is still partial (short prompts) the rotation tops fp1 up without
        quantizing anything.
        """
        self.check_layer_consistency()
        g = self.layout.group_size
        if self.fp2_len != g:
            return False
        if self._fp1_len == g:
            for layer in range(self.layout.num_layers):
                self._quantize_block(layer, self._fp1_k[layer], self._fp1_v[layer])
                self._fp1_k[layer][:] = self._fp2_k[layer]
                self._fp1_v[layer][:] = self._fp2_v[layer]
            self.quantized_token_count += g
        else:
            short = self._fp1_len
            take = g - short  # fp2 rows moved up to complete fp1
            for layer in range(self.layout.num_layers):
                self._fp1_k[layer][short:] = self._fp2_k[layer][:take]
                self._fp1_v[layer][short:] = self._fp2_v[layer][:take]
                keep_k = self._fp2_k[layer][take:].copy()
                keep_v = self._fp2_v[layer][take:].copy()
                self._fp2_k[layer][:short] = keep_k
                self._fp2_v[layer][:short] = keep_v
            self._fp2_len[:] = short
            self._fp1_len = g
            return True
        self._fp1_len = g
        self._fp2_len[:] = 0
        return True

    def _quantize_block(self, layer: int, k_block: np.ndarray, v_block: np.ndarray) -> None:
        layout = self.layout
        store = self._stores[layer]
        if layer in layout.sensitive_layers:
            store.archived_k.append(np.array(k_block, dtype=np.float32))
            store.archived_v.append(np.array(v_block, dtype=np.float32))
            return
        # keys: channel-major flattening -> one group per (channel, block)
        k_flat = np.ascontiguousarray(k_block.T).ravel()
        ku, kl = quant.encode_plane_hierarchical(k_flat, layout.group_size, quant.AXIS_CHANNEL)
        # values: token-major flattening; row_len pins groups inside a token
        v_flat = np.ascontiguousarray(v_block).ravel()
        vu, vl = quant.encode_plane_hierarchical(
            v_flat, layout.group_size, quant.AXIS_TOKEN, row_len=layout.kv_dim
        )
        store.key_upper.append(ku)
        store.key_lower.append(kl)
        store.value_upper.append(vu)
        store.value_lower.append(vl)
        self._view_memo.pop((layer, "draft"), None)
        self._view_memo.pop((layer, "target"), None)

    # ------------------------------------------------------------------
    # views
    # ------------------------------------------------------------------

    def draft_view(self, layer: int) -> CacheView:
        """Upper-plane reconstruction plus the fp buffers, in token order."""
        return self._view(layer, "draft")

    def target_view(self, layer: int) -> CacheView:
        """Two-plane reconstruction plus the fp buffers, in token order."""
        return self._view(layer, "target")

    def _decode_block(self, layer: int, block: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
        layout = self.layout
        store = self._stores[layer]
        g, kv = layout.group_size, layout.kv_dim
        if kind == "draft":
            k_flat = quant.decode_plane_draft(store.key_upper[block])
            v_flat = quant.decode_plane_draft(store.value_upper[block])
        else:
            k_flat = quant.decode_plane_target(store.key_upper[block], store.key_lower[block])
            v_flat = quant.decode_plane_target(store.value_upper[block], store.value_lower[block])
        k = np.ascontiguousarray(k_flat.reshape(kv, g).T).astype(np.float32)
        v = v_flat.reshape(g, kv).astype(np.float32)
        return k, v

    def _quantized_region(self, layer: int, kind: str) -> tuple[np.ndarray, np.ndarray] | None:
        store = self._stores[layer]
        n_blocks = len(store.key_upper)
        if n_blocks == 0:
            return None
        memo = self._view_memo.get((layer, kind))
        if memo is not None and memo[0] == n_blocks:
            return memo[1], memo[2]
        parts = [self._decode_block(layer, b, kind) for b in range(n_blocks)]
        k = np.concatenate([p[0] for p in parts], axis=0)
        v = np.concatenate([p[1] for p in parts], axis=0)
        self._view_memo[(layer, kind)] = (n_blocks, k, v)
        return k, v

    def _view(self, layer: int, kind: str) -> CacheView:
        if not 0 <= layer < self.layout.num_layers:
            raise ConfigError(f"layer index {layer} out of range")
        store = self._stores[layer]
        view = CacheView(segments=[])
        code_bytes = DRAFT_CODE_BYTES if kind == "draft" else TARGET_CODE_BYTES
        if layer in self.layout.sensitive_layers:
            if store.archived_k:
                k = np.concatenate(store.archived_k, axis=0)
                v = np.concatenate(store.archived_v, axis=0)
                view.segments.append((k, v))
                view.fp_bytes += FP_ELEM_BYTES * (k.size + v.size)
        else:
            region = self._quantized_region(layer, kind)
            if region is not None:
                k, v = region
                view.segments.append((k, v))
                elems = k.size + v.size
                view.quantized_elements += elems
                view.quantized_bytes += code_bytes * elems
                groups = sum(p.num_groups for p in store.key_upper) + sum(
                    p.num_groups for p in store.value_upper
                )
                if kind == "target":
                    groups *= 2  # lower-plane params loaded as well
                view.param_bytes += quant.PARAM_PAIR_BYTES * groups
        for buf_k, buf_v, n in (
            (self._fp1_k[layer], self._fp1_v[layer], self._fp1_len),
            (self._fp2_k[layer], self._fp2_v[layer], int(self._fp2_len[layer])),
        ):
            if n:
                view.segments.append((buf_k[:n], buf_v[:n]))
                view.fp_bytes += FP_ELEM_BYTES * 2 * n * self.layout.kv_dim
        return view

    # ------------------------------------------------------------------
    # accounting and snapshots
    # ------------------------------------------------------------------

    def memory_report(self) -> MemoryReport:
        upper = lower = params = archived = 0.0
        for store in self._stores:
            for p in store.key_upper + store.value_upper:
                upper += p.code_bytes()
                params += p.param_bytes()
            for p in store.key_lower + store.value_lower:
                lower += p.code_bytes()
                params += p.param_bytes()
            archived += sum(FP_ELEM_BYTES * (a.size) for a in store.archived_k)
            archived += sum(FP_ELEM_BYTES * (a.size) for a in store.archived_v)
        g, kv = self.layout.group_size, self.layout.kv_dim
        buffers = FP_ELEM_BYTES * self.layout.num_layers * 2 * 2 * g * kv  # K+V, fp1+fp2 capacity
        return MemoryReport(
            upper_bytes=upper,
            lower_bytes=lower,
            param_bytes=params,
            fp_buffer_bytes=buffers,
            archived_fp_bytes=archived,
        )

    def save_snapshot(self, path) -> None:
        with open(path, "wb") as f:
            self._write_snapshot(f)

    def _write_snapshot(self, f) -> None:
        self.check_layer_consistency()
        lay = self.layout
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<B", SNAPSHOT_VERSION))
        sens = sorted(lay.sensitive_layers)
        f.write(
            struct.pack(
                "<IIIII", lay.num_layers, lay.num_heads, lay.head_dim, lay.group_size, len(sens)
            )
        )
        for s in sens:
            f.write(struct.pack("<I", s))
        f.write(struct.pack("<QII", self.quantized_token_count, self._fp1_len, self.fp2_len))
        for layer in range(lay.num_layers):
            store = self._stores[layer]
            if layer in lay.sensitive_layers:
                f.write(struct.pack("<I", len(store.archived_k)))
                for ak, av in zip(store.archived_k, store.archived_v):
                    f.write(struct.pack("<I", ak.shape[0]))
                    f.write(ak.astype("<f4").tobytes())
                    f.write(av.astype("<f4").tobytes())
            else:
                f.write(struct.pack("<I", len(store.key_upper)))
                for b in range(len(store.key_upper)):
                    for plane in (
                        store.key_upper[b],
                        store.key_lower[b],
                        store.value_upper[b],
                        store.value_lower[b],
                    ):
                        _write_plane(f, plane)
            for buf, n in (
                (self._fp1_k[layer], self._fp1_len),
                (self._fp1_v[layer], self._fp1_len),
                (self._fp2_k[layer], self.fp2_len),
                (self._fp2_v[layer], self.fp2_len),
            ):
                f.write(buf[:n].astype("<f4").tobytes())

    @classmethod
    def load_snapshot(cls, path) -> "HierarchicalKVCache":
        with open(path, "rb") as f:
            data = f.read()
        return cls._read_snapshot(io.BytesIO(data))

    @classmethod
    def _read_snapshot(cls, f) -> "HierarchicalKVCache":
        magic = f.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"bad snapshot magic {magic!r}")
        (version,) = _unpack(f, "<B")
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        num_layers, num_heads, head_dim, group_size, n_sens = _unpack(f, "<IIIII")
        sens = frozenset(_unpack(f, "<I")[0] for _ in range(n_sens))
        layout = CacheLayout(num_layers, num_heads, head_dim, group_size, sens)
        cache = cls(layout)
        quantized, fp1_len, fp2_len = _unpack(f, "<QII")
        kv = layout.kv_dim
        for layer in range(num_layers):
            store = cache._stores[layer]
            if layer in sens:
                (n_arch,) = _unpack(f, "<I")
                for _ in range(n_arch):
                    (rows,) = _unpack(f, "<I")
                    store.archived_k.append(_read_f32(f, (rows, kv)))
                    store.archived_v.append(_read_f32(f, (rows, kv)))
            else:
                (n_blocks,) = _unpack(f, "<I")
                for _ in range(n_blocks):
                    store.key_upper.append(_read_plane(f))
                    store.key_lower.append(_read_plane(f))
                    store.value_upper.append(_read_plane(f))
                    store.value_lower.append(_read_plane(f))
            cache._fp1_k[layer][:fp1_len] = _read_f32(f, (fp1_len, kv))
            cache._fp1_v[layer][:fp1_len] = _read_f32(f, (fp1_len, kv))
            cache._fp2_k[layer][:fp2_len] = _read_f32(f, (fp2_len, kv))
            cache._fp2_v[layer][:fp2_len] = _read_f32(f, (fp2_len, kv))
        cache._fp1_len = fp1_len
        cache._fp2_len[:] = fp2_len
        cache.quantized_token_count = quantized
        return cache


# snapshot plumbing -----------------------------------------------------------

_AXIS_CODES = {quant.AXIS_CHANNEL: 0, quant.AXIS_TOKEN: 1}
_MODE_CODES = {quant.MODE_ASYM_U4: 0, quant.MODE_SYM_S4: 1}
_AXIS_NAMES = {v: k for k, v in _AXIS_CODES.items()}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def _unpack(f, fmt: str):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise FormatError("snapshot truncated")
    return struct.unpack(fmt, raw)


def _read_f32(f, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 0
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError("snapshot truncated")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _write_plane(f, plane: quant.QuantPlane) -> None:
    f.write(
        struct.pack(
            "<QIIBBI",
            plane.count,
            plane.group_size,
            plane.row_len or 0,
            _AXIS_CODES[plane.axis],
            _MODE_CODES[plane.mode],
            plane.num_groups,
        )
    )
    f.write(plane.codes.tobytes())
    f.write(plane.scales.astype("<f4").tobytes())
    f.write(plane.zeros.astype("<f4").tobytes())


def _read_plane(f) -> quant.QuantPlane:
    count, group_size, row_len, axis_code, mode_code, ngroups = _unpack(f, "<QIIBBI")
    n_code_bytes = (count + 1) // 2
    raw = f.read(n_code_bytes)
    if len(raw) != n_code_bytes:
        raise FormatError("snapshot truncated")
    codes = np.frombuffer(raw, dtype=np.uint8).copy()
    scales = _read_f32(f, (ngroups,))
    zeros = _read_f32(f, (ngroups,))
    return quant.QuantPlane(
        codes=codes,
        count=count,
        group_size=group_size,
        scales=scales,
        zeros=zeros,
        mode=_MODE_NAMES[mode_code],
        axis=_AXIS_NAMES[axis_code],
        row_len=row_len or None,
    )


# -----------------------------------------------------------------------------
# Plain full-precision cache (lossless runs and oracles)
# -----------------------------------------------------------------------------


class FpKVCache:
    """Full-precision cache with the same append/rollback/view surface.

    All views return the same float32 storage; ``flush_if_full`` is a no-op
    so the speculative engine can run losslessly through identical code
    paths.
    """

    def __init__(self, num_layers: int, kv_dim: int, capacity: int = 64):
        if num_layers < 1 or kv_dim < 1:
            raise ConfigError("cache dimensions must be positive")
        self.num_layers = num_layers
        self.kv_dim = kv_dim
        self._cap = max(capacity, 1)
        self._k = [np.zeros((self._cap, kv_dim), dtype=np.float32) for _ in range(num_layers)]
        self._v = [np.zeros((self._cap, kv_dim), dtype=np.float32) for _ in range(num_layers)]
        self._len = np.zeros(num_layers, dtype=np.int64)

    @classmethod
    def from_prefill(cls, keys: list[np.ndarray], values: list[np.ndarray]) -> "FpKVCache":
        s_p = int(keys[0].shape[0])
        if s_p == 0:
            raise EmptyPromptError("cannot prefill an empty prompt")
        cache = cls(len(keys), int(keys[0].shape[1]), capacity=max(64, 2 * s_p))
        for layer, (k, v) in enumerate(zip(keys, values)):
            cache._k[layer][:s_p] = k
            cache._v[layer][:s_p] = v
        cache._len[:] = s_p
        return cache

    @property
    def seq_len(self) -> int:
        return int(self._len[0])

    @property
    def quantized_token_count(self) -> int:
        return 0

    def fp2_space(self) -> int:
        return 1 << 30  # effectively unbounded

    def check_layer_consistency(self) -> None:
        if not np.all(self._len == self._len[0]):
            raise CacheIntegrityError(f"per-layer append counts diverged: {self._len.tolist()}")

    def _grow(self) -> None:
        self._cap *= 2
        for store in (self._k, self._v):
            for i in range(self.num_layers):
                grown = np.zeros((self._cap, self.kv_dim), dtype=np.float32)
                grown[: store[i].shape[0]] = store[i]
                store[i] = grown

    def append_decode_token(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        k = np.asarray(k, dtype=np.float32).ravel()
        v = np.asarray(v, dtype=np.float32).ravel()
        if k.size != self.kv_dim or v.size != self.kv_dim:
            raise DimensionError(f"expected kv rows of width {self.kv_dim}")
        pos = int(self._len[layer])
        if pos >= self._cap:
            self._grow()
        self._k[layer][pos] = k
        self._v[layer][pos] = v
        self._len[layer] = pos + 1

    def rollback(self, n_reject: int) -> None:
        if n_reject < 0:
            raise ConfigError(f"rollback count must be nonnegative, got {n_reject}")
        if n_reject == 0:
            return
        self.check_layer_consistency()
        if n_reject > self.seq_len:
            raise CacheIntegrityError("rollback past the sequence start")
        self._len -= n_reject

    def flush_if_full(self) -> bool:
        return False

    def _view(self, layer: int) -> CacheView:
        n = int(self._len[layer])
        view = CacheView(segments=[(self._k[layer][:n], self._v[layer][:n])])
        view.fp_bytes = FP_ELEM_BYTES * 2 * n * self.kv_dim
        return view

    def fp_view(self, layer: int) -> CacheView:
        return self._view(layer)

    def draft_view(self, layer: int) -> CacheView:
        return self._view(layer)

    def target_view(self, layer: int) -> CacheView:
        return self._view(layer)

    def memory_report(self) -> MemoryReport:
        used = FP_ELEM_BYTES * 2 * self.seq_len * self.kv_dim * self.num_layers
        return MemoryReport(0.0, 0.0, 0.0, used, 0.0)
