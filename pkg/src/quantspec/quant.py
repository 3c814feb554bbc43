"""Round-to-nearest INT4 quantization with a two-plane upper/lower hierarchy.

The upper plane is an asymmetric 4-bit code (``[0, 15]``) with one
(scale, zero) pair per group.  Its rounding error is re-quantized into a
symmetric 4-bit lower plane (``[-8, 7]``) at 1/16 the upper step, so

    x_hat_target = c_u * S + c_l * S/16 + Z = (16*c_u + c_l) * (S/16) + Z

behaves like an 8-bit reconstruction while ``c_u * S + Z`` alone remains a
valid coarse 4-bit view.  Codes are stored packed two per byte.

Dequantization is computed in float64 so the algebraic identity above holds
to ~1e-15; callers that want engine-precision views cast the result down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheIntegrityError, ConfigError, DataError

SCALE_FLOOR = 1e-8  # zero-range groups must reconstruct exactly via code 0
LOWER_SCALE_DIV = 16.0  # lower-plane step = upper step / 16
ASYM_LEVELS = 15  # upper codes occupy [0, 15]
SYM_MIN = -8
SYM_MAX = 7

CODE_BYTES = 0.5  # one packed nibble
PARAM_PAIR_BYTES = 8.0  # one (scale, zero) float32 pair

MODE_ASYM_U4 = "asymmetric_u4"
MODE_SYM_S4 = "symmetric_s4"

AXIS_CHANNEL = "channel"
AXIS_TOKEN = "token"


@dataclass(frozen=True)
class GroupQuantParams:
    """Scale and zero point for one quantization group."""

    scale: float
    zero_point: float
    mode: str

    def __post_init__(self) -> None:
        if self.scale <= 0.0:
            raise ConfigError(f"group scale must be positive, got {self.scale}")
        if self.mode not in (MODE_ASYM_U4, MODE_SYM_S4):
            raise ConfigError(f"unknown quantization mode {self.mode!r}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round would break ties to even; RTN here rounds half away from zero
    return np.trunc(x + np.copysign(0.5, x))


def _check_finite_group(v: np.ndarray) -> None:
    if v.size == 0:
        raise DataError("cannot quantize an empty group")
    if not np.all(np.isfinite(v)):
        raise DataError("group contains non-finite values")


def quantize_group_asym_u4(values) -> tuple[np.ndarray, GroupQuantParams]:
    """Asymmetric RTN quantization of one group to codes in [0, 15].

    Zero point is the group minimum; scale is ``(max - min)/15`` floored at
    ``SCALE_FLOOR`` so constant groups reconstruct exactly through code 0.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    _check_finite_group(v)
    # round params to float32 before coding so the stored params and the
    # codes are mutually consistent
    zero = float(np.float32(v.min()))
    scale = float(np.float32(max((float(v.max()) - zero) / ASYM_LEVELS, SCALE_FLOOR)))
    codes = np.clip(_round_half_away((v - zero) / scale), 0, ASYM_LEVELS).astype(np.uint8)
    return codes, GroupQuantParams(scale, zero, MODE_ASYM_U4)


def quantize_group_sym_s4(errors, scale: float) -> tuple[np.ndarray, GroupQuantParams]:
    """Symmetric RTN quantization to codes in [-8, 7] with a caller-fixed scale."""
    if scale <= 0.0:
        raise ConfigError(f"symmetric quantization needs a positive scale, got {scale}")
    e = np.asarray(errors, dtype=np.float64).ravel()
    _check_finite_group(e)
    scale = float(np.float32(scale))
    codes = np.clip(_round_half_away(e / scale), SYM_MIN, SYM_MAX).astype(np.int8)
    return codes, GroupQuantParams(scale, 0.0, MODE_SYM_S4)


def hierarchical_encode(values) -> tuple[tuple[np.ndarray, GroupQuantParams], tuple[np.ndarray, GroupQuantParams]]:
    """Encode one group into (upper, lower) code/param pairs.

    The lower plane quantizes the upper plane's reconstruction error at
    step ``S_upper / 16``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    upper_codes, upper = quantize_group_asym_u4(v)
    residual = v - (upper_codes.astype(np.float64) * upper.scale + upper.zero_point)
    lower_codes, lower = quantize_group_sym_s4(residual, upper.scale / LOWER_SCALE_DIV)
    return (upper_codes, upper), (lower_codes, lower)


def dequant_group_draft(codes: np.ndarray, params: GroupQuantParams) -> np.ndarray:
    """Coarse reconstruction from the upper plane alone: c_u*S + Z (float64)."""
    return codes.astype(np.float64) * params.scale + params.zero_point


def dequant_group_target(
    upper_codes: np.ndarray,
    upper: GroupQuantParams,
    lower_codes: np.ndarray,
    lower: GroupQuantParams,
) -> np.ndarray:
    """Two-plane reconstruction: c_u*S + c_l*S/16 + Z (float64)."""
    if upper_codes.shape != lower_codes.shape:
        raise CacheIntegrityError(
            f"upper/lower planes disagree on group structure: {upper_codes.shape} vs {lower_codes.shape}"
        )
    if lower.mode != MODE_SYM_S4 or upper.mode != MODE_ASYM_U4:
        raise CacheIntegrityError("plane modes do not match the hierarchy")
    return (
        upper_codes.astype(np.float64) * upper.scale
        + lower_codes.astype(np.float64) * (upper.scale / LOWER_SCALE_DIV)
        + upper.zero_point
    )


# ---------------------------------------------------------------------------
# Nibble packing
# ---------------------------------------------------------------------------


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit codes two per byte; the low nibble holds the even index.

    Signed codes are stored as two's-complement nibbles.
    """
    c = np.asarray(codes).astype(np.int64) & 0xF
    if c.size % 2:
        c = np.append(c, 0)
    return (c[0::2] | (c[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int, *, signed: bool) -> np.ndarray:
    """Inverse of :func:`pack_nibbles` for ``count`` stored codes."""
    p = np.asarray(packed, dtype=np.uint8)
    out = np.empty(p.size * 2, dtype=np.int16)
    out[0::2] = p & 0xF
    out[1::2] = p >> 4
    out = out[:count]
    if signed:
        out = np.where(out >= 8, out - 16, out)
        return out.astype(np.int8)
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# Packed planes (vectorized over groups)
# ---------------------------------------------------------------------------


@dataclass
class QuantPlane:
    """One packed 4-bit plane plus per-group parameters.

    ``axis`` records the grouping direction of the flattened data
    ("channel": groups run along channels; "token": groups stay within a
    token), purely as layout metadata for consumers.  When ``row_len`` is
    set, grouping restarts at every multiple of it, so groups never cross a
    logical row (a token's channels, or a weight matrix's input dimension);
    the trailing group of each row may be short.
    """

    codes: np.ndarray  # packed uint8, two codes per byte
    count: int  # number of stored codes
    group_size: int
    scales: np.ndarray  # float32, one per group
    zeros: np.ndarray  # float32, one per group
    mode: str
    axis: str
    row_len: int | None = None

    @property
    def num_groups(self) -> int:
        return int(self.scales.size)

    def group_params(self, i: int) -> GroupQuantParams:
        return GroupQuantParams(float(self.scales[i]), float(self.zeros[i]), self.mode)

    def unpacked(self) -> np.ndarray:
        return unpack_nibbles(self.codes, self.count, signed=self.mode == MODE_SYM_S4)

    def group_starts(self) -> np.ndarray:
        return _group_starts(self.count, self.group_size, self.row_len)

    def group_counts(self) -> np.ndarray:
        return np.diff(np.append(self.group_starts(), self.count))

    def code_bytes(self) -> float:
        return self.count * CODE_BYTES

    def param_bytes(self) -> float:
        return self.num_groups * PARAM_PAIR_BYTES


def _group_starts(count: int, group_size: int, row_len: int | None) -> np.ndarray:
    if row_len is None or row_len >= count:
        return np.arange(0, count, group_size, dtype=np.int64)
    if count % row_len:
        raise CacheIntegrityError(f"plane of {count} codes is not a whole number of {row_len}-rows")
    per_row = np.arange(0, row_len, group_size, dtype=np.int64)
    rows = np.arange(0, count, row_len, dtype=np.int64)
    return (rows[:, None] + per_row[None, :]).ravel()


def encode_plane_asym(values, group_size: int, axis: str, row_len: int | None = None) -> QuantPlane:
    """Asymmetric upper-plane encoding of a flat sequence in runs of ``group_size``.

    Short trailing groups (of the sequence, or of each ``row_len`` row) get
    their own params.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    _check_finite_group(v)
    if group_size < 1:
        raise ConfigError(f"group size must be >= 1, got {group_size}")
    starts = _group_starts(v.size, group_size, row_len)
    mins = np.minimum.reduceat(v, starts)
    maxs = np.maximum.reduceat(v, starts)
    counts = np.diff(np.append(starts, v.size))
    zeros = mins.astype(np.float32)
    scales = np.maximum((maxs - zeros.astype(np.float64)) / ASYM_LEVELS, SCALE_FLOOR).astype(np.float32)
    s_elem = np.repeat(scales.astype(np.float64), counts)
    z_elem = np.repeat(zeros.astype(np.float64), counts)
    codes = np.clip(_round_half_away((v - z_elem) / s_elem), 0, ASYM_LEVELS)
    return QuantPlane(
        codes=pack_nibbles(codes.astype(np.int64)),
        count=v.size,
        group_size=group_size,
        scales=scales,
        zeros=zeros,
        mode=MODE_ASYM_U4,
        axis=axis,
        row_len=row_len,
    )


def encode_plane_hierarchical(
    values, group_size: int, axis: str, row_len: int | None = None
) -> tuple[QuantPlane, QuantPlane]:
    """Upper + lower plane encoding of a flat sequence (see module docstring)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    upper = encode_plane_asym(v, group_size, axis, row_len)
    counts = upper.group_counts()
    s_elem = np.repeat(upper.scales.astype(np.float64), counts)
    z_elem = np.repeat(upper.zeros.astype(np.float64), counts)
    residual = v - (upper.unpacked().astype(np.float64) * s_elem + z_elem)
    # float32 division by 16 is exact (power of two), so stored lower scales
    # equal S_upper/16 bit-for-bit
    lower_scales = (upper.scales / np.float32(LOWER_SCALE_DIV)).astype(np.float32)
    ls_elem = np.repeat(lower_scales.astype(np.float64), counts)
    lower_codes = np.clip(_round_half_away(residual / ls_elem), SYM_MIN, SYM_MAX)
    lower = QuantPlane(
        codes=pack_nibbles(lower_codes.astype(np.int64)),
        count=v.size,
        group_size=group_size,
        scales=lower_scales,
        zeros=np.zeros_like(lower_scales),
        mode=MODE_SYM_S4,
        axis=axis,
        row_len=row_len,
    )
    return upper, lower


def _check_plane_pair(upper: QuantPlane, lower: QuantPlane) -> None:
    if (
        upper.count != lower.count
        or upper.group_size != lower.group_size
        or upper.row_len != lower.row_len
    ):
        raise CacheIntegrityError(
            "upper/lower planes disagree on group structure: "
            f"count {upper.count}/{lower.count}, group {upper.group_size}/{lower.group_size}"
        )
    if upper.mode != MODE_ASYM_U4 or lower.mode != MODE_SYM_S4:
        raise CacheIntegrityError("plane modes do not match the hierarchy")


def decode_plane_draft(plane: QuantPlane) -> np.ndarray:
    """Upper-plane reconstruction of the flat sequence (float64)."""
    counts = plane.group_counts()
    s_elem = np.repeat(plane.scales.astype(np.float64), counts)
    z_elem = np.repeat(plane.zeros.astype(np.float64), counts)
    return plane.unpacked().astype(np.float64) * s_elem + z_elem


def decode_plane_target(upper: QuantPlane, lower: QuantPlane) -> np.ndarray:
    """Two-plane reconstruction of the flat sequence (float64)."""
    _check_plane_pair(upper, lower)
    counts = upper.group_counts()
    s_elem = np.repeat(upper.scales.astype(np.float64), counts)
    z_elem = np.repeat(upper.zeros.astype(np.float64), counts)
    cu = upper.unpacked().astype(np.float64)
    cl = lower.unpacked().astype(np.float64)
    return cu * s_elem + cl * (s_elem / LOWER_SCALE_DIV) + z_elem


# ---------------------------------------------------------------------------
# INT4 weights (upper plane only, grouped along the input dimension)
# ---------------------------------------------------------------------------


@dataclass
class QuantizedLinear:
    """A weight matrix stored as a single asymmetric 4-bit plane.

    The plane flattens the matrix as [d_out, d_in] row-major so groups run
    along the input (reduction) dimension.
    """

    plane: QuantPlane
    shape: tuple[int, int]  # (d_in, d_out) of the original matrix

    def code_bytes(self) -> float:
        return self.plane.code_bytes()

    def param_bytes(self) -> float:
        return self.plane.param_bytes()


def quantize_weights(w: np.ndarray, group_size: int) -> QuantizedLinear:
    """Quantize a [d_in, d_out] matrix to INT4 with input-dimension groups.

    Groups never cross an output unit's row; a short trailing group per row
    is allowed.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2 or w.size == 0:
        raise ConfigError(f"weight quantization expects a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise DataError("weight matrix contains non-finite values")
    d_in, d_out = w.shape
    flat = np.ascontiguousarray(w.T).ravel()
    plane = encode_plane_asym(flat, min(group_size, d_in), AXIS_CHANNEL, row_len=d_in)
    return QuantizedLinear(plane=plane, shape=(d_in, d_out))


def dequantize_weights(q: QuantizedLinear) -> np.ndarray:
    """Float32 reconstruction with the original [d_in, d_out] shape."""
    d_in, d_out = q.shape
    flat = decode_plane_draft(q.plane)
    return np.ascontiguousarray(flat.reshape(d_out, d_in).T.astype(np.float32))
