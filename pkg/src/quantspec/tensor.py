"""Dense float32 kernels: matmul, row softmax, RMSNorm and rotary embedding.

Pure functions over numpy arrays; everything upstream of quantization runs
in 32-bit floats.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError

DTYPE = np.float32


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product ``a @ b`` with explicit shape validation."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis, computed with max subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def rmsnorm(v: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    v = np.asarray(v, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    if gain.shape[-1] != v.shape[-1]:
        raise DimensionError(f"rmsnorm gain shape {gain.shape} does not match input {v.shape}")
    ms = np.mean(np.square(v), axis=-1, keepdims=True)
    return (v / np.sqrt(ms + DTYPE(eps)) * gain).astype(DTYPE)


# cos/sin tables keyed by (dim, base, position); positions are bounded by the
# model's max_positions so the cache stays small
_ROPE_CACHE: dict[tuple[int, float, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_angles(dim: int, base: float, position: int) -> tuple[np.ndarray, np.ndarray]:
    key = (dim, float(base), int(position))
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        exponents = np.arange(dim // 2, dtype=np.float64) * (2.0 / dim)
        theta = position * base**-exponents
        cos = np.cos(theta).astype(DTYPE)
        sin = np.sin(theta).astype(DTYPE)
        cos.flags.writeable = False
        sin.flags.writeable = False
        hit = (cos, sin)
        _ROPE_CACHE[key] = hit
    return hit


def rope(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent pairs of the last axis by position-dependent angles.

    Pair ``j`` is rotated by ``theta_j = position * base**(-2j/dim)``; the
    rotation preserves each pair's Euclidean norm.
    """
    x = np.asarray(x, dtype=DTYPE)
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ConfigError(f"rotary embedding requires an even head dimension, got {dim}")
    if position < 0:
        raise ConfigError(f"rotary position must be nonnegative, got {position}")
    cos, sin = _rope_angles(dim, base, position)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), the gated-MLP activation."""
    x = np.asarray(x, dtype=DTYPE)
    return (x / (1.0 + np.exp(-x))).astype(DTYPE)
