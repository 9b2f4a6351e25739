"""Reference numpy kernels.

These are the fallback implementations of the hot loops. The compiled backend
(_core.pyx) mirrors the floating-point operation order of every function here
exactly, so outputs are bit-identical across backends. Keep the two in sync:
any change to arithmetic order must be made in both.
"""

from __future__ import annotations

import math

import numpy as np


def _round_away(t: np.ndarray) -> np.ndarray:
    # round-half-away-from-zero; valid for |t| < 2**52 which holds for all
    # quantizer inputs (|t| <= 30 by construction)
    return np.copysign(np.floor(np.abs(t) + 0.5), t)


def fwht_rows(x: np.ndarray, order: int) -> None:
    """In-place orthonormal Walsh-Hadamard transform on blocks of columns.

    x must be C-contiguous float64 of shape (n, d) with order | d. Each
    contiguous block of `order` columns is transformed independently.
    """
    n, d = x.shape
    if order == 1:
        return
    v = x.reshape(n, d // order, order)
    half = 1
    while half < order:
        pairs = v.reshape(n, d // order, order // (2 * half), 2, half)
        a = pairs[..., 0, :].copy()
        b = pairs[..., 1, :].copy()
        pairs[..., 0, :] = a + b
        pairs[..., 1, :] = a - b
        half *= 2
    v *= 1.0 / math.sqrt(order)


def pack_rows(nibbles: np.ndarray) -> np.ndarray:
    """Pack uint8 nibble rows (n, d) into bytes (n, d/2), element 2i low."""
    return (nibbles[:, 0::2] | (nibbles[:, 1::2] << 4)).astype(np.uint8)


def unpack_rows(packed: np.ndarray, logical_len: int) -> np.ndarray:
    """Inverse of pack_rows."""
    n = packed.shape[0]
    out = np.empty((n, logical_len), dtype=np.uint8)
    out[:, 0::2] = packed & 0x0F
    out[:, 1::2] = packed >> 4
    return out


def quantize_rows(x: np.ndarray):
    """Asymmetric INT4 quantization of each row with nibble packing.

    Returns (packed, scale, zp): packed uint8 (n, d/2), scale float32 (n,),
    zp uint8 (n,). Normal rows: scale = float32((max-min)/15), zp in [0, 15].
    Constant rows (or float32 scale underflow): zp = 0xFF sentinel, the scale
    slot holds the row offset float32(min), nibbles all zero.
    """
    n, d = x.shape
    mn = x.min(axis=1)
    mx = x.max(axis=1)
    scale = ((mx - mn) / 15.0).astype(np.float32)
    const = scale == np.float32(0.0)
    s64 = scale.astype(np.float64)
    s64[const] = 1.0  # avoid div-by-zero; const rows overwritten below
    z = np.clip(_round_away(-mn / s64), 0.0, 15.0)
    q = np.clip(_round_away(x / s64[:, None]) + z[:, None], 0.0, 15.0)
    q = q.astype(np.uint8)
    zp = z.astype(np.uint8)
    if const.any():
        q[const] = 0
        zp[const] = 0xFF
        scale[const] = mn[const].astype(np.float32)
    return pack_rows(q), scale, zp


def dequantize_rows(
    packed: np.ndarray, scale: np.ndarray, zp: np.ndarray, logical_len: int
) -> np.ndarray:
    """Reconstruct float64 rows: s * (q - z); constant rows return the offset."""
    q = unpack_rows(packed, logical_len).astype(np.float64)
    const = zp == 0xFF
    s64 = scale.astype(np.float64)
    zf = zp.astype(np.float64)
    zf[const] = 0.0
    out = s64[:, None] * (q - zf[:, None])
    if const.any():
        out[const] = s64[const, None]
    return out
