"""Token-wise asymmetric INT4 quantization with nibble packing.

Each head vector gets one shared scale and zero-point:

    s = (max(x) - min(x)) / 15
    z = clip(round(-min(x) / s), 0, 15)
    q_i = clip(round(x_i / s) + z, 0, 15)
    x_hat_i = s * (q_i - z)

Rounding is half-away-from-zero. The scale is stored as float32 and
quantization divides by that stored float32 value, so the half-step error
bound is exact with respect to the sidecar, not an unstored higher-precision
scale. Constant rows use a sentinel: zero_point slot 0xFF, scale slot holds
the row offset min(x), all nibbles zero; dequantization returns the offset.

Wire format per (token, head): head_dim/2 payload bytes, element 2i in the
low nibble and 2i+1 in the high nibble of byte i, plus one float32 and one
uint8 sidecar. The tightest reconstruction guarantee applies to vectors that
straddle zero (min <= 0 <= max, the typical case for activations); vectors
that do not straddle zero can clip at the grid edge because the zero-point
is confined to [0, 15] by the sidecar width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NibbleRangeError, NonFiniteInputError, ShapeError

CONST_SENTINEL = 0xFF


@dataclass(frozen=True)
class QuantParams:
    """Per-(token, head) quantization sidecar.

    Attributes:
        scale: grid step, >= 0; 0 marks a constant row.
        zero_point: integer in [0, 15]; meaningless when scale == 0.
        offset: reconstruction value for constant rows (scale == 0 only).
    """

    scale: float
    zero_point: int
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.scale < 0:
            raise ShapeError(f"scale={self.scale} must be >= 0")
        if not 0 <= self.zero_point <= 15:
            raise NibbleRangeError(f"zero_point={self.zero_point} outside [0, 15]")


@dataclass(frozen=True)
class PackedNibbles:
    """Nibble-packed payload: ceil(logical_len / 2) bytes."""

    data: bytes
    logical_len: int

    def __post_init__(self) -> None:
        if len(self.data) != (self.logical_len + 1) // 2:
            raise ShapeError(
                f"payload of {len(self.data)} bytes does not match "
                f"logical_len={self.logical_len}"
            )


def pack(nibbles) -> PackedNibbles:
    """Pack a sequence of nibble values into bytes, element 2i low-nibble.

    Raises:
        NibbleRangeError: any value outside [0, 15].
    """
    arr = np.asarray(nibbles, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > 15):
        raise NibbleRangeError("nibble values must lie in [0, 15]")
    n = arr.size
    padded = np.zeros(n + (n % 2), dtype=np.uint8)
    padded[:n] = arr.astype(np.uint8)
    packed = _kernels.pack_rows(padded.reshape(1, -1))[0]
    return PackedNibbles(data=packed.tobytes(), logical_len=n)


def unpack(packed: PackedNibbles) -> np.ndarray:
    """Unpack to a uint8 array of length logical_len. Bit-exact inverse of pack."""
    if packed.logical_len == 0:
        return np.empty(0, dtype=np.uint8)
    raw = np.frombuffer(packed.data, dtype=np.uint8).reshape(1, -1)
    full = _kernels.unpack_rows(raw, 2 * raw.shape[1])[0]
    return full[: packed.logical_len].copy()


def quantize_head(x) -> tuple[PackedNibbles, QuantParams]:
    """Quantize one head vector.

    Args:
        x: nonempty 1-D array of finite reals with even length.

    Returns:
        (PackedNibbles, QuantParams).

    Raises:
        NonFiniteInputError: NaN or Inf present.
        ShapeError: empty or odd-length input.
    """
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ShapeError("cannot quantize an empty vector")
    if v.size % 2 != 0:
        raise ShapeError(f"head_dim={v.size} must be even for nibble packing")
    if not np.isfinite(v).all():
        raise NonFiniteInputError("input contains NaN or Inf")
    packed, scale, zp = _kernels.quantize_rows(np.ascontiguousarray(v.reshape(1, -1)))
    if zp[0] == CONST_SENTINEL:
        params = QuantParams(scale=0.0, zero_point=0, offset=float(scale[0]))
    else:
        params = QuantParams(scale=float(scale[0]), zero_point=int(zp[0]))
    return PackedNibbles(data=packed[0].tobytes(), logical_len=v.size), params


def dequantize_head(packed: PackedNibbles, params: QuantParams) -> np.ndarray:
    """Reconstruct a head vector: s * (q - z), or the offset for constant rows."""
    if params.scale == 0.0:
        return np.full(packed.logical_len, params.offset, dtype=np.float64)
    q = unpack(packed).astype(np.float64)
    return params.scale * (q - params.zero_point)


def quantize_rows(x: np.ndarray):
    """Batch row quantization used by the cache and harness.

    Args:
        x: (n, d) finite float array, d even.

    Returns:
        (packed uint8 (n, d/2), scale float32 (n,), zp uint8 (n,)); zp 0xFF
        marks a constant row whose scale slot holds the row offset.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0 or x.shape[1] % 2 != 0:
        raise ShapeError(f"expected (n, even d) rows, got {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteInputError("input contains NaN or Inf")
    return _kernels.quantize_rows(x)


def dequantize_rows(
    packed: np.ndarray, scale: np.ndarray, zp: np.ndarray, logical_len: int
) -> np.ndarray:
    """Batch inverse of quantize_rows; returns float64 (n, logical_len)."""
    packed = np.ascontiguousarray(packed, dtype=np.uint8)
    scale = np.ascontiguousarray(scale, dtype=np.float32)
    zp = np.ascontiguousarray(zp, dtype=np.uint8)
    return _kernels.dequantize_rows(packed, scale, zp, logical_len)
