"""Hadamard matrix construction and block-diagonal application.

Sylvester-construction matrices are stored orthonormal (the 1/sqrt(order)
factor folded in) so that H @ H.T = I and H = H.T hold directly and no scale
bookkeeping leaks into dequantization. Fast application goes through the
Walsh-Hadamard butterfly kernels; the dense matrices built here serve as the
brute-force oracle and as building blocks for composed transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidOrderError, ShapeError
from .layout import is_power_of_two


@dataclass(frozen=True)
class HadamardMatrix:
    """Orthonormal symmetric Hadamard matrix of a power-of-two order."""

    order: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.entries.setflags(write=False)


def make_hadamard(order: int) -> HadamardMatrix:
    """Build the orthonormal Sylvester Hadamard matrix of the given order.

    Args:
        order: power of two >= 1.

    Returns:
        HadamardMatrix with entries +-1/sqrt(order), symmetric, orthonormal.

    Raises:
        InvalidOrderError: order is not a power of two.
    """
    if not is_power_of_two(order):
        raise InvalidOrderError(f"order={order} is not a power of two")
    h = np.ones((1, 1), dtype=np.float64)
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    while h.shape[0] < order:
        h = np.kron(h, base)
    h = h * (1.0 / math.sqrt(order))
    return HadamardMatrix(order=order, entries=h)


def block_hadamard_matrix(dim: int, order: int) -> np.ndarray:
    """Dense block-diagonal matrix diag(H_order, ..., H_order) of size dim.

    This is the brute-force counterpart of the butterfly kernel; tests compare
    the two and composed transforms are assembled from it.
    """
    if dim % order != 0:
        raise InvalidOrderError(f"order={order} does not divide dim={dim}")
    h = make_hadamard(order).entries
    out = np.zeros((dim, dim), dtype=np.float64)
    for b in range(dim // order):
        out[b * order : (b + 1) * order, b * order : (b + 1) * order] = h
    return out


def fwht_blocks(x: np.ndarray, order: int) -> np.ndarray:
    """Apply the orthonormal block Walsh-Hadamard transform to each row.

    Args:
        x: (n, d) array, order | d. Not modified.
        order: block width, power of two.

    Returns:
        New float64 array of transformed rows.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D rows, got ndim={x.ndim}")
    if not is_power_of_two(order):
        raise InvalidOrderError(f"order={order} is not a power of two")
    if x.shape[1] % order != 0:
        raise InvalidOrderError(f"order={order} does not divide dim={x.shape[1]}")
    out = x.copy()
    _kernels.fwht_rows(out, order)
    return out
