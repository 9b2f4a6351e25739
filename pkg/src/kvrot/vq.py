"""Residual vector quantization: k-means codebooks plus INT4-coded residuals.

A vector encodes as the index of its nearest centroid and the asymmetric
INT4 quantization of the residual; decoding adds the dequantized residual
back onto the centroid. Codebooks are fit with Lloyd's algorithm, k-means++
seeding, deterministic empty-cluster repair, and a within-cluster SSE that
never increases between iterations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, TooFewSamplesError
from .int4 import (
    PackedNibbles,
    QuantParams,
    dequantize_head,
    dequantize_rows,
    quantize_head,
    quantize_rows,
)

MAX_ITERS = 100


class CodebookKind(enum.Enum):
    KEY = "key"
    VALUE = "value"


@dataclass(frozen=True)
class Codebook:
    """Learned centroid table.

    Attributes:
        centroids: (C, dim) float64, no duplicate rows.
        kind: which cache side the book was fit for.
    """

    centroids: np.ndarray = field(repr=False)
    kind: CodebookKind = CodebookKind.KEY

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ShapeError(f"centroids must be (C >= 1, dim), got {c.shape}")
        if not np.isfinite(c).all():
            raise ShapeError("centroids must be finite")
        if c.shape[0] > 1:
            order = np.lexsort(c.T[::-1])
            diffs = np.abs(np.diff(c[order], axis=0)).max(axis=1)
            if diffs.size and diffs.min() <= 1e-12:
                raise ShapeError("duplicate centroid rows")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class VqCode:
    """Nearest-centroid index plus quantized residual."""

    centroid_id: int
    residual: tuple[PackedNibbles, QuantParams]


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # ||x - c||^2 via expansion; 64-bit accumulation
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ c.T)
        + np.sum(c * c, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = rng.integers(0, n)
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at distance zero: no k distinct points exist
            raise TooFewSamplesError(
                f"samples contain fewer than {k} distinct points"
            )
        cum = np.cumsum(d2)
        r = rng.random() * total
        idx = int(np.searchsorted(cum, r, side="right"))
        idx = min(idx, n - 1)
        chosen[j] = idx
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _repair_empty(
    x: np.ndarray, assign: np.ndarray, centroids: np.ndarray, counts: np.ndarray
) -> None:
    # steal the sample farthest from its centroid for each empty cluster,
    # ascending cluster id; repeat until no cluster is empty
    k = centroids.shape[0]
    while True:
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            return
        j = int(empties[0])
        dist = np.sum((x - centroids[assign]) ** 2, axis=1)
        # only samples whose donor cluster keeps at least one member
        eligible = counts[assign] > 1
        if not eligible.any():
            raise TooFewSamplesError("cannot repair empty cluster")
        dist[~eligible] = -1.0
        victim = int(np.argmax(dist))
        counts[assign[victim]] -= 1
        assign[victim] = j
        counts[j] = 1
        centroids[j] = x[victim]


def fit_codebook(
    samples: np.ndarray,
    c: int,
    seed: int,
    kind: CodebookKind = CodebookKind.KEY,
    max_iters: int = MAX_ITERS,
) -> Codebook:
    """Fit a codebook with Lloyd's algorithm.

    Args:
        samples: (n, dim) finite rows, n >= c.
        c: centroid count C >= 1.
        seed: drives k-means++ seeding (counter-based Philox stream).
        kind: KEY or VALUE tag.
        max_iters: Lloyd iteration cap; convergence is an unchanged
            assignment.

    Returns:
        Codebook with C centroids.

    Raises:
        TooFewSamplesError: n < c, or fewer than c distinct samples.
    """
    book, _ = fit_codebook_with_history(samples, c, seed, kind, max_iters)
    return book


def fit_codebook_with_history(
    samples: np.ndarray,
    c: int,
    seed: int,
    kind: CodebookKind = CodebookKind.KEY,
    max_iters: int = MAX_ITERS,
):
    """fit_codebook variant that also returns the per-iteration SSE list."""
    x = np.ascontiguousarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"samples must be 2-D, got {x.shape}")
    if not np.isfinite(x).all():
        raise ShapeError("samples must be finite")
    if c < 1:
        raise ShapeError(f"C={c} must be >= 1")
    if x.shape[0] < c:
        raise TooFewSamplesError(f"{x.shape[0]} samples < C={c}")

    if c == 1:
        centroid = x.mean(axis=0, keepdims=True)
        sse = float(np.sum((x - centroid) ** 2))
        return Codebook(centroids=centroid, kind=kind), [sse]

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    centroids = _kmeanspp_init(x, c, rng)
    assign = np.full(x.shape[0], -1, dtype=np.intp)
    history: list[float] = []
    for _ in range(max_iters):
        new_assign = np.argmin(_sqdist(x, centroids), axis=1)
        converged = bool(np.array_equal(new_assign, assign))
        assign = new_assign.astype(np.intp)
        counts = np.bincount(assign, minlength=c)
        if (counts == 0).any():
            _repair_empty(x, assign, centroids, counts)
            converged = False
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=c)
        centroids = sums / counts[:, None]
        history.append(float(np.sum((x - centroids[assign]) ** 2)))
        if converged:
            break
    return Codebook(centroids=centroids, kind=kind), history


def encode(x: np.ndarray, book: Codebook) -> VqCode:
    """Encode one vector: nearest centroid (ties to the lowest index) plus
    INT4-quantized residual."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != book.dim:
        raise ShapeError(f"vector length {v.shape[0]} != codebook dim {book.dim}")
    d2 = np.sum((book.centroids - v) ** 2, axis=1)
    cid = int(np.argmin(d2))
    packed, params = quantize_head(v - book.centroids[cid])
    return VqCode(centroid_id=cid, residual=(packed, params))


def decode(code: VqCode, book: Codebook) -> np.ndarray:
    """Centroid plus dequantized residual; IndexError on a bad centroid_id."""
    centroid = book.centroids[code.centroid_id]
    packed, params = code.residual
    return centroid + dequantize_head(packed, params)


def encode_rows(x: np.ndarray, book: Codebook):
    """Vectorized encode of many rows.

    Returns (ids, packed, scale, zp) with the same residual wire format as
    int4.quantize_rows.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != book.dim:
        raise ShapeError(f"expected (n, {book.dim}) rows, got {x.shape}")
    ids = np.argmin(_sqdist(x, book.centroids), axis=1)
    residuals = x - book.centroids[ids]
    packed, scale, zp = quantize_rows(residuals)
    return ids, packed, scale, zp


def decode_rows(
    ids: np.ndarray,
    packed: np.ndarray,
    scale: np.ndarray,
    zp: np.ndarray,
    book: Codebook,
) -> np.ndarray:
    """Vectorized inverse of encode_rows."""
    return book.centroids[ids] + dequantize_rows(packed, scale, zp, book.dim)
