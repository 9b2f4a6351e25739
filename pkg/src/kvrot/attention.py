"""Reference decode attention over the paged cache.

One decode step scores a single query token against a sequence's stored
keys. Rotated-key pools rotate the query into the same frame, so the
K side needs no inverse transform; the value branch is un-rotated after
the weighted sum when values were stored rotated. Numerics are float64
end to end with a max-subtracted softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import BF16, PageTable
from .errors import EmptySequenceError, NonFiniteInputError, ShapeError
from .layout import HeadLayout
from .rotation import RotationSpec, apply_block_rotation, compose_transform, value_branch_spec


@dataclass(frozen=True)
class DecodeRequest:
    """One decode step: per-q-head query vectors against a stored sequence."""

    q: np.ndarray  # (num_q_heads, head_dim)
    seq: int


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to one."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def _check_query(q: np.ndarray, layout: HeadLayout) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.shape != (layout.num_q_heads, layout.head_dim):
        raise ShapeError(
            f"expected ({layout.num_q_heads}, {layout.head_dim}) query, got {q.shape}"
        )
    if not np.isfinite(q).all():
        raise NonFiniteInputError("query contains NaN or Inf")
    return q


def decode_step(
    req: DecodeRequest,
    table: PageTable,
    spec: Optional[RotationSpec] = None,
) -> np.ndarray:
    """Attend one query token over a cached sequence; returns (num_q_heads, dim).

    The query is rotated into the stored-key frame when a spec is given (the
    spec must match the one used at append time). BF16 pools store raw
    vectors, so the query is used as-is there regardless of spec. Grouped
    queries share a KV head via layout.kv_head_for.
    """
    layout = table.layout
    q = _check_query(req.q, layout)
    if table.sequence_length(req.seq) == 0:
        raise EmptySequenceError(f"sequence {req.seq} has no tokens")
    k_hat, v_hat = table.read_sequence(req.seq)  # (t, kv_heads, d) stored space

    rotated_pool = spec is not None and table.precision != BF16
    if rotated_pool:
        q_frame = apply_block_rotation(q, layout, spec)
    else:
        q_frame = q

    scale = 1.0 / math.sqrt(layout.head_dim)
    out = np.empty_like(q)
    for qh in range(layout.num_q_heads):
        kv = layout.kv_head_for(qh)
        logits = k_hat[:, kv, :] @ q_frame[qh] * scale
        w = _softmax_rows(logits[None, :])[0]
        out[qh] = w @ v_hat[:, kv, :]

    if rotated_pool:
        v_spec = value_branch_spec(spec)
        if v_spec is not None:
            t_v = compose_transform(v_spec, layout)
            out = out @ t_v.T
    return out


def decode_step_fp(
    q: np.ndarray, flat_k: np.ndarray, flat_v: np.ndarray, layout: HeadLayout
) -> np.ndarray:
    """Full-precision decode over flat (t, kv_heads, dim) arrays.

    The exactness oracle for decode_step: no cache, no quantization, no
    rotation, same contraction order and softmax.
    """
    q = _check_query(q, layout)
    flat_k = np.asarray(flat_k, dtype=np.float64)
    flat_v = np.asarray(flat_v, dtype=np.float64)
    if flat_k.ndim != 3 or flat_k.shape[1:] != (layout.num_kv_heads, layout.head_dim):
        raise ShapeError(f"expected (t, kv_heads, dim) keys, got {flat_k.shape}")
    if flat_k.shape != flat_v.shape:
        raise ShapeError(f"key/value shape mismatch: {flat_k.shape} vs {flat_v.shape}")
    if flat_k.shape[0] == 0:
        raise EmptySequenceError("no cached tokens")

    scale = 1.0 / math.sqrt(layout.head_dim)
    out = np.empty_like(q)
    for qh in range(layout.num_q_heads):
        kv = layout.kv_head_for(qh)
        logits = flat_k[:, kv, :] @ q[qh] * scale
        w = _softmax_rows(logits[None, :])[0]
        out[qh] = w @ flat_v[:, kv, :]
    return out
