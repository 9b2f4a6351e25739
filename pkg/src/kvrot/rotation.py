"""Rotation specifications and Hessian-aware calibration.

A RotationSpec fixes the orthogonal transform applied to head vectors before
quantization: optional per-channel sign flips, a block-diagonal Hadamard of a
given order, and an optional learned per-layer rotation composed after the
blocks. Applied to row vectors x as x @ diag(signs) @ H_blk @ R. The learned
rotation is the sign-canonicalized eigenbasis of a damped query second-moment
matrix, eigenvalues descending.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .errors import (
    EmptyCalibrationError,
    InvalidOrderError,
    ShapeError,
)
from .hadamard import block_hadamard_matrix
from .jacobi import jacobi_eigh
from .layout import HeadLayout, is_power_of_two

DEFAULT_ALPHA = 0.01


class Targets(enum.Enum):
    """Which cache sides the rotation applies to."""

    KEYS_ONLY = "keys_only"
    KEYS_AND_VALUES = "keys_and_values"


@dataclass(frozen=True)
class RotationSpec:
    """Orthogonal pre-quantization transform.

    Attributes:
        order: Hadamard block order h (power of two).
        signs: optional +-1 vector of length head_dim, applied first.
        learned: optional orthogonal head_dim x head_dim matrix composed
            after the blocks.
        targets: keys only, or keys and values.
        learned_values: apply the learned part on the value branch too.
            Off by default; values then get signs + block Hadamard only.
    """

    order: int
    signs: Optional[np.ndarray] = None
    learned: Optional[np.ndarray] = None
    targets: Targets = Targets.KEYS_AND_VALUES
    learned_values: bool = False

    def __post_init__(self) -> None:
        if not is_power_of_two(self.order):
            raise InvalidOrderError(f"order={self.order} is not a power of two")
        if self.signs is not None:
            signs = np.ascontiguousarray(self.signs, dtype=np.float64)
            if signs.ndim != 1:
                raise ShapeError("signs must be a vector")
            if not np.all(np.abs(signs) == 1.0):
                raise ShapeError("signs entries must be +-1")
            signs.setflags(write=False)
            object.__setattr__(self, "signs", signs)
        if self.learned is not None:
            r = np.ascontiguousarray(self.learned, dtype=np.float64)
            if r.ndim != 2 or r.shape[0] != r.shape[1]:
                raise ShapeError(f"learned rotation must be square, got {r.shape}")
            err = np.abs(r.T @ r - np.eye(r.shape[0])).max()
            if err > 1e-6:
                raise ShapeError(f"learned rotation not orthogonal (max dev {err:.2e})")
            r.setflags(write=False)
            object.__setattr__(self, "learned", r)


def make_signs(seed: int, layer: int, head_dim: int, order: int) -> np.ndarray:
    """Deterministic +-1 sign vector from a counter-based generator.

    Each block of `order` channels draws from its own Philox stream keyed by
    (seed, layer, block), so any (layer, block) slice is reproducible in
    isolation.
    """
    if head_dim % order != 0:
        raise InvalidOrderError(f"order={order} does not divide head_dim={head_dim}")
    if not 0 <= layer < 2**24:
        raise ShapeError(f"layer={layer} outside supported range [0, 2^24)")
    out = np.empty(head_dim, dtype=np.float64)
    for b in range(head_dim // order):
        # two-word Philox key: (seed, tag|layer|block); distinct keys give
        # non-overlapping streams, unlike nearby counter starts
        word = (np.uint64(0x5164) << np.uint64(48)) | (np.uint64(layer) << np.uint64(24)) | np.uint64(b)
        key = np.array([np.uint64(seed & (2**64 - 1)), word], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        bits = rng.integers(0, 2, size=order)
        out[b * order : (b + 1) * order] = 2.0 * bits - 1.0
    return out


def _check_spec_layout(spec: RotationSpec, layout: HeadLayout) -> None:
    d = layout.head_dim
    if spec.order != layout.rot_order:
        raise ShapeError(
            f"spec order {spec.order} != layout rot_order {layout.rot_order}"
        )
    if d % spec.order != 0:
        raise InvalidOrderError(f"order={spec.order} does not divide head_dim={d}")
    if spec.signs is not None and spec.signs.shape != (d,):
        raise ShapeError(f"signs length {spec.signs.shape} != head_dim {d}")
    if spec.learned is not None and spec.learned.shape != (d, d):
        raise ShapeError(f"learned shape {spec.learned.shape} != ({d}, {d})")


def apply_block_rotation(
    x: np.ndarray, layout: HeadLayout, spec: RotationSpec
) -> np.ndarray:
    """Rotate rows: x @ diag(signs) @ H_blk @ learned.

    Args:
        x: (n, head_dim) rows; not modified.
        layout: dimensional configuration; spec.order must equal
            layout.rot_order.
        spec: transform description.

    Returns:
        New float64 array of rotated rows; l2 norms are preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layout.head_dim:
        raise ShapeError(f"expected (n, {layout.head_dim}) rows, got {x.shape}")
    _check_spec_layout(spec, layout)
    out = np.ascontiguousarray(x).copy()
    if spec.signs is not None:
        out *= spec.signs
    _kernels.fwht_rows(out, spec.order)
    if spec.learned is not None:
        out = out @ spec.learned
    return out


def apply_inverse_rotation(
    x: np.ndarray, layout: HeadLayout, spec: RotationSpec
) -> np.ndarray:
    """Map rotated-space rows back: x @ learned.T @ H_blk @ diag(signs)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layout.head_dim:
        raise ShapeError(f"expected (n, {layout.head_dim}) rows, got {x.shape}")
    _check_spec_layout(spec, layout)
    out = np.ascontiguousarray(x).copy()
    if spec.learned is not None:
        out = np.ascontiguousarray(out @ spec.learned.T)
    _kernels.fwht_rows(out, spec.order)
    if spec.signs is not None:
        out *= spec.signs
    return out


def value_branch_spec(spec: RotationSpec) -> Optional[RotationSpec]:
    """The transform used for the value side, or None when values stay raw."""
    if spec.targets is Targets.KEYS_ONLY:
        return None
    if spec.learned is not None and not spec.learned_values:
        return replace(spec, learned=None)
    return spec


def compose_transform(spec: RotationSpec, layout: HeadLayout) -> np.ndarray:
    """Dense matrix T = diag(signs) @ H_blk @ learned for row application x @ T.

    The result is orthogonal; applying it to both q and k leaves <q, k>
    unchanged. This is the brute-force counterpart of apply_block_rotation.
    """
    _check_spec_layout(spec, layout)
    d = layout.head_dim
    t = block_hadamard_matrix(d, spec.order)
    if spec.signs is not None:
        t = spec.signs[:, None] * t
    if spec.learned is not None:
        t = t @ spec.learned
    return t


@dataclass(frozen=True)
class SecondMoment:
    """Running uncentered second moment of calibration queries."""

    dim: int
    sum_outer: np.ndarray = field(repr=False)
    count: int = 0

    def __post_init__(self) -> None:
        if self.sum_outer.shape != (self.dim, self.dim):
            raise ShapeError(
                f"sum_outer shape {self.sum_outer.shape} != ({self.dim}, {self.dim})"
            )
        self.sum_outer.setflags(write=False)

    @classmethod
    def empty(cls, dim: int) -> "SecondMoment":
        return cls(dim=dim, sum_outer=np.zeros((dim, dim)), count=0)

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise EmptyCalibrationError("no queries accumulated")
        return self.sum_outer / self.count


def accumulate_query(acc: SecondMoment, q: np.ndarray) -> SecondMoment:
    """Fold one query vector into the accumulator: sum += q q^T, count += 1."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != acc.dim:
        raise ShapeError(f"query length {q.shape[0]} != dim {acc.dim}")
    return SecondMoment(
        dim=acc.dim,
        sum_outer=acc.sum_outer + np.outer(q, q),
        count=acc.count + 1,
    )


def accumulate_queries(acc: SecondMoment, qs: np.ndarray) -> SecondMoment:
    """Fold a batch of query rows at once (single GEMM)."""
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != acc.dim:
        raise ShapeError(f"expected (n, {acc.dim}) queries, got {qs.shape}")
    return SecondMoment(
        dim=acc.dim,
        sum_outer=acc.sum_outer + qs.T @ qs,
        count=acc.count + qs.shape[0],
    )


def canonicalize_columns(v: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties break to the lowest index (argmax of |column| returns the first
    maximum). Deterministic tie-free for orthonormal columns.
    """
    v = v.copy()
    idx = np.argmax(np.abs(v), axis=0)
    flip = v[idx, np.arange(v.shape[1])] < 0
    v[:, flip] *= -1.0
    return v


def learn_rotation(acc: SecondMoment, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Eigenbasis rotation from the damped mean second moment.

    M = sum_outer / count is damped to M + alpha * mean(diag(M)) * I, then
    eigendecomposed; columns are ordered by descending eigenvalue with signs
    canonicalized.

    Args:
        acc: accumulator with count >= 1.
        alpha: damping coefficient, >= 0 (default 0.01).

    Returns:
        Orthogonal (dim, dim) matrix.

    Raises:
        EmptyCalibrationError: count == 0.
    """
    if acc.count == 0:
        raise EmptyCalibrationError("cannot learn a rotation from zero queries")
    if alpha < 0:
        raise ShapeError(f"alpha={alpha} must be >= 0")
    m = acc.mean()
    damped = m + alpha * np.mean(np.diag(m)) * np.eye(acc.dim)
    _, v = jacobi_eigh(damped)
    return canonicalize_columns(v)


def score_weighted_error(delta_k: np.ndarray, m: np.ndarray) -> float:
    """Quadratic form delta_k^T M delta_k (expected squared logit error)."""
    delta_k = np.asarray(delta_k, dtype=np.float64).reshape(-1)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (delta_k.shape[0], delta_k.shape[0]):
        raise ShapeError(f"M shape {m.shape} does not match vector {delta_k.shape}")
    return float(delta_k @ m @ delta_k)
