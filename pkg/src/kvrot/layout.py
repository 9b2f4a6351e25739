"""Dimensional configuration shared by every module.

A HeadLayout pins the attention geometry (query/KV head counts, head dim),
the rotation block order and the page size. All downstream shape checks are
phrased against one of these.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidOrderError, ShapeError


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class HeadLayout:
    """Attention geometry and cache layout parameters.

    Attributes:
        num_q_heads: query head count; must be a positive multiple of
            num_kv_heads (grouped-query attention).
        num_kv_heads: KV head count.
        head_dim: per-head vector width d; power of two (block rotations
            require it) and even (nibble packing requires it).
        rot_order: Hadamard block order h; power of two, h <= d, h | d.
        page_tokens: tokens per cache page, >= 1.
    """

    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    rot_order: int
    page_tokens: int = 16

    def __post_init__(self) -> None:
        if self.num_kv_heads < 1 or self.num_q_heads < 1:
            raise ShapeError("head counts must be positive")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ShapeError(
                f"num_q_heads={self.num_q_heads} is not a multiple of "
                f"num_kv_heads={self.num_kv_heads}"
            )
        if not is_power_of_two(self.head_dim) or self.head_dim < 2:
            raise InvalidOrderError(
                f"head_dim={self.head_dim} must be a power of two >= 2"
            )
        if not is_power_of_two(self.rot_order):
            raise InvalidOrderError(f"rot_order={self.rot_order} must be a power of two")
        if self.rot_order > self.head_dim or self.head_dim % self.rot_order != 0:
            raise InvalidOrderError(
                f"rot_order={self.rot_order} must divide head_dim={self.head_dim}"
            )
        if self.page_tokens < 1:
            raise ShapeError(f"page_tokens={self.page_tokens} must be >= 1")

    @property
    def group_size(self) -> int:
        """Query heads per KV head."""
        return self.num_q_heads // self.num_kv_heads

    def kv_head_for(self, q_head: int) -> int:
        """GQA mapping: query head index -> KV head index."""
        if not 0 <= q_head < self.num_q_heads:
            raise ShapeError(f"q_head={q_head} out of range")
        return q_head // self.group_size
