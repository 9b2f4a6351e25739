"""Paged KV cache with a fused rotate-quantize-write append path.

Pages are fixed-size and uniformly typed: an INT4 pool stores nibble-packed
payloads with per-(token, head) float32/uint8 sidecars; a BF16 pool stores
16-bit truncated floats of the raw vectors (emulated storage baseline). A
token's quantization never reads or writes any other token's data. Eviction
is unsupported by design: an exhausted pool raises CapacityExceededError.

The fused append rotates one token's heads into a private scratch and
quantizes straight into the page; no rotated copy of the sequence is ever
materialized. append_tokens_two_pass is the deliberate opposite (rotate the
whole sequence, then quantize) and must produce bit-identical pages.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CapacityExceededError,
    ConfigError,
    NonFiniteInputError,
    SequenceNotFoundError,
    ShapeError,
)
from .int4 import dequantize_rows, quantize_rows
from .layout import HeadLayout
from .rotation import RotationSpec, apply_block_rotation, value_branch_spec

BF16 = "bf16"
INT4 = "int4"

_DUMP_MAGIC = b"KVPG"
_DUMP_VERSION = 1


def float_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round finite floats to bf16 storage bits (round-to-nearest-even)."""
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    return rounded.astype(np.uint16)


def bf16_bits_to_float(bits: np.ndarray) -> np.ndarray:
    """Expand bf16 storage bits back to float64."""
    u = bits.astype(np.uint32) << np.uint32(16)
    return u.view(np.float32).astype(np.float64)


def token_bytes(layout: HeadLayout, precision: str, include_sidecar: bool = False) -> int:
    """Stored bytes for one token's K+V under a precision.

    The headline capacity arithmetic is payload-only; include_sidecar=True
    adds the float32+uint8 sidecars for honest ratio reporting.
    """
    h, d = layout.num_kv_heads, layout.head_dim
    if precision == BF16:
        return 2 * h * d * 2
    if precision == INT4:
        payload = 2 * h * (d // 2)
        return payload + (2 * h * 5 if include_sidecar else 0)
    raise ConfigError(f"unknown precision {precision!r}")


def capacity_tokens(budget_bytes: int, layout: HeadLayout, precision: str) -> int:
    """Token capacity of a byte budget under uniform slot accounting.

    Capacity is quantized at BF16-token granularity: base = budget // bytes
    per BF16 token; BF16 holds base tokens and INT4 exactly 4 * base. The
    INT4 figure is payload-only and conservative by at most 3 tokens, which
    keeps the 4x ratio exact for every budget.
    """
    if budget_bytes < 0:
        raise ConfigError(f"budget_bytes={budget_bytes} must be >= 0")
    base = budget_bytes // token_bytes(layout, BF16)
    if precision == BF16:
        return base
    if precision == INT4:
        return 4 * base
    raise ConfigError(f"unknown precision {precision!r}")


@dataclass
class KvPage:
    """One fixed-size page: payload plus sidecars for page_tokens tokens."""

    page_id: int
    k_payload: np.ndarray
    v_payload: np.ndarray
    k_scale: Optional[np.ndarray] = None
    k_zp: Optional[np.ndarray] = None
    v_scale: Optional[np.ndarray] = None
    v_zp: Optional[np.ndarray] = None
    used: int = 0


def _new_page(page_id: int, layout: HeadLayout, precision: str) -> KvPage:
    p, h, d = layout.page_tokens, layout.num_kv_heads, layout.head_dim
    if precision == INT4:
        return KvPage(
            page_id=page_id,
            k_payload=np.zeros((p, h, d // 2), dtype=np.uint8),
            v_payload=np.zeros((p, h, d // 2), dtype=np.uint8),
            k_scale=np.zeros((p, h), dtype=np.float32),
            k_zp=np.zeros((p, h), dtype=np.uint8),
            v_scale=np.zeros((p, h), dtype=np.float32),
            v_zp=np.zeros((p, h), dtype=np.uint8),
        )
    return KvPage(
        page_id=page_id,
        k_payload=np.zeros((p, h, d), dtype=np.uint16),
        v_payload=np.zeros((p, h, d), dtype=np.uint16),
    )


class PageTable:
    """Page pool plus per-sequence page lists.

    Exactly one of budget_bytes / num_pages sizes the pool. Appends to
    different sequences are independent; the free-page heap is the single
    allocation point. Pages are handed out lowest-id first, deterministically.
    """

    def __init__(
        self,
        layout: HeadLayout,
        precision: str = INT4,
        budget_bytes: Optional[int] = None,
        num_pages: Optional[int] = None,
    ) -> None:
        if precision not in (INT4, BF16):
            raise ConfigError(f"unknown precision {precision!r}")
        if (budget_bytes is None) == (num_pages is None):
            raise ConfigError("specify exactly one of budget_bytes or num_pages")
        self.layout = layout
        self.precision = precision
        self.budget_bytes = budget_bytes
        if num_pages is None:
            num_pages = capacity_tokens(budget_bytes, layout, precision) // layout.page_tokens
        if num_pages < 0:
            raise ConfigError(f"num_pages={num_pages} must be >= 0")
        self.num_pages = num_pages
        self._pages: list[Optional[KvPage]] = [None] * num_pages
        self._free: list[int] = list(range(num_pages))
        heapq.heapify(self._free)
        self._seq_pages: dict[int, list[int]] = {}
        self._seq_len: dict[int, int] = {}

    # -- sequence management ------------------------------------------------

    def create_sequence(self, seq: int) -> None:
        """Register an empty sequence; duplicate ids are rejected."""
        if seq in self._seq_pages:
            raise ConfigError(f"sequence {seq} already exists")
        self._seq_pages[seq] = []
        self._seq_len[seq] = 0

    def has_sequence(self, seq: int) -> bool:
        return seq in self._seq_pages

    def sequence_length(self, seq: int) -> int:
        self._require(seq)
        return self._seq_len[seq]

    def sequence_ids(self) -> list[int]:
        return sorted(self._seq_pages)

    def free_sequence(self, seq: int) -> int:
        """Return a sequence's pages to the pool; yields the reclaimed count."""
        self._require(seq)
        pages = self._seq_pages.pop(seq)
        self._seq_len.pop(seq)
        for pid in pages:
            self._pages[pid] = None
            heapq.heappush(self._free, pid)
        return len(pages)

    def _require(self, seq: int) -> None:
        if seq not in self._seq_pages:
            raise SequenceNotFoundError(f"unknown sequence {seq}")

    # -- capacity -----------------------------------------------------------

    def capacity_tokens(self, precision: Optional[str] = None) -> int:
        """Token capacity of this pool's budget under the given precision."""
        if self.budget_bytes is None:
            # pool sized by page count: report the page-backed token count
            return self.num_pages * self.layout.page_tokens
        return capacity_tokens(self.budget_bytes, self.layout, precision or self.precision)

    @property
    def used_tokens(self) -> int:
        return sum(self._seq_len.values())

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def allocated_pages(self) -> int:
        return self.num_pages - len(self._free)

    # -- append / read ------------------------------------------------------

    def _slot_for_append(self, seq: int) -> tuple[KvPage, int]:
        t = self._seq_len[seq]
        slot = t % self.layout.page_tokens
        if slot == 0:
            if not self._free:
                raise CapacityExceededError(
                    f"page pool exhausted ({self.num_pages} pages)"
                )
            pid = heapq.heappop(self._free)
            self._pages[pid] = _new_page(pid, self.layout, self.precision)
            self._seq_pages[seq].append(pid)
        page = self._pages[self._seq_pages[seq][-1]]
        return page, slot

    def _check_kv(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h, d = self.layout.num_kv_heads, self.layout.head_dim
        k = np.ascontiguousarray(k, dtype=np.float64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        if k.shape != (h, d) or v.shape != (h, d):
            raise ShapeError(f"expected ({h}, {d}) k and v, got {k.shape}, {v.shape}")
        if not (np.isfinite(k).all() and np.isfinite(v).all()):
            raise NonFiniteInputError("k/v contain NaN or Inf")
        return k, v

    def append_token(
        self,
        seq: int,
        k: np.ndarray,
        v: np.ndarray,
        spec: Optional[RotationSpec] = None,
    ) -> int:
        """Fused rotate-quantize-write of one token; returns its index.

        With a rotation spec, keys (and values when targeted) are rotated and
        quantized in one pass per token. BF16 pools store the raw vectors and
        ignore the spec.

        Raises:
            CapacityExceededError: no free page for a needed allocation.
        """
        self._require(seq)
        k, v = self._check_kv(k, v)
        page, slot = self._slot_for_append(seq)
        if self.precision == INT4:
            k_store, v_store = _rotate_token(k, v, self.layout, spec)
            kp, ks, kz = quantize_rows(k_store)
            vp, vs, vz = quantize_rows(v_store)
            page.k_payload[slot] = kp
            page.k_scale[slot] = ks
            page.k_zp[slot] = kz
            page.v_payload[slot] = vp
            page.v_scale[slot] = vs
            page.v_zp[slot] = vz
        else:
            page.k_payload[slot] = float_to_bf16_bits(k).reshape(page.k_payload[slot].shape)
            page.v_payload[slot] = float_to_bf16_bits(v).reshape(page.v_payload[slot].shape)
        page.used = slot + 1
        t = self._seq_len[seq]
        self._seq_len[seq] = t + 1
        return t

    def append_tokens_two_pass(
        self,
        seq: int,
        ks: np.ndarray,
        vs: np.ndarray,
        spec: Optional[RotationSpec] = None,
    ) -> int:
        """Unfused reference: rotate the whole batch, then quantize and write.

        Materializes the full-precision rotated tensors for all tokens before
        any quantization; exists to prove the fused path changes nothing.
        Returns the first appended token index.
        """
        self._require(seq)
        ks = np.ascontiguousarray(ks, dtype=np.float64)
        vs = np.ascontiguousarray(vs, dtype=np.float64)
        hh, d = self.layout.num_kv_heads, self.layout.head_dim
        if ks.ndim != 3 or ks.shape[1:] != (hh, d) or vs.shape != ks.shape:
            raise ShapeError(f"expected (t, {hh}, {d}) stacks, got {ks.shape}, {vs.shape}")
        if not (np.isfinite(ks).all() and np.isfinite(vs).all()):
            raise NonFiniteInputError("k/v contain NaN or Inf")
        tcount = ks.shape[0]
        first = self._seq_len[seq]
        if self.precision == INT4:
            # pass 1: rotated copies of every token
            k_rot = np.empty_like(ks)
            v_rot = np.empty_like(vs)
            for i in range(tcount):
                k_rot[i], v_rot[i] = _rotate_token(ks[i], vs[i], self.layout, spec)
            # pass 2: quantize and write
            for i in range(tcount):
                page, slot = self._slot_for_append(seq)
                kp, kscale, kz = quantize_rows(k_rot[i])
                vp, vscale, vz = quantize_rows(v_rot[i])
                page.k_payload[slot] = kp
                page.k_scale[slot] = kscale
                page.k_zp[slot] = kz
                page.v_payload[slot] = vp
                page.v_scale[slot] = vscale
                page.v_zp[slot] = vz
                page.used = slot + 1
                self._seq_len[seq] += 1
        else:
            for i in range(tcount):
                self.append_token(seq, ks[i], vs[i], spec)
        return first

    def read_token(self, seq: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized stored-space (k_hat, v_hat) for one token."""
        self._require(seq)
        if not 0 <= t < self._seq_len[seq]:
            raise IndexError(f"token {t} out of range for sequence of {self._seq_len[seq]}")
        p = self.layout.page_tokens
        page = self._pages[self._seq_pages[seq][t // p]]
        slot = t % p
        h, d = self.layout.num_kv_heads, self.layout.head_dim
        if self.precision == INT4:
            k = dequantize_rows(page.k_payload[slot], page.k_scale[slot], page.k_zp[slot], d)
            v = dequantize_rows(page.v_payload[slot], page.v_scale[slot], page.v_zp[slot], d)
            return k, v
        return (
            bf16_bits_to_float(page.k_payload[slot]).reshape(h, d),
            bf16_bits_to_float(page.v_payload[slot]).reshape(h, d),
        )

    def read_sequence(self, seq: int) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized (t, heads, dim) stacks for a whole sequence."""
        self._require(seq)
        h, d = self.layout.num_kv_heads, self.layout.head_dim
        length = self._seq_len[seq]
        k_out = np.empty((length, h, d), dtype=np.float64)
        v_out = np.empty((length, h, d), dtype=np.float64)
        p = self.layout.page_tokens
        for i, pid in enumerate(self._seq_pages[seq]):
            page = self._pages[pid]
            lo = i * p
            hi = min(length, lo + p)
            used = hi - lo
            if self.precision == INT4:
                rows = page.k_payload[:used].reshape(used * h, d // 2)
                k_out[lo:hi] = dequantize_rows(
                    rows, page.k_scale[:used].reshape(-1), page.k_zp[:used].reshape(-1), d
                ).reshape(used, h, d)
                rows = page.v_payload[:used].reshape(used * h, d // 2)
                v_out[lo:hi] = dequantize_rows(
                    rows, page.v_scale[:used].reshape(-1), page.v_zp[:used].reshape(-1), d
                ).reshape(used, h, d)
            else:
                k_out[lo:hi] = bf16_bits_to_float(page.k_payload[:used]).reshape(used, h, d)
                v_out[lo:hi] = bf16_bits_to_float(page.v_payload[:used]).reshape(used, h, d)
        return k_out, v_out

    # -- serialization ------------------------------------------------------

    def dump(self, path: str) -> None:
        """Write a versioned binary snapshot (header JSON + raw page blobs)."""
        header = {
            "version": _DUMP_VERSION,
            "precision": self.precision,
            "budget_bytes": self.budget_bytes,
            "num_pages": self.num_pages,
            "layout": {
                "num_q_heads": self.layout.num_q_heads,
                "num_kv_heads": self.layout.num_kv_heads,
                "head_dim": self.layout.head_dim,
                "rot_order": self.layout.rot_order,
                "page_tokens": self.layout.page_tokens,
            },
            "sequences": {
                str(seq): {"pages": self._seq_pages[seq], "length": self._seq_len[seq]}
                for seq in sorted(self._seq_pages)
            },
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [_DUMP_MAGIC, struct.pack("<II", _DUMP_VERSION, len(blob)), blob]
        for pid in sorted(
            pid for pids in self._seq_pages.values() for pid in pids
        ):
            page = self._pages[pid]
            parts.append(page.k_payload.tobytes())
            parts.append(page.v_payload.tobytes())
            if self.precision == INT4:
                parts.append(page.k_scale.tobytes())
                parts.append(page.k_zp.tobytes())
                parts.append(page.v_scale.tobytes())
                parts.append(page.v_zp.tobytes())
        with open(path, "wb") as f:
            f.write(b"".join(parts))

    @classmethod
    def load(cls, path: str) -> "PageTable":
        """Reconstruct a table from dump(); byte-exact page contents."""
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _DUMP_MAGIC:
            raise ConfigError(f"{path} is not a page dump")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != _DUMP_VERSION:
            raise ConfigError(f"unsupported dump version {version}")
        header = json.loads(raw[12 : 12 + hlen].decode())
        lay = header["layout"]
        layout = HeadLayout(
            num_q_heads=lay["num_q_heads"],
            num_kv_heads=lay["num_kv_heads"],
            head_dim=lay["head_dim"],
            rot_order=lay["rot_order"],
            page_tokens=lay["page_tokens"],
        )
        table = cls(layout, precision=header["precision"], num_pages=header["num_pages"])
        table.budget_bytes = header["budget_bytes"]
        offset = 12 + hlen
        allocated = sorted(
            pid for s in header["sequences"].values() for pid in s["pages"]
        )
        proto = _new_page(0, layout, header["precision"])
        fields_order = (
            ["k_payload", "v_payload", "k_scale", "k_zp", "v_scale", "v_zp"]
            if header["precision"] == INT4
            else ["k_payload", "v_payload"]
        )
        for pid in allocated:
            page = _new_page(pid, layout, header["precision"])
            for name in fields_order:
                arr = getattr(proto, name)
                nbytes = arr.nbytes
                data = np.frombuffer(raw[offset : offset + nbytes], dtype=arr.dtype)
                getattr(page, name)[...] = data.reshape(arr.shape)
                offset += nbytes
            table._pages[pid] = page
        table._free = [p for p in range(table.num_pages) if p not in set(allocated)]
        heapq.heapify(table._free)
        p = layout.page_tokens
        for seq_str, entry in sorted(header["sequences"].items(), key=lambda kv: int(kv[0])):
            seq = int(seq_str)
            table._seq_pages[seq] = list(entry["pages"])
            table._seq_len[seq] = entry["length"]
            for i, pid in enumerate(entry["pages"]):
                table._pages[pid].used = min(p, entry["length"] - i * p)
        return table


def _rotate_token(
    k: np.ndarray, v: np.ndarray, layout: HeadLayout, spec: Optional[RotationSpec]
) -> tuple[np.ndarray, np.ndarray]:
    """Stored-space (k, v) for one token under a rotation spec."""
    if spec is None:
        return k, v
    k_rot = apply_block_rotation(k, layout, spec)
    v_spec = value_branch_spec(spec)
    v_rot = apply_block_rotation(v, layout, v_spec) if v_spec is not None else v
    return k_rot, v_rot
