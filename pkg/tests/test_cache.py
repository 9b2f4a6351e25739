"""Paged cache: storage formats, capacity arithmetic, fused-append identity."""

import json
import struct

import numpy as np
import pytest

from kvrot.cache import (
    BF16,
    INT4,
    PageTable,
    bf16_bits_to_float,
    capacity_tokens,
    float_to_bf16_bits,
    token_bytes,
)
from kvrot.errors import (
    CapacityExceededError,
    ConfigError,
    NonFiniteInputError,
    SequenceNotFoundError,
    ShapeError,
)
from kvrot.int4 import dequantize_rows, quantize_rows
from kvrot.layout import HeadLayout
from kvrot.rotation import RotationSpec, apply_block_rotation, make_signs, value_branch_spec

BIG = HeadLayout(num_q_heads=8, num_kv_heads=8, head_dim=128, rot_order=128)


def _kv(rng, layout, tokens=1):
    shape = (tokens, layout.num_kv_heads, layout.head_dim)
    return rng.standard_normal(shape) * 3, rng.standard_normal(shape)


def test_token_bytes_frozen():
    assert token_bytes(BIG, BF16) == 4096
    assert token_bytes(BIG, INT4) == 1024
    assert token_bytes(BIG, INT4, include_sidecar=True) == 1104
    with pytest.raises(ConfigError):
        token_bytes(BIG, "fp8")


def test_capacity_frozen_and_ratio():
    mib = 1 << 20
    assert capacity_tokens(mib, BIG, BF16) == 256
    assert capacity_tokens(mib, BIG, INT4) == 1024
    for budget in (0, 1, 4095, 4096, 123456789, 10**12):
        assert capacity_tokens(budget, BIG, INT4) == 4 * capacity_tokens(budget, BIG, BF16)
    with pytest.raises(ConfigError):
        capacity_tokens(-1, BIG, BF16)


def test_bf16_bits_frozen():
    assert float_to_bf16_bits(np.array([1.0]))[0] == 0x3F80
    # round-to-nearest-even on the two ties around 1.0
    ties = np.array([1.0 + 2.0**-8, np.float32(1.0 + 3.0 * 2.0**-9)])
    np.testing.assert_array_equal(float_to_bf16_bits(ties), [0x3F80, 0x3F81])
    np.testing.assert_array_equal(
        bf16_bits_to_float(np.array([0x3F80, 0x3F81], dtype=np.uint16)),
        [1.0, 1.0078125],
    )


def test_bf16_pool_stores_truncated_vectors(rng, small_layout):
    table = PageTable(small_layout, precision=BF16, num_pages=4)
    table.create_sequence(0)
    k, v = _kv(rng, small_layout)
    table.append_token(0, k[0], v[0])
    k_hat, v_hat = table.read_token(0, 0)
    np.testing.assert_array_equal(
        k_hat, bf16_bits_to_float(float_to_bf16_bits(k[0])).reshape(k[0].shape)
    )
    np.testing.assert_array_equal(
        v_hat, bf16_bits_to_float(float_to_bf16_bits(v[0])).reshape(v[0].shape)
    )


def test_int4_append_matches_manual_quantization(rng, small_layout):
    table = PageTable(small_layout, precision=INT4, num_pages=4)
    table.create_sequence(7)
    k, v = _kv(rng, small_layout)
    table.append_token(7, k[0], v[0])
    k_hat, v_hat = table.read_token(7, 0)
    for stored, raw in ((k_hat, k[0]), (v_hat, v[0])):
        packed, scale, zp = quantize_rows(raw)
        np.testing.assert_array_equal(
            stored, dequantize_rows(packed, scale, zp, small_layout.head_dim)
        )


def test_rotated_append_stores_rotated_space(rng, small_layout):
    spec = RotationSpec(
        order=small_layout.rot_order,
        signs=make_signs(5, 0, small_layout.head_dim, small_layout.rot_order),
    )
    table = PageTable(small_layout, precision=INT4, num_pages=4)
    table.create_sequence(0)
    k, v = _kv(rng, small_layout)
    table.append_token(0, k[0], v[0], spec=spec)
    k_hat, v_hat = table.read_token(0, 0)

    k_rot = apply_block_rotation(k[0], small_layout, spec)
    packed, scale, zp = quantize_rows(k_rot)
    np.testing.assert_array_equal(
        k_hat, dequantize_rows(packed, scale, zp, small_layout.head_dim)
    )
    v_rot = apply_block_rotation(v[0], small_layout, value_branch_spec(spec))
    packed, scale, zp = quantize_rows(v_rot)
    np.testing.assert_array_equal(
        v_hat, dequantize_rows(packed, scale, zp, small_layout.head_dim)
    )


def test_fused_matches_two_pass_bitwise(rng, small_layout, tmp_path):
    spec = RotationSpec(
        order=small_layout.rot_order,
        signs=make_signs(11, 3, small_layout.head_dim, small_layout.rot_order),
    )
    k, v = _kv(rng, small_layout, tokens=19)  # crosses page boundaries
    fused = PageTable(small_layout, precision=INT4, num_pages=8)
    unfused = PageTable(small_layout, precision=INT4, num_pages=8)
    fused.create_sequence(1)
    unfused.create_sequence(1)
    for i in range(19):
        fused.append_token(1, k[i], v[i], spec=spec)
    assert unfused.append_tokens_two_pass(1, k, v, spec=spec) == 0
    fused.dump(tmp_path / "fused.kvpg")
    unfused.dump(tmp_path / "unfused.kvpg")
    assert (tmp_path / "fused.kvpg").read_bytes() == (tmp_path / "unfused.kvpg").read_bytes()


def test_read_sequence_matches_token_loop(rng, small_layout):
    table = PageTable(small_layout, precision=INT4, num_pages=8)
    table.create_sequence(0)
    k, v = _kv(rng, small_layout, tokens=11)
    table.append_tokens_two_pass(0, k, v)
    ks, vs = table.read_sequence(0)
    assert ks.shape == (11, small_layout.num_kv_heads, small_layout.head_dim)
    for t in range(11):
        kt, vt = table.read_token(0, t)
        np.testing.assert_array_equal(ks[t], kt)
        np.testing.assert_array_equal(vs[t], vt)


def test_page_accounting_and_reuse(rng, small_layout):
    # page_tokens=4: 9 tokens occupy 3 pages
    table = PageTable(small_layout, precision=INT4, num_pages=6)
    table.create_sequence(0)
    table.create_sequence(1)
    k, v = _kv(rng, small_layout, tokens=9)
    table.append_tokens_two_pass(0, k, v)
    table.append_token(1, k[0], v[0])
    assert table.allocated_pages == 4
    assert table.free_pages == 2
    assert table.used_tokens == 10
    assert table.sequence_length(0) == 9
    assert table.sequence_ids() == [0, 1]

    assert table.free_sequence(0) == 3
    assert table.free_pages == 5
    assert not table.has_sequence(0)

    # freed ids return lowest-first: sequence 2 must land on page 0
    table.create_sequence(2)
    table.append_token(2, k[0], v[0])
    assert table._seq_pages[2] == [0]


def test_pool_exhaustion(rng, small_layout):
    table = PageTable(small_layout, precision=INT4, num_pages=2)
    table.create_sequence(0)
    k, v = _kv(rng, small_layout, tokens=8)
    table.append_tokens_two_pass(0, k, v)
    with pytest.raises(CapacityExceededError):
        table.append_token(0, k[0], v[0])


def test_validation_errors(rng, small_layout):
    with pytest.raises(ConfigError):
        PageTable(small_layout, precision="fp4", num_pages=1)
    with pytest.raises(ConfigError):
        PageTable(small_layout, budget_bytes=1024, num_pages=2)
    with pytest.raises(ConfigError):
        PageTable(small_layout)

    table = PageTable(small_layout, num_pages=2)
    table.create_sequence(0)
    with pytest.raises(ConfigError):
        table.create_sequence(0)
    with pytest.raises(SequenceNotFoundError):
        table.append_token(9, np.zeros((2, 32)), np.zeros((2, 32)))
    with pytest.raises(SequenceNotFoundError):
        table.read_token(9, 0)
    with pytest.raises(ShapeError):
        table.append_token(0, np.zeros((2, 16)), np.zeros((2, 16)))
    bad = np.zeros((2, 32))
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteInputError):
        table.append_token(0, bad, np.zeros((2, 32)))
    with pytest.raises(IndexError):
        table.read_token(0, 0)


def test_capacity_method_variants(small_layout):
    by_pages = PageTable(small_layout, num_pages=5)
    assert by_pages.capacity_tokens() == 5 * small_layout.page_tokens

    budget = 1 << 16
    by_budget = PageTable(small_layout, precision=INT4, budget_bytes=budget)
    assert by_budget.capacity_tokens(INT4) == 4 * by_budget.capacity_tokens(BF16)
    assert by_budget.capacity_tokens(BF16) == budget // token_bytes(small_layout, BF16)


def test_dump_load_round_trip(rng, small_layout, tmp_path):
    table = PageTable(small_layout, precision=INT4, num_pages=8)
    table.create_sequence(3)
    table.create_sequence(5)
    k, v = _kv(rng, small_layout, tokens=7)
    table.append_tokens_two_pass(3, k, v)
    table.append_token(5, k[0], v[0])

    path = tmp_path / "cache.kvpg"
    table.dump(path)
    loaded = PageTable.load(path)
    assert loaded.sequence_ids() == [3, 5]
    assert loaded.sequence_length(3) == 7
    for seq in (3, 5):
        for a, b in zip(loaded.read_sequence(seq), table.read_sequence(seq)):
            np.testing.assert_array_equal(a, b)

    # a second dump of the loaded table reproduces the file byte for byte
    path2 = tmp_path / "cache2.kvpg"
    loaded.dump(path2)
    assert path.read_bytes() == path2.read_bytes()

    # appends continue cleanly after a reload
    loaded.append_token(5, k[1], v[1])
    assert loaded.sequence_length(5) == 2


def test_load_rejects_bad_files(small_layout, tmp_path):
    path = tmp_path / "bad.kvpg"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ConfigError):
        PageTable.load(path)

    table = PageTable(small_layout, num_pages=1)
    good = tmp_path / "good.kvpg"
    table.dump(good)
    raw = bytearray(good.read_bytes())
    raw[4:8] = struct.pack("<I", 99)  # future version field
    bad_version = tmp_path / "vers.kvpg"
    bad_version.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        PageTable.load(bad_version)


def test_dump_header_is_inspectable(small_layout, tmp_path):
    # the JSON header after the magic is a documented, parseable prefix
    table = PageTable(small_layout, precision=BF16, num_pages=2)
    table.create_sequence(1)
    path = tmp_path / "hdr.kvpg"
    table.dump(path)
    raw = path.read_bytes()
    assert raw[:4] == b"KVPG"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    header = json.loads(raw[12 : 12 + hlen])
    assert header["precision"] == BF16
    assert header["layout"]["head_dim"] == small_layout.head_dim
    assert header["sequences"] == {"1": {"pages": [], "length": 0}}
