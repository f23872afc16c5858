import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saliq.packing import (CorruptFileError, PackedWeights, decode_container, encode_container, pack,
                           pack_codes, read_container, unpack, unpack_codes, write_container)
from saliq.quantizers import QuantSpec, quantize_rtn, rtn_params


@settings(max_examples=60, deadline=None)
@given(bits=st.sampled_from([1, 2, 3, 4, 5, 6, 7, 8]), n=st.integers(0, 67), seed=st.integers(0, 2**31))
def test_pack_unpack_identity(bits, n, seed):
    codes = np.random.default_rng(seed).integers(0, 2 ** bits, size=n)
    payload = pack_codes(codes, bits)
    assert len(payload) == (n * bits + 7) // 8
    np.testing.assert_array_equal(unpack_codes(payload, bits, n), codes)


def test_two_bit_stream_is_lsb_first():
    # 1 | 2<<2 | 3<<4 | 0<<6 = 0b00111001
    assert pack_codes(np.array([1, 2, 3, 0]), 2) == bytes([0x39])
    assert len(pack_codes(np.zeros(16, int), 2)) == 4


def test_three_bit_codes_straddle_bytes():
    # 5 | 6<<3 | 7<<6 = 0b1_1111_0101 -> bytes 0xF5, 0x01
    assert pack_codes(np.array([5, 6, 7]), 3) == bytes([0xF5, 0x01])


def test_out_of_range_codes_rejected():
    with pytest.raises(ValueError):
        pack_codes(np.array([4]), 2)
    with pytest.raises(ValueError):
        pack_codes(np.array([-1]), 2)


def test_wrong_payload_length_rejected():
    with pytest.raises(CorruptFileError, match="expected 1"):
        unpack_codes(b"\x00\x00", 2, 4)


def test_pack_roundtrip_with_group_table(rng):
    w = rng.normal(size=(4, 16))
    spec = rtn_params(w, 2, 8)
    codes = quantize_rtn(w, spec)
    pw = pack(codes, spec)
    assert pw.n_groups == 8 and pw.nbytes() == 16 + 8 * 8
    back, spec2 = unpack(pw)
    np.testing.assert_array_equal(back, codes)
    np.testing.assert_array_equal(spec2.scale, np.asarray(spec.scale, np.float32).ravel())


def test_group_table_size_checked():
    with pytest.raises(ValueError, match="group table"):
        pack(np.zeros((2, 4), int), QuantSpec(2, 4, "rtn", scale=np.ones(1), zero=np.zeros(1)))


def test_empty_matrix_packs_to_nothing():
    pw = pack(np.zeros((0, 4), int), QuantSpec(2, None, "rtn", scale=np.zeros(0), zero=np.zeros(0)))
    assert pw.payload == b"" and pw.n_groups == 0
    rec = decode_container(encode_container({"e": pw}))["e"]
    assert unpack(rec)[0].shape == (0, 4)


def _records(rng):
    w = rng.normal(size=(3, 8))
    spec = rtn_params(w, 3, 4)
    codes = quantize_rtn(w, spec)
    return {"w": pack(codes, spec), "dense": rng.normal(size=(2, 5)).astype(np.float32),
            "meta": {"kind": "test", "values": [1, 2]}}


def test_container_roundtrip(tmp_path, rng):
    recs = _records(rng)
    data = write_container(tmp_path / "x.ulbq", recs)
    assert data[:4] == b"ULBQ" and struct.unpack("<I", data[4:8])[0] == 1
    back = read_container(tmp_path / "x.ulbq")
    assert list(back) == ["w", "dense", "meta"]
    assert isinstance(back["w"], PackedWeights)
    np.testing.assert_array_equal(unpack(back["w"])[0], unpack(recs["w"])[0])
    np.testing.assert_array_equal(back["dense"], recs["dense"])
    assert back["meta"] == recs["meta"]
    assert encode_container(back) == data


def test_corrupted_byte_fails_crc(rng):
    data = bytearray(encode_container(_records(rng)))
    data[40] ^= 0xFF
    with pytest.raises(CorruptFileError):
        decode_container(bytes(data))


def test_truncation_and_magic_detected(rng):
    data = encode_container(_records(rng))
    with pytest.raises(CorruptFileError, match="truncated"):
        decode_container(data[:-3])
    with pytest.raises(CorruptFileError, match="magic"):
        decode_container(b"NOPE" + data[4:])
    with pytest.raises(CorruptFileError, match="version"):
        decode_container(data[:4] + struct.pack("<I", 9) + data[8:])
