import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from writesync import codec
from writesync.codec import PrngStream, as_bits, bits_to_str


def test_frame_fixed_length_is_plain_concatenation():
    assert bits_to_str(codec.frame("1101", "10101010", 0)) == "101010101101"


def test_deframe_reads_length_header():
    stream = "10101010" + "0100" + "1001"
    f = codec.deframe(stream, "10101010", n_len=4)
    assert f is not None
    assert bits_to_str(f.payload) == "1001"
    assert f.payload.size == 4


def test_deframe_mismatch_is_no_match():
    assert codec.deframe("1011101000000000000000000000", "10101010", n_len=16) is None


def test_deframe_aligns_on_first_one():
    payload = "1100"
    stream = "00" + "10101010" + payload
    f = codec.deframe(stream, n_len=0, n_payload=4)
    assert f.offset == 2
    assert bits_to_str(f.payload) == payload


def test_deframe_one_bit_prefix_error_discards():
    assert codec.deframe("10101011" + "0" * 20, n_len=0) is None


def test_deframe_without_any_one():
    assert codec.deframe("0000000000") is None


def test_deframe_truncated():
    full = codec.frame("101", n_len=16)
    with pytest.raises(codec.TruncatedFrameError):
        codec.deframe(full[:-1])
    with pytest.raises(codec.TruncatedFrameError):
        codec.deframe("1010")


def test_frame_rejects_oversized_payload():
    with pytest.raises(ValueError):
        codec.frame("1" * 16, n_len=4)
    codec.frame("1" * 15, n_len=4)


def test_frame_length():
    assert codec.frame_length(16) == 8 + 16 + 16
    assert codec.frame(np.zeros(16, np.uint8)).size == codec.frame_length(16)


def test_sync_sequence_must_start_with_one():
    with pytest.raises(ValueError):
        codec.frame("1", "0101")


def test_group2_msb_first():
    assert list(codec.group2("01")) == [1]
    assert list(codec.group2("0110")) == [1, 2]
    assert list(codec.group2("")) == []
    assert list(codec.group2("00011011")) == [0, 1, 2, 3]


def test_group2_odd_pads_with_zero():
    assert list(codec.group2("1")) == [2]
    assert bits_to_str(codec.ungroup2([2], n_bits=1)) == "1"


def test_xor_examples():
    class Fixed:
        def __init__(self, s):
            self.s = as_bits(s)

        def bits(self, n):
            return self.s[:n]

    assert bits_to_str(codec.xor_encode("1011", Fixed("1100"))) == "0111"
    assert bits_to_str(codec.xor_decode("0111", Fixed("1100"))) == "1011"
    assert codec.xor_decode("", PrngStream(1)).size == 0


def test_xor_of_zeros_is_prng_stream():
    a = codec.xor_encode(np.zeros(64, np.uint8), PrngStream(7))
    assert np.array_equal(a, PrngStream(7).bits(64))
    b = codec.xor_decode(PrngStream(7).bits(64), PrngStream(7))
    assert not b.any()


def test_xor_round_trip_20000_bits():
    p = np.random.default_rng(3).integers(0, 2, 20_000).astype(np.uint8)
    enc = codec.xor_encode(p, PrngStream(0xC0FFEE))
    assert not np.array_equal(enc, p)
    assert np.array_equal(codec.xor_decode(enc, PrngStream(0xC0FFEE)), p)


def test_prng_advances_index_and_resets():
    g = PrngStream(5)
    first = g.bits(10)
    assert g.index == 10
    g.reset()
    assert np.array_equal(g.bits(10), first)


def _reference_bits(seed, n):
    # independent uint64 implementation: splitmix64 seeding, xorshift64* output top bit
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = z ^ (z >> np.uint64(31))
        out = []
        for _ in range(n):
            x ^= x >> np.uint64(12)
            x ^= x << np.uint64(25)
            x ^= x >> np.uint64(27)
            out.append(int((x * np.uint64(0x2545F4914F6CDD1D)) >> np.uint64(63)))
    return out


def test_prng_matches_reference():
    for seed in (0, 1, 0xDEADBEEF, 2**63 + 5):
        assert PrngStream(seed).bits(200).tolist() == _reference_bits(seed, 200)


def test_prng_golden_vector():
    assert bits_to_str(PrngStream(0).bits(32)) == "01110000111100111000110111010010"


def test_whitening_balance_over_seeds():
    zeros = np.zeros(2_000, np.uint8)
    seeds = range(300)
    ok = sum(0.45 <= codec.xor_encode(zeros, PrngStream(s)).mean() <= 0.55 for s in seeds)
    assert ok / len(seeds) >= 0.99


def test_bit_helpers():
    assert bits_to_str(codec.hex_to_bits("0xDEAD")) == "1101111010101101"
    assert codec.bits_to_bytes(codec.hex_to_bits("dead")) == b"\xde\xad"
    assert bits_to_str(codec.bytes_to_bits(b"\x80")) == "10000000"
    assert codec.bits_to_int(codec.int_to_bits(1234, 16)) == 1234
    with pytest.raises(ValueError):
        codec.int_to_bits(16, 4)
    with pytest.raises(ValueError):
        as_bits("10a")
    with pytest.raises(ValueError):
        as_bits([0, 2])
    with pytest.raises(ValueError):
        codec.hex_to_bits("0x")


def test_frame_equality_and_serialize():
    f = codec.deframe(codec.frame("1100"))
    assert f == codec.deframe(codec.frame("1100"))
    assert bits_to_str(f.serialize()) == bits_to_str(codec.frame("1100"))


bitlists = st.lists(st.integers(0, 1), max_size=300)


@given(bitlists, st.integers(0, 2**64 - 1))
def test_xor_involution(bits, seed):
    enc = codec.xor_encode(bits, PrngStream(seed))
    assert np.array_equal(codec.xor_decode(enc, PrngStream(seed)), as_bits(bits))


@given(bitlists, st.sampled_from([0, 10, 16]))
def test_frame_round_trip(bits, n_len):
    stream = codec.frame(bits, n_len=n_len)
    f = codec.deframe(stream, n_len=n_len, n_payload=len(bits))
    assert np.array_equal(f.payload, as_bits(bits))
    assert stream.size == 8 + n_len + len(bits)


@given(st.lists(st.integers(0, 3), max_size=200))
def test_ungroup_group_identity(symbols):
    assert list(codec.group2(codec.ungroup2(symbols))) == symbols


@settings(max_examples=50)
@given(st.integers(0, 20), bitlists)
def test_deframe_skips_leading_zeros(k, bits):
    stream = np.concatenate([np.zeros(k, np.uint8), codec.frame(bits)])
    f = codec.deframe(stream)
    assert f.offset == k
    assert np.array_equal(f.payload, as_bits(bits))
