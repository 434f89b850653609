"""Bit-level encodings shared by every transmission strategy.

Bit strings are plain ``numpy.uint8`` arrays holding 0/1 values. Anything
bit-like (``"1011"``, ``[1, 0, 1, 1]``, an array) is accepted on input and
normalised with :func:`as_bits`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

BitsLike = Union[str, Iterable[int], np.ndarray]

DEFAULT_SYNC_SEQ = "10101010"
DEFAULT_LENGTH_HEADER_BITS = 16

_MASK64 = (1 << 64) - 1


class TruncatedFrameError(ValueError):
    """The received stream ends before a complete frame."""


def as_bits(bits: BitsLike) -> np.ndarray:
    """Return ``bits`` as a fresh 1-D uint8 array of zeros and ones."""
    if isinstance(bits, str):
        if bits and set(bits) - {"0", "1"}:
            raise ValueError(f"not a bit string: {bits!r}")
        return np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0") if bits else np.zeros(0, np.uint8)
    arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits)
    if arr.size == 0:
        return np.zeros(0, dtype=np.uint8)
    if arr.ndim != 1 or np.any((arr != 0) & (arr != 1)):
        raise ValueError("bits must be a flat sequence of 0/1 values")
    return arr.astype(np.uint8)


def bits_to_str(bits: BitsLike) -> str:
    return "".join("1" if b else "0" for b in as_bits(bits))


def bytes_to_bits(data: bytes) -> np.ndarray:
    """Unpack bytes MSB-first."""
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bits_to_bytes(bits: BitsLike) -> bytes:
    """Pack MSB-first; a trailing partial byte is zero-padded."""
    return np.packbits(as_bits(bits)).tobytes()


def hex_to_bits(text: str) -> np.ndarray:
    """``"0xDEAD"`` or ``"dead"`` to bits, four bits per hex digit."""
    digits = text[2:] if text.lower().startswith("0x") else text
    if not digits or any(c not in "0123456789abcdefABCDEF" for c in digits):
        raise ValueError(f"not a hex string: {text!r}")
    value = int(digits, 16)
    n = 4 * len(digits)
    return np.array([(value >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)


def int_to_bits(value: int, width: int) -> np.ndarray:
    """Big-endian fixed-width encoding."""
    if value < 0 or (width < 64 and value >> width):
        raise ValueError(f"{value} does not fit in {width} bits")
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def bits_to_int(bits: BitsLike) -> int:
    value = 0
    for b in as_bits(bits):
        value = (value << 1) | int(b)
    return value


# -- PRNG whitening ----------------------------------------------------------


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class PrngStream:
    """xorshift64* generator emitting one bit (the product's top bit) per step.

    The 64-bit seed is expanded once through splitmix64 so that small or zero
    seeds still give a non-zero xorshift state. Both ends of a link construct
    a stream from the same seed and consume it in lock-step.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.reset()

    def reset(self) -> None:
        self._state = _splitmix64(self.seed) or 0x9E3779B97F4A7C15
        self.index = 0

    def next_bit(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        self.index += 1
        return ((x * 0x2545F4914F6CDD1D) & _MASK64) >> 63

    def bits(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint8)
        for i in range(n):
            out[i] = self.next_bit()
        return out

    def __repr__(self) -> str:
        return f"PrngStream(seed={self.seed:#x}, index={self.index})"


def xor_encode(payload: BitsLike, prng: PrngStream) -> np.ndarray:
    """Whiten ``payload`` with the next ``len(payload)`` bits of ``prng``."""
    p = as_bits(payload)
    return p ^ prng.bits(p.size)


def xor_decode(received: BitsLike, prng: PrngStream) -> np.ndarray:
    """Inverse of :func:`xor_encode` for an index-aligned stream."""
    return xor_encode(received, prng)


# -- 2-bit symbols -----------------------------------------------------------


def group2(payload: BitsLike) -> np.ndarray:
    """Pair bits into symbols 0..3, first bit high (``"01"`` is symbol 1).

    Odd-length input gets a single trailing 0; callers that need the exact
    length back pass it to :func:`ungroup2`.
    """
    p = as_bits(payload)
    if p.size % 2:
        p = np.append(p, np.uint8(0))
    return (2 * p[0::2] + p[1::2]).astype(np.uint8)


def ungroup2(symbols: Iterable[int], n_bits: Optional[int] = None) -> np.ndarray:
    s = np.asarray(list(symbols) if not isinstance(symbols, np.ndarray) else symbols, dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() > 3):
        raise ValueError("symbols must lie in 0..3")
    out = np.empty(2 * s.size, dtype=np.uint8)
    out[0::2] = s >> 1
    out[1::2] = s & 1
    return out if n_bits is None else out[:n_bits]


# -- framing -----------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    sync_seq: np.ndarray
    length_header_bits: int
    payload: np.ndarray
    offset: int = 0  # index of the first received 1 the receiver armed on
    padded: bool = False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            np.array_equal(self.sync_seq, other.sync_seq)
            and self.length_header_bits == other.length_header_bits
            and np.array_equal(self.payload, other.payload)
            and self.offset == other.offset
            and self.padded == other.padded
        )

    def serialize(self) -> np.ndarray:
        return frame(self.payload, self.sync_seq, self.length_header_bits)


def _check_sync_seq(sync_seq: BitsLike) -> np.ndarray:
    seq = as_bits(sync_seq)
    if seq.size == 0 or seq[0] != 1:
        # receivers arm on the first decoded 1
        raise ValueError("sync sequence must start with a 1")
    return seq


def frame(
    payload: BitsLike,
    sync_seq: BitsLike = DEFAULT_SYNC_SEQ,
    n_len: int = DEFAULT_LENGTH_HEADER_BITS,
) -> np.ndarray:
    """``sync_seq || length header (n_len bits, big-endian) || payload``."""
    seq = _check_sync_seq(sync_seq)
    p = as_bits(payload)
    if n_len < 0:
        raise ValueError("n_len must be >= 0")
    if n_len == 0:
        return np.concatenate([seq, p])
    if p.size >= 1 << n_len:
        raise ValueError(f"payload of {p.size} bits does not fit a {n_len}-bit length header")
    return np.concatenate([seq, int_to_bits(p.size, n_len), p])


def frame_length(n_payload: int, sync_seq: BitsLike = DEFAULT_SYNC_SEQ, n_len: int = DEFAULT_LENGTH_HEADER_BITS) -> int:
    return len(as_bits(sync_seq)) + n_len + n_payload


def deframe(
    stream: BitsLike,
    sync_seq: BitsLike = DEFAULT_SYNC_SEQ,
    n_len: int = DEFAULT_LENGTH_HEADER_BITS,
    n_payload: Optional[int] = None,
) -> Optional[Frame]:
    """Align on the first 1 of ``stream`` and validate the sync prefix.

    Returns ``None`` when nothing was armed (no 1 received) or the prefix
    does not match, in which case the caller discards the round. With
    ``n_len == 0`` the payload is ``n_payload`` bits, or the rest of the
    stream when that is not given.
    """
    seq = _check_sync_seq(sync_seq)
    s = as_bits(stream)
    ones = np.flatnonzero(s)
    if ones.size == 0:
        return None
    start = int(ones[0])
    aligned = s[start:]
    n = seq.size
    if aligned.size < n:
        raise TruncatedFrameError(f"need {n} sync bits, have {aligned.size}")
    if not np.array_equal(aligned[:n], seq):
        return None
    if n_len > 0:
        if aligned.size < n + n_len:
            raise TruncatedFrameError("stream ends inside the length header")
        m = bits_to_int(aligned[n : n + n_len])
    elif n_payload is not None:
        m = n_payload
    else:
        m = aligned.size - n
    end = n + n_len + m
    if aligned.size < end:
        raise TruncatedFrameError(f"frame needs {end} bits after alignment, have {aligned.size}")
    return Frame(seq, n_len, aligned[n + n_len : end].copy(), offset=start)
