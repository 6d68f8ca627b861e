"""Bit-exact views of IEEE 754 single-precision values.

Every leakage prediction in this package is a function of the exact
32-bit encoding of some intermediate value, so the scalar API here is
bit-exact by construction (it round-trips through the native float32
encoding) and a vectorized counterpart is provided for the hot attack
loops.

Byte order convention: storage order is least-significant byte first,
matching how an 8-bit target loads a 32-bit value into four consecutive
registers. Byte index 0 is the low mantissa byte, byte index 3 carries
the sign bit and the upper seven exponent bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

MANTISSA_BITS = 23
MANTISSA_MASK = (1 << MANTISSA_BITS) - 1
EXPONENT_MASK = 0xFF
EXPONENT_BIAS = 127

#: Hamming weight of every byte value, indexable by uint8 arrays.
HW8_TABLE = np.array([v.bit_count() for v in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class FloatBits:
    """Sign / biased-exponent / mantissa fields of one float32 value."""

    sign: int
    exponent: int
    mantissa: int

    def __post_init__(self) -> None:
        if self.sign not in (0, 1):
            raise DomainError(f"sign must be 0 or 1, got {self.sign}")
        if not 0 <= self.exponent <= EXPONENT_MASK:
            raise DomainError(f"exponent out of [0, 255]: {self.exponent}")
        if not 0 <= self.mantissa <= MANTISSA_MASK:
            raise DomainError(f"mantissa out of [0, 2^23 - 1]: {self.mantissa}")

    def to_u32(self) -> int:
        return (self.sign << 31) | (self.exponent << MANTISSA_BITS) | self.mantissa


def float_to_u32(value: float) -> int:
    """Bit pattern of ``value`` encoded as float32 (round-to-nearest-even).

    Raises :class:`DomainError` for NaN, infinities, and doubles too large
    to encode as a finite float32.
    """
    v = float(value)
    if not math.isfinite(v):
        raise DomainError(f"non-finite value: {v!r}")
    try:
        packed = struct.pack("<f", v)
    except OverflowError as exc:
        raise DomainError(f"value does not fit in float32: {v!r}") from exc
    (u,) = struct.unpack("<I", packed)
    if (u >> MANTISSA_BITS) & EXPONENT_MASK == EXPONENT_MASK:
        # Large doubles can still round up to +/-inf.
        raise DomainError(f"value rounds to non-finite float32: {v!r}")
    return u


def u32_to_float(pattern: int) -> float:
    (v,) = struct.unpack("<f", struct.pack("<I", pattern & 0xFFFFFFFF))
    return v


def decompose(value: float) -> FloatBits:
    """Split a finite value into its float32 sign/exponent/mantissa fields."""
    u = float_to_u32(value)
    return FloatBits(
        sign=u >> 31,
        exponent=(u >> MANTISSA_BITS) & EXPONENT_MASK,
        mantissa=u & MANTISSA_MASK,
    )


def reconstruct(bits: FloatBits) -> float:
    """Inverse of :func:`decompose`.

    Exponent 255 (NaN/inf encodings) is rejected; exponent 0 decodes as
    zero or subnormal exactly as the hardware would.
    """
    if bits.exponent == EXPONENT_MASK:
        raise DomainError("exponent 255 encodes NaN/inf, refusing to synthesize")
    return u32_to_float(bits.to_u32())


def to_storage_bytes(value: float) -> tuple[int, int, int, int]:
    """Four storage-order bytes (least-significant first) of ``value``."""
    u = float_to_u32(value)
    return (u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF, (u >> 24) & 0xFF)


def from_storage_bytes(data: tuple[int, int, int, int]) -> float:
    b0, b1, b2, b3 = (int(b) & 0xFF for b in data)
    return u32_to_float(b0 | (b1 << 8) | (b2 << 16) | (b3 << 24))


def hamming_weight(byte: int) -> int:
    """Population count of an unsigned 8-bit value."""
    b = int(byte)
    if not 0 <= b <= 0xFF:
        raise DomainError(f"byte out of [0, 255]: {byte}")
    return b.bit_count()


def hamming_weight_u32(pattern: int) -> int:
    return (int(pattern) & 0xFFFFFFFF).bit_count()


def candidate_from_mantissa7(m7: int, sign: int, exponent: int) -> float:
    """Value whose mantissa has ``m7`` in its top 7 bits and zeros below.

    This is the reconstruction used by the reduced mantissa search: only
    the most significant mantissa byte fraction is hypothesized and the
    remaining 16 bits are assumed zero.
    """
    m7 = int(m7)
    if not 0 <= m7 <= 0x7F:
        raise DomainError(f"mantissa7 out of [0, 127]: {m7}")
    return reconstruct(FloatBits(sign=sign, exponent=exponent, mantissa=m7 << 16))


# ---------------------------------------------------------------------------
# vectorized helpers (attack hot path)
# ---------------------------------------------------------------------------


def f32_bits(values: np.ndarray) -> np.ndarray:
    """uint32 bit patterns of a float32 array (element-wise view)."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    return arr.view(np.uint32)


def storage_byte(patterns: np.ndarray, index: int) -> np.ndarray:
    """Extract storage byte ``index`` (0 = LSB) from uint32 patterns."""
    if not 0 <= index <= 3:
        raise DomainError(f"byte index out of [0, 3]: {index}")
    return ((patterns >> np.uint32(8 * index)) & np.uint32(0xFF)).astype(np.uint8)


def hw_of_bytes(byte_values: np.ndarray) -> np.ndarray:
    """Hamming weight of a uint8 array, via table lookup."""
    return HW8_TABLE[byte_values]


def storage_bytes_matrix(values: np.ndarray) -> np.ndarray:
    """(n, 4) uint8 matrix of storage-order bytes for a float32 array."""
    bits = f32_bits(np.asarray(values))
    return np.stack([storage_byte(bits, b) for b in range(4)], axis=-1)
