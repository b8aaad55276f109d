"""
IEEE-754 binary16 encode/decode and single-bit flips.

Bit positions count from the LSB: 15 is the sign, 14..10 the exponent
(MSB..LSB) and 9..0 the mantissa. Position 14 is the "1st exponent bit"
and 13 the "2nd exponent bit"; a sweep over "the x-th bit" is reported
with these indices.
"""
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from .errors import CodecError

SIGN_BIT = 15
CRITICAL_BIT = 14
EXPONENT_BITS = range(10, 15)
MANTISSA_BITS = range(0, 10)
NUM_BITS = 16

EXPONENT_MASK = 0x7C00
MANTISSA_MASK = 0x03FF
CANONICAL_NAN = 0x7E00


class BitField(StrEnum):
    SIGN = 'sign'
    EXPONENT = 'exponent'
    MANTISSA = 'mantissa'


@dataclass(frozen=True, slots=True)
class Half16:
    """A 16-bit binary16 pattern"""
    bits: int

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 0 <= int(self.bits) <= 0xFFFF:
            raise CodecError(f"not a 16-bit pattern: {self.bits!r}")
        object.__setattr__(self, 'bits', int(self.bits))

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits & EXPONENT_MASK) >> 10

    @property
    def mantissa(self) -> int:
        return self.bits & MANTISSA_MASK

    def is_zero(self) -> bool:
        return self.bits & 0x7FFF == 0

    def is_subnormal(self) -> bool:
        return self.exponent == 0 and self.mantissa != 0

    def is_normal(self) -> bool:
        return 0 < self.exponent < 31

    def is_inf(self) -> bool:
        return self.exponent == 31 and self.mantissa == 0

    def is_nan(self) -> bool:
        return self.exponent == 31 and self.mantissa != 0

    def is_finite(self) -> bool:
        return self.exponent != 31

    def __str__(self) -> str:
        return f"0x{self.bits:04X}"


def _as_half(h: Half16 | int) -> Half16:
    return h if isinstance(h, Half16) else Half16(h)


def check_bit_position(p: int) -> int:
    if not isinstance(p, (int, np.integer)) or not 0 <= int(p) < NUM_BITS:
        raise CodecError(f"bit position must be in [0, 15]: {p!r}")
    return int(p)


def decode_half(h: Half16 | int) -> float:
    """
    Return the exact value of a pattern as a Python float.

    binary64 holds every binary16 value exactly, so subnormals, signed
    zeros and infinities come back unchanged; NaN payloads are lost here
    but survive flip_bit, which never leaves the bit domain.
    """
    bits = _as_half(h).bits
    return float(np.array(bits, dtype=np.uint16).view(np.float16))


def encode_half(x: float) -> Half16:
    """Round-to-nearest-even; overflow goes to +-inf and every NaN to CANONICAL_NAN"""
    x = float(x)
    if x != x:
        return Half16(CANONICAL_NAN)
    with np.errstate(over='ignore'):
        half = np.array(x, dtype=np.float16)
    return Half16(int(half.view(np.uint16)))


def flip_bit(h: Half16 | int, p: int) -> Half16:
    return Half16(_as_half(h).bits ^ (1 << check_bit_position(p)))


def bit_field_of(p: int) -> BitField:
    p = check_bit_position(p)
    if p == SIGN_BIT:
        return BitField.SIGN
    if p in EXPONENT_BITS:
        return BitField.EXPONENT
    return BitField.MANTISSA


def critical_flip_amplification(h: Half16 | int) -> float:
    """
    Magnitude ratio caused by a 0->1 flip of the exponent MSB.

    Normal patterns below 1 give exactly 2**16; subnormals gain more because
    the flipped pattern becomes normal and picks up the implicit leading one.
    Patterns in [1, 2) have exponent field 15 and would flip into inf or NaN.
    """
    h = _as_half(h)
    if h.is_zero():
        raise CodecError(f"{h}: amplification of zero is undefined")
    if not h.is_finite():
        raise CodecError(f"{h}: pattern is not finite")
    if h.bits & (1 << CRITICAL_BIT):
        raise CodecError(f"{h}: exponent MSB is already set")
    if h.exponent == 15:
        raise CodecError(f"{h}: flipping the exponent MSB leaves the finite range")
    return abs(decode_half(flip_bit(h, CRITICAL_BIT))) / abs(decode_half(h))


def flip_bits(bits: np.ndarray, p: int) -> np.ndarray:
    """Vectorised flip_bit over a uint16 array"""
    bits = np.asarray(bits)
    if bits.dtype != np.uint16:
        raise CodecError(f"expected uint16 patterns, got {bits.dtype}")
    return bits ^ np.uint16(1 << check_bit_position(p))


def bit_means(bits: np.ndarray) -> np.ndarray:
    """Fraction of patterns with each bit set, indexed by bit position"""
    bits = np.asarray(bits, dtype=np.uint16).ravel()
    if bits.size == 0:
        return np.zeros(NUM_BITS)
    return np.array([((bits >> np.uint16(p)) & np.uint16(1)).mean() for p in range(NUM_BITS)])
