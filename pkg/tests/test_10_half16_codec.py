import math

import numpy as np
import pytest

from ck_seu_diffusion.errors import CodecError
from ck_seu_diffusion.half16_codec import (CANONICAL_NAN, CRITICAL_BIT, NUM_BITS, SIGN_BIT, BitField, Half16,
                                           bit_field_of, bit_means, critical_flip_amplification, decode_half,
                                           encode_half, flip_bit, flip_bits)

ALL_PATTERNS = np.arange(1 << 16, dtype=np.uint16)


def reference_value(h: int) -> float:
    """binary16 value from the field formula"""
    sign = -1.0 if h >> 15 else 1.0
    exponent = (h >> 10) & 0x1F
    mantissa = h & 0x3FF
    if exponent == 31:
        return sign * math.inf if mantissa == 0 else math.nan
    if exponent == 0:
        return sign * mantissa / 1024 * 2.0 ** -14
    return sign * (1 + mantissa / 1024) * 2.0 ** (exponent - 15)


def reference_flip(bits: np.ndarray, p: int) -> np.ndarray:
    """Split into fields, toggle bit p of its field by add/subtract, reassemble"""
    bits = bits.astype(np.int64)
    sign = bits >> 15
    exponent = (bits >> 10) & 0x1F
    mantissa = bits & 0x3FF
    if p == 15:
        sign = 1 - sign
    elif p >= 10:
        weight = 1 << (p - 10)
        exponent = np.where((exponent // weight) % 2 == 1, exponent - weight, exponent + weight)
    else:
        weight = 1 << p
        mantissa = np.where((mantissa // weight) % 2 == 1, mantissa - weight, mantissa + weight)
    return (sign * 32768 + exponent * 1024 + mantissa).astype(np.uint16)


def test_10_decode_examples():
    assert decode_half(0x3800) == 0.5
    assert decode_half(0x0000) == 0.0
    assert not math.copysign(1.0, decode_half(0x0000)) < 0
    assert math.copysign(1.0, decode_half(0x8000)) < 0
    assert decode_half(0x7C00) == math.inf
    assert decode_half(0xFC00) == -math.inf
    assert math.isnan(decode_half(0x7E00))
    assert decode_half(0x0001) == 2.0 ** -24
    assert decode_half(0x7BFF) == 65504.0


def test_11_decode_matches_field_formula():
    for h in range(1 << 16):
        expected = reference_value(h)
        if math.isnan(expected):
            assert math.isnan(decode_half(h))
        else:
            assert decode_half(h) == expected, hex(h)


def test_12_encode_examples():
    assert encode_half(0.5) == Half16(0x3800)
    assert encode_half(65536.0) == Half16(0x7C00)
    assert encode_half(-65536.0) == Half16(0xFC00)
    assert encode_half(2.0 ** -24) == Half16(0x0001)
    assert encode_half(math.nan) == Half16(CANONICAL_NAN)
    assert encode_half(65504.0) == Half16(0x7BFF)
    # ties go to the even mantissa
    assert encode_half(1 + 2.0 ** -11) == Half16(0x3C00)
    assert encode_half(1 + 3 * 2.0 ** -11) == Half16(0x3C02)
    assert encode_half(65519.0) == Half16(0x7BFF)
    assert encode_half(65520.0) == Half16(0x7C00)


def test_13_encode_decode_round_trip():
    for h in range(1 << 16):
        if Half16(h).is_nan():
            continue
        assert encode_half(decode_half(h)).bits == h, hex(h)


def test_14_flip_examples():
    assert flip_bit(0x3800, CRITICAL_BIT) == Half16(0x7800)
    assert decode_half(flip_bit(0x3800, CRITICAL_BIT)) == 32768.0
    assert flip_bit(0x0000, SIGN_BIT) == Half16(0x8000)
    # NaN payloads survive in the bit domain
    assert flip_bit(0x7E55, 3) == Half16(0x7E5D)
    assert flip_bit(0x7C01, 0) == Half16(0x7C00)


def test_15_flip_matches_reference_for_every_pattern_and_bit():
    for p in range(NUM_BITS):
        flipped = flip_bits(ALL_PATTERNS, p)
        assert np.array_equal(flipped, reference_flip(ALL_PATTERNS, p)), p
        changed = flipped ^ ALL_PATTERNS
        assert np.all(changed == np.uint16(1 << p))
        assert np.array_equal(flip_bits(flipped, p), ALL_PATTERNS)


def test_16_scalar_flip_agrees_with_vector_flip():
    sample = ALL_PATTERNS[::97]
    for p in range(NUM_BITS):
        expected = flip_bits(sample, p)
        for h, e in zip(sample, expected):
            assert flip_bit(int(h), p).bits == int(e)


def test_17_sign_flip_negates():
    values = ALL_PATTERNS.view(np.float16).astype(np.float64)
    negated = flip_bits(ALL_PATTERNS, SIGN_BIT).view(np.float16).astype(np.float64)
    keep = ~np.isnan(values)
    assert np.array_equal(negated[keep], -values[keep])
    assert np.array_equal(np.signbit(negated[keep]), ~np.signbit(values[keep]))


def test_18_critical_bit_amplification_law():
    values = ALL_PATTERNS.view(np.float16).astype(np.float64)
    flipped = flip_bits(ALL_PATTERNS, CRITICAL_BIT).view(np.float16).astype(np.float64)
    exponent = (ALL_PATTERNS >> np.uint16(10)) & np.uint16(0x1F)
    below_one = (exponent >= 1) & (exponent <= 14)
    assert below_one.sum() == 2 * 14 * 1024
    assert np.all(np.isfinite(flipped[below_one]))
    assert np.all(np.abs(flipped[below_one]) / np.abs(values[below_one]) == 65536.0)
    # subnormals land in the normal range and gain the implicit leading one
    subnormal = (exponent == 0) & (ALL_PATTERNS & np.uint16(0x3FF) != 0)
    for h in ALL_PATTERNS[subnormal]:
        expected = abs(reference_value(int(h) ^ 0x4000)) / abs(reference_value(int(h)))
        assert critical_flip_amplification(int(h)) == expected
    # [1, 2) has exponent field 15 and flips out of the finite range
    at_one = exponent == 15
    assert np.all(~np.isfinite(flipped[at_one]))


def test_19_critical_flip_amplification_examples():
    assert critical_flip_amplification(0x3800) == 65536.0
    assert critical_flip_amplification(Half16(0xB555)) == 65536.0
    assert critical_flip_amplification(0x0001) == 33587200.0
    for h in (0x0000, 0x8000, 0x7C00, 0x7E00, 0x7800, 0x3C00):
        with pytest.raises(CodecError):
            critical_flip_amplification(h)


def test_20_bit_fields():
    assert bit_field_of(14) == BitField.EXPONENT
    assert bit_field_of(15) == BitField.SIGN
    assert bit_field_of(3) == BitField.MANTISSA
    assert [bit_field_of(p) for p in range(NUM_BITS)].count(BitField.EXPONENT) == 5
    for p in (-1, 16, 2.0):
        with pytest.raises(CodecError):
            bit_field_of(p)


def test_21_half16_predicates():
    assert Half16(0x0000).is_zero() and Half16(0x8000).is_zero()
    assert Half16(0x0001).is_subnormal()
    assert Half16(0x3800).is_normal()
    assert Half16(0x7C00).is_inf() and not Half16(0x7C00).is_nan()
    assert Half16(0x7E00).is_nan() and not Half16(0x7E00).is_finite()
    assert (Half16(0xB555).sign, Half16(0xB555).exponent, Half16(0xB555).mantissa) == (1, 13, 0x155)
    assert str(Half16(0x3800)) == '0x3800'
    for bad in (-1, 0x10000, '0x3800'):
        with pytest.raises(CodecError):
            Half16(bad)


def test_22_bit_means():
    assert np.array_equal(bit_means(np.zeros(10, dtype=np.uint16)), np.zeros(16))
    means = bit_means(np.array([0x3800, 0x3800], dtype=np.uint16))
    assert list(np.flatnonzero(means)) == [11, 12, 13]
    assert np.all(means[[11, 12, 13]] == 1.0)
    assert np.allclose(bit_means(ALL_PATTERNS), 0.5)
    with pytest.raises(CodecError):
        flip_bits(np.zeros(3, dtype=np.int32), 0)
