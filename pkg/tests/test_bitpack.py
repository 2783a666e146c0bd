"""Pack/unpack round-trip tests and the frozen byte-layout cases.

Layout oracle: element e occupies payload bits [e*k, e*k + k), LSB first
within each byte.  The frozen byte values below were computed by hand
from that rule.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbitnet.bitpack import (
    PackedTensor,
    bitplanes_to_codes,
    pack,
    pack_sign_rows,
    payload_bytes,
    popcount_bytes,
    to_bitplanes,
    unpack,
)
from qbitnet.quantize import QuantizedTensor


def unit(codes, k, scale=1.0):
    return QuantizedTensor(np.asarray(codes, dtype=np.int32), k, "unit", scale)


class TestPayloadLayout:
    def test_eight_one_bit_codes_fill_one_byte(self):
        q = unit([1, 0, 1, 1, 0, 0, 1, 0], 1)
        p = pack(q)
        assert p.payload.size == 1
        # bit e holds code e, LSB first: 0b01001101
        assert p.payload[0] == 0b01001101

    def test_three_codes_k2(self):
        # codes {0, 3, 2}: bits 01|23|45 -> byte 0b00_10_11_00
        p = pack(unit([0, 3, 2], 2))
        assert p.payload.size == 1
        assert p.payload[0] == 0b00101100

    def test_single_code_k8(self):
        p = pack(unit([255], 8))
        np.testing.assert_array_equal(p.payload, [0xFF])

    def test_two_codes_k4(self):
        # {15, 0}: low nibble 1111, high nibble 0000 -> 0x0F
        p = pack(unit([15, 0], 4))
        np.testing.assert_array_equal(p.payload, [0x0F])

    def test_empty_tensor(self):
        p = pack(unit([], 3))
        assert p.payload.size == 0
        q = unpack(p)
        assert q.codes.size == 0

    @pytest.mark.parametrize("n,k", [(1, 1), (7, 3), (8, 1), (9, 5), (1000, 7)])
    def test_payload_size_formula(self, n, k):
        q = unit(np.zeros(n, dtype=np.int32), k)
        assert pack(q).nbytes == payload_bytes(n, k) == (n * k + 7) // 8


class TestRoundTrip:
    @given(st.integers(1, 8), st.integers(0, 1000), st.integers(0, 2**32 - 1))
    @settings(max_examples=80, deadline=None)
    def test_unit_codes(self, k, n, seed):
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, 1 << k, size=n).astype(np.int32)
        q = unit(codes, k)
        out = unpack(pack(q))
        np.testing.assert_array_equal(out.codes, codes)
        assert out.k == k and out.signedness == "unit"

    @given(st.integers(1, 8), st.integers(1, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_symmetric_codes(self, k, n, seed):
        rng = np.random.default_rng(seed)
        top = (1 << k) - 1
        codes = (2 * rng.integers(0, 1 << k, size=(2, n)) - top).astype(np.int32)
        q = QuantizedTensor(codes, k, "symmetric", np.array([0.5, 2.0]))
        out = unpack(pack(q))
        np.testing.assert_array_equal(out.codes, codes)
        np.testing.assert_array_equal(out.scales, q.scales)

    def test_binary_codes(self):
        codes = np.array([[1, -1, -1, 1, 1]], dtype=np.int32)
        q = QuantizedTensor(codes, 1, "binary", 0.75)
        out = unpack(pack(q))
        np.testing.assert_array_equal(out.codes, codes)
        assert out.signedness == "binary"

    def test_shape_preserved(self):
        codes = np.arange(24, dtype=np.int32).reshape(2, 3, 4) % 8
        out = unpack(pack(unit(codes, 3)))
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out.codes, codes)


class TestErrors:
    def test_truncated_payload(self):
        p = pack(unit(np.arange(16, dtype=np.int32) % 4, 2))
        bad = PackedTensor(p.shape, p.k, p.signedness, p.scales, p.payload[:-1])
        with pytest.raises(ValueError, match="truncated"):
            unpack(bad)

    def test_corrupt_code_range(self):
        q = unit([3], 2)
        q.codes = np.array([5], dtype=np.int32)  # bypass construction check
        with pytest.raises(ValueError, match="corrupt"):
            pack(q)


class TestBitplanes:
    def test_binary_expansion_of_five(self):
        bp = to_bitplanes(unit([5], 3))
        assert bp.planes.shape[0] == 3
        got = [int(np.unpackbits(bp.planes[t], bitorder="little")[0]) for t in range(3)]
        assert got == [1, 0, 1]

    def test_all_zero(self):
        bp = to_bitplanes(unit(np.zeros((2, 9), dtype=np.int32), 4))
        assert (bp.planes == 0).all()
        np.testing.assert_array_equal(bitplanes_to_codes(bp), np.zeros((2, 9)))

    @given(st.integers(1, 8), st.integers(1, 64), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_reconstruction(self, k, n, seed):
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, 1 << k, size=(3, n)).astype(np.int32)
        bp = to_bitplanes(unit(codes, k))
        np.testing.assert_array_equal(bitplanes_to_codes(bp), codes)

    def test_signed_codes_rejected(self):
        q = QuantizedTensor(np.array([1, -1]), 2, "symmetric", 1.0)
        with pytest.raises(ValueError, match="offset"):
            to_bitplanes(q)


class TestHelpers:
    def test_pack_sign_rows(self):
        rows = pack_sign_rows(np.array([[1, -1, 1], [-1, -1, -1]]))
        assert rows.shape == (2, 1)
        assert rows[0, 0] == 0b101 and rows[1, 0] == 0

    def test_popcount(self):
        a = np.array([[0xFF, 0x0F], [0x00, 0x01]], dtype=np.uint8)
        np.testing.assert_array_equal(popcount_bytes(a, axis=1), [12, 1])
        assert popcount_bytes(a) == 13
