"""Bit-packed storage of integer codes.

The packed payload is a byte stream: element e occupies bits
[e*k, e*k + k) counting from bit 0 of byte 0, least-significant-bit
first within each byte.  This layout is endianness independent and is
the normative on-disk format for model files.  Signed code sets are
stored as unsigned offset codes and recovered on unpack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import SIGNEDNESS_BINARY, SIGNEDNESS_UNIT, QuantizedTensor


def payload_bytes(n_elements: int, k: int) -> int:
    """ceil(n * k / 8): exact byte cost of packing n k-bit codes."""
    return (n_elements * k + 7) // 8


@dataclass
class PackedTensor:
    """Bit-packed integer codes plus the metadata to reverse the packing."""

    shape: tuple
    k: int
    signedness: str
    scales: np.ndarray | float
    payload: np.ndarray  # uint8, length payload_bytes(n, k)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.payload = np.asarray(self.payload, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.float64)

    @property
    def n_elements(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return int(self.payload.size)


@dataclass
class BitplaneTensor:
    """k one-bit planes of an unsigned code tensor.

    Plane t holds bit 2^t of every code, packed LSB-first along the last
    axis so bit-serial kernels can consume the planes directly.
    """

    shape: tuple
    k: int
    scales: np.ndarray | float
    planes: np.ndarray  # uint8 [k, rows, ceil(last_dim / 8)]

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.planes = np.asarray(self.planes, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.float64)


def _to_offset_codes(q: QuantizedTensor) -> np.ndarray:
    """Map any signedness onto unsigned offset codes in 0 .. 2^k - 1."""
    top = (1 << q.k) - 1
    if q.signedness == SIGNEDNESS_UNIT:
        c = q.codes
    elif q.signedness == SIGNEDNESS_BINARY:
        c = (q.codes + 1) // 2
    else:
        if q.codes.size and ((q.codes + top) % 2 != 0).any():
            raise ValueError("corrupt symmetric codes: parity violation")
        c = (q.codes + top) // 2
    if c.size and (c.min() < 0 or c.max() > top):
        raise ValueError(f"corrupt codes: value outside 0..{top} after offset mapping")
    return c.astype(np.int64)


def _from_offset_codes(c: np.ndarray, k: int, signedness: str) -> np.ndarray:
    top = (1 << k) - 1
    if signedness == SIGNEDNESS_UNIT:
        return c.astype(np.int32)
    if signedness == SIGNEDNESS_BINARY:
        return (2 * c - 1).astype(np.int32)
    return (2 * c - top).astype(np.int32)


def pack(q: QuantizedTensor) -> PackedTensor:
    """Pack a quantized tensor losslessly into ceil(n*k/8) bytes."""
    c = _to_offset_codes(q).reshape(-1)
    n = c.size
    if n == 0:
        payload = np.zeros(0, dtype=np.uint8)
    else:
        bits = ((c[:, None] >> np.arange(q.k)) & 1).astype(np.uint8)
        payload = np.packbits(bits.reshape(-1), bitorder="little")
    assert payload.size == payload_bytes(n, q.k)
    return PackedTensor(q.shape, q.k, q.signedness, q.scales, payload)


def unpack(p: PackedTensor) -> QuantizedTensor:
    """Exact inverse of pack.  Raises ValueError on a truncated payload."""
    n = p.n_elements
    need = payload_bytes(n, p.k)
    if p.payload.size < need:
        raise ValueError(
            f"truncated payload: {p.payload.size} bytes, need {need} for "
            f"{n} codes at {p.k} bits"
        )
    if n == 0:
        codes = np.zeros(p.shape, dtype=np.int32)
        return QuantizedTensor(codes, p.k, p.signedness, p.scales)
    bits = np.unpackbits(p.payload[:need], count=n * p.k, bitorder="little")
    c = (bits.reshape(n, p.k).astype(np.int64) << np.arange(p.k)).sum(axis=1)
    codes = _from_offset_codes(c, p.k, p.signedness).reshape(p.shape)
    return QuantizedTensor(codes, p.k, p.signedness, p.scales)


def to_bitplanes(q: QuantizedTensor) -> BitplaneTensor:
    """Decompose unsigned unit codes into k packed one-bit planes."""
    if q.signedness != SIGNEDNESS_UNIT:
        raise ValueError(
            "bitplanes require unsigned unit codes; convert signed codes to offset form first"
        )
    last = q.shape[-1] if q.codes.ndim else 1
    codes = q.codes.reshape(-1, last)
    planes = []
    for t in range(q.k):
        bits = ((codes >> t) & 1).astype(np.uint8)
        planes.append(np.packbits(bits, axis=-1, bitorder="little"))
    return BitplaneTensor(q.shape, q.k, q.scales, np.stack(planes, axis=0))


def bitplanes_to_codes(bp: BitplaneTensor) -> np.ndarray:
    """Reconstruct the code tensor: sum_t 2^t * plane_t."""
    last = bp.shape[-1] if bp.shape else 1
    acc = None
    for t in range(bp.k):
        bits = np.unpackbits(bp.planes[t], axis=-1, count=last, bitorder="little")
        term = bits.astype(np.int32) << t
        acc = term if acc is None else acc + term
    return acc.reshape(bp.shape)


def pack_sign_rows(codes: np.ndarray) -> np.ndarray:
    """Pack a 2-D +-1 code matrix row-wise: bit 1 <-> +1, bit 0 <-> -1.

    Each row is padded independently to a whole byte (pad bits are zero),
    giving a uint8 matrix [rows, ceil(n/8)] ready for XNOR kernels.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("expected a 2-D code matrix")
    bits = (codes > 0).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def popcount_bytes(a: np.ndarray, axis=None) -> np.ndarray:
    """Population count over a uint8 array, summed along axis."""
    return np.bitwise_count(a).sum(axis=axis, dtype=np.int64)
