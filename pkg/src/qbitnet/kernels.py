"""Multiply-accumulate engines.

A family of GEMM kernels that are provably equivalent: a real reference,
an integer-code GEMM, an XNOR-popcount GEMM for 1-bit operands, and a
bit-serial GEMM for 1-bit weights against k-bit activations, plus an
im2col convolution lowered onto them.  Integer accumulation is exact;
the only real arithmetic is one scale multiply per output.
"""

from __future__ import annotations

import numpy as np

from .bitpack import (
    BitplaneTensor,
    PackedTensor,
    pack_sign_rows,
    popcount_bytes,
    payload_bytes,
)
from .quantize import (
    SIGNEDNESS_BINARY,
    SIGNEDNESS_SYMMETRIC,
    SIGNEDNESS_UNIT,
    QuantizedTensor,
)

# Keep broadcast XNOR intermediates below ~64 MB.
_XNOR_CHUNK_BYTES = 1 << 26

_INT32_MAX = (1 << 31) - 1


def acc_dtype(n: int, k_w: int, k_a: int):
    """Accumulator dtype for code GEMM: int32 unless the worst-case
    accumulation n * (2^k_w - 1) * (2^k_a - 1) could overflow."""
    bound = n * ((1 << k_w) - 1) * ((1 << k_a) - 1)
    return np.int32 if bound <= _INT32_MAX else np.int64


def gemm_reference(a, b) -> np.ndarray:
    """Real matrix product in float64; the oracle all quantized kernels
    are checked against."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("gemm_reference expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _weight_row_factors(wq: QuantizedTensor) -> np.ndarray:
    """Per-output-row scale factor scale_i / (2^k - 1), shape [m, 1]."""
    m = wq.shape[0]
    denom = float((1 << wq.k) - 1)
    scales = np.asarray(wq.scales, dtype=np.float64)
    if scales.ndim == 0:
        scales = np.full(m, float(scales))
    return (scales / denom).reshape(m, 1)


def _unit_scale_factor(q) -> float:
    scales = np.asarray(q.scales, dtype=np.float64)
    if scales.ndim != 0:
        raise ValueError("unit-code operand must carry a scalar scale")
    return float(scales) / float((1 << q.k) - 1)


def codes_gemm_acc(w_codes: np.ndarray, a_codes: np.ndarray, k_w: int, k_a: int) -> np.ndarray:
    """Integer accumulation of weight codes [m, n] against activation
    codes [n, p]; no real arithmetic."""
    if w_codes.ndim != 2 or a_codes.ndim != 2:
        raise ValueError("code GEMM expects 2-D operands")
    if w_codes.shape[1] != a_codes.shape[0]:
        raise ValueError(f"inner dimensions disagree: {w_codes.shape} x {a_codes.shape}")
    dt = acc_dtype(w_codes.shape[1], k_w, k_a)
    return w_codes.astype(dt) @ a_codes.astype(dt)


def gemm_int_codes(wq: QuantizedTensor, aq: QuantizedTensor) -> np.ndarray:
    """Integer-code GEMM: Wq [m, n] (symmetric or binary codes) times
    Aq [n, p] (unit codes), one real scale multiply per output row."""
    if wq.signedness not in (SIGNEDNESS_SYMMETRIC, SIGNEDNESS_BINARY):
        raise ValueError("weight operand must carry symmetric or binary codes")
    if aq.signedness != SIGNEDNESS_UNIT:
        raise ValueError("activation operand must carry unit codes")
    acc = codes_gemm_acc(wq.codes, aq.codes, wq.k, aq.k)
    return acc * (_weight_row_factors(wq) * _unit_scale_factor(aq))


def _packed_rows(p: PackedTensor) -> np.ndarray:
    """Row-aligned bit matrix [rows, ceil(n/8)] from a packed 2-D tensor.

    The flat payload packs all elements contiguously; rows are re-aligned
    to byte boundaries here so bitwise kernels can work row-wise.
    """
    if len(p.shape) != 2:
        raise ValueError("packed GEMM operands must be 2-D")
    rows, n = p.shape
    need = payload_bytes(rows * n, p.k)
    if p.payload.size < need:
        raise ValueError("truncated payload")
    if n % 8 == 0:
        return p.payload[:need].reshape(rows, n // 8)
    bits = np.unpackbits(p.payload[:need], count=rows * n, bitorder="little")
    return np.packbits(bits.reshape(rows, n), axis=1, bitorder="little")


def _row_scales(p, rows: int) -> np.ndarray:
    scales = np.asarray(p.scales, dtype=np.float64)
    if scales.ndim == 0:
        return np.full(rows, float(scales))
    if len(scales) != rows:
        raise ValueError("per-row scales length mismatch")
    return scales


def xnor_popcount_acc(w_bits: np.ndarray, a_bits: np.ndarray, n: int) -> np.ndarray:
    """Signed dot products of packed +-1 rows: 2*popcount(XNOR) - n.

    Padding bits beyond n in the final byte of each row are masked out,
    so garbage there never affects the result.
    """
    nbytes = w_bits.shape[1]
    mask = np.full(nbytes, 0xFF, dtype=np.uint8)
    rem = n % 8
    if rem:
        mask[-1] = (1 << rem) - 1
    m, p = w_bits.shape[0], a_bits.shape[0]
    out = np.empty((m, p), dtype=np.int64)
    chunk = max(1, _XNOR_CHUNK_BYTES // max(1, m * nbytes))
    for j0 in range(0, p, chunk):
        j1 = min(p, j0 + chunk)
        xnor = (~(w_bits[:, None, :] ^ a_bits[None, j0:j1, :])) & mask
        out[:, j0:j1] = 2 * popcount_bytes(xnor, axis=2) - n
    return out


def gemm_xnor(wb: PackedTensor, ab: PackedTensor) -> np.ndarray:
    """XNOR-popcount GEMM over packed 1-bit operands.

    wb has shape [m, n] and ab [p, n]; both pack the reduction axis with
    bit 1 <-> +1.  Result [m, p] is the +-1 dot product scaled by
    alpha_w[i] * alpha_a[j].
    """
    if wb.k != 1 or ab.k != 1:
        raise ValueError("gemm_xnor requires 1-bit operands")
    if len(wb.shape) != 2 or len(ab.shape) != 2 or wb.shape[1] != ab.shape[1]:
        raise ValueError(f"incompatible packed shapes {wb.shape} x {ab.shape}")
    n = wb.shape[1]
    acc = xnor_popcount_acc(_packed_rows(wb), _packed_rows(ab), n)
    s_w = _row_scales(wb, wb.shape[0])
    s_a = _row_scales(ab, ab.shape[0])
    return acc * (s_w[:, None] * s_a[None, :])


def bitserial_acc(w_bits: np.ndarray, planes: np.ndarray, n: int, k_a: int) -> np.ndarray:
    """Integer accumulation of +-1 weight rows against bit planes of
    unsigned activation codes.

    For one plane with bits b: sum_i s_i * b_i = 2*popcount(w & b) -
    popcount(b); planes are combined with weights 2^t.  Zero padding in
    the planes is neutral for AND so no masking is needed.
    """
    m = w_bits.shape[0]
    p = planes.shape[1]
    acc = np.zeros((m, p), dtype=np.int64)
    chunk = max(1, _XNOR_CHUNK_BYTES // max(1, m * w_bits.shape[1]))
    for t in range(k_a):
        plane = planes[t]
        plane_pc = popcount_bytes(plane, axis=1)
        for j0 in range(0, p, chunk):
            j1 = min(p, j0 + chunk)
            both = popcount_bytes(w_bits[:, None, :] & plane[None, j0:j1, :], axis=2)
            acc[:, j0:j1] += (2 * both - plane_pc[None, j0:j1]) << t
    return acc


def gemm_bitserial(wb: PackedTensor, ap: BitplaneTensor) -> np.ndarray:
    """Bit-serial GEMM: packed 1-bit weights [m, n] against bit planes of
    k_a-bit unit activation codes [p, n]; exactly equals gemm_int_codes
    on the same operands."""
    if wb.k != 1:
        raise ValueError("gemm_bitserial requires 1-bit weights")
    if len(wb.shape) != 2 or len(ap.shape) != 2 or wb.shape[1] != ap.shape[1]:
        raise ValueError(f"incompatible shapes {wb.shape} x {ap.shape}")
    if ap.planes.shape[0] != ap.k:
        raise ValueError(f"plane count {ap.planes.shape[0]} does not match k_a={ap.k}")
    n = wb.shape[1]
    acc = bitserial_acc(_packed_rows(wb), ap.planes, n, ap.k)
    s_w = _row_scales(wb, wb.shape[0])
    a_factor = _unit_scale_factor(ap)
    return acc * (s_w[:, None] * a_factor)


def conv_out_size(size: int, ksize: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - ksize) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unroll NCHW input windows into a [C*kh*kw, N*Ho*Wo] matrix.

    Row index runs over (c, i, j) and column index over (n, ho, wo),
    matching weights flattened as [O, C*kh*kw].
    """
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"invalid geometry: input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {stride}, pad {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Scatter-add inverse of im2col (used by convolution backward)."""
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    grid = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                grid[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return out[:, :, pad:h + pad, pad:w + pad]
    return out


def conv2d_codes_acc(inp_codes: np.ndarray, w_codes: np.ndarray, k_w: int, k_a: int,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Integer convolution accumulator: NCHW codes against OIHW codes,
    im2col lowering, output [N, O, Ho, Wo] with no real arithmetic.

    Routes through the bit-serial kernel for 1-bit weights and the plain
    integer-code GEMM otherwise; both are exact so the route never
    changes the result.
    """
    if inp_codes.ndim != 4 or w_codes.ndim != 4:
        raise ValueError("convolution expects NCHW input and OIHW weights")
    n, c, h, w = inp_codes.shape
    o, ci, kh, kw = w_codes.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input {c}, weights expect {ci}")
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = im2col(inp_codes, kh, kw, stride, pad)
    wflat = w_codes.reshape(o, c * kh * kw)
    if k_w == 1:
        w_bits = pack_sign_rows(wflat)
        planes = np.stack(
            [np.packbits(((cols.T >> t) & 1).astype(np.uint8), axis=1, bitorder="little")
             for t in range(k_a)], axis=0)
        acc = bitserial_acc(w_bits, planes, cols.shape[0], k_a)
    else:
        acc = codes_gemm_acc(wflat, cols, k_w, k_a)
    return acc.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)


def conv2d_quantized(inp: QuantizedTensor, weights: QuantizedTensor,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Quantized convolution: unit-code NCHW input, symmetric/binary OIHW
    weights; integer accumulation then one real scale per output channel."""
    if inp.signedness != SIGNEDNESS_UNIT:
        raise ValueError("convolution input must carry unit codes")
    if weights.signedness not in (SIGNEDNESS_SYMMETRIC, SIGNEDNESS_BINARY):
        raise ValueError("convolution weights must carry symmetric or binary codes")
    acc = conv2d_codes_acc(inp.codes, weights.codes, weights.k, inp.k, stride, pad)
    w_factor = _weight_row_factors(weights).reshape(1, -1, 1, 1)
    return acc * (w_factor * _unit_scale_factor(inp))
