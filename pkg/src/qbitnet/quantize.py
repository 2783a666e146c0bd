"""Low-bit quantization primitives.

Forward quantizers (binarizer, linear k-bit quantizer, weight and activation
pipelines) plus the straight-through gradient surrogates used to train
through them.  All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

FULL_PRECISION = 32

# Channels whose post-tanh max magnitude falls below this are treated as
# all-zero and quantized with a zero scale.
DEGENERATE_CHANNEL_EPS = 1e-12

ROUNDING_POLICY = "half-away-from-zero"

SIGNEDNESS_UNIT = "unit"            # codes 0 .. 2^k - 1
SIGNEDNESS_SYMMETRIC = "symmetric"  # odd codes -(2^k - 1) .. 2^k - 1, step 2
SIGNEDNESS_BINARY = "binary"        # codes in {-1, +1}


@dataclass(frozen=True)
class QuantSpec:
    """Bitwidth, role and rounding policy for one tensor.

    k is 1..8 bits, or 32 for full precision (quantization bypassed).
    """

    k: int
    role: str  # "weight" or "activation"
    rounding: str = ROUNDING_POLICY

    def __post_init__(self):
        if self.k != FULL_PRECISION and not 1 <= self.k <= 8:
            raise ValueError(f"bitwidth must be in 1..8 or 32, got {self.k}")
        if self.role not in ("weight", "activation"):
            raise ValueError(f"role must be 'weight' or 'activation', got {self.role!r}")
        if self.rounding != ROUNDING_POLICY:
            raise ValueError(f"unsupported rounding policy {self.rounding!r}")
        if self.role == "activation" and self.k == 1:
            warnings.warn(
                "1-bit activations are representable but atypical; "
                "mixed-precision runs use k_a >= 2",
                stacklevel=2,
            )

    @property
    def full_precision(self) -> bool:
        return self.k == FULL_PRECISION


@dataclass
class QuantizedTensor:
    """Integer-coded tensor with scale(s) attached.

    Reconstruction rule, uniform across signedness kinds:

        real value = scale * code / (2^k - 1)

    with per-channel scales broadcast along axis 0.  Unit codes live in
    0..2^k-1 (activations), symmetric codes are the odd integers in
    [-(2^k-1), 2^k-1] (weights), binary codes are +-1 with k = 1.
    """

    codes: np.ndarray
    k: int
    signedness: str
    scales: np.ndarray | float

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if not np.issubdtype(self.codes.dtype, np.integer):
            raise ValueError("codes must be integers")
        self.codes = self.codes.astype(np.int32, copy=False)
        if self.signedness not in (SIGNEDNESS_UNIT, SIGNEDNESS_SYMMETRIC, SIGNEDNESS_BINARY):
            raise ValueError(f"unknown signedness {self.signedness!r}")
        if self.signedness == SIGNEDNESS_BINARY and self.k != 1:
            raise ValueError("binary signedness requires k = 1")
        if not 1 <= self.k <= 8:
            raise ValueError(f"bitwidth must be in 1..8, got {self.k}")
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.scales.ndim > 1:
            raise ValueError("scales must be a scalar or a 1-D per-channel array")
        if self.scales.ndim == 1 and self.codes.ndim >= 1 and len(self.scales) != self.codes.shape[0]:
            raise ValueError(
                f"per-channel scales length {len(self.scales)} does not match "
                f"channel axis {self.codes.shape[0] if self.codes.ndim else 0}"
            )
        self.validate_codes()

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    def validate_codes(self):
        if self.codes.size == 0:
            return
        top = (1 << self.k) - 1
        if self.signedness == SIGNEDNESS_UNIT:
            if self.codes.min() < 0 or self.codes.max() > top:
                raise ValueError(f"unit codes out of range 0..{top}")
        elif self.signedness == SIGNEDNESS_BINARY:
            if not np.isin(self.codes, (-1, 1)).all():
                raise ValueError("binary codes must be +-1")
        else:
            if np.abs(self.codes).max() > top or ((self.codes + top) % 2 != 0).any():
                raise ValueError(f"symmetric codes must be odd integers in [-{top}, {top}]")

    def _scale_factors(self) -> np.ndarray:
        denom = float((1 << self.k) - 1)
        if self.scales.ndim == 0:
            return self.scales / denom
        bshape = (len(self.scales),) + (1,) * (self.codes.ndim - 1)
        return (self.scales / denom).reshape(bshape)

    def reconstruct(self) -> np.ndarray:
        """Map codes back to real values on the quantization grid."""
        return self.codes * self._scale_factors()


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties going away from zero (deterministic,
    platform independent; numpy's np.round rounds ties to even instead)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _as_real(x, name: str, allow_empty: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def _check_bits(k: int):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= 8:
        raise ValueError(f"bitwidth must be an integer in 1..8, got {k!r}")


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def binarize(x) -> QuantizedTensor:
    """1-bit quantization to +-1 with an L1-mean scaling factor.

    The scale is alpha = sum(|x_i|) / n so that the reconstruction
    alpha * sign(x) preserves the L1 norm.  sign(0) is taken as +1.
    """
    x = _as_real(x, "x")
    alpha = float(np.mean(np.abs(x)))
    codes = np.where(x >= 0, 1, -1).astype(np.int32)
    return QuantizedTensor(codes, 1, SIGNEDNESS_BINARY, alpha)


def binarize_channels(w) -> QuantizedTensor:
    """Binarize each output channel (axis 0) independently.

    Equivalent to applying binarize per channel: alpha_i is the L1 mean of
    channel i, codes are the signs with sign(0) = +1.
    """
    w = _as_real(w, "w")
    if w.ndim < 1 or w.shape[0] < 1:
        raise ValueError("w must have at least one channel along axis 0")
    flat = w.reshape(w.shape[0], -1)
    alphas = np.mean(np.abs(flat), axis=1)
    codes = np.where(w >= 0, 1, -1).astype(np.int32)
    return QuantizedTensor(codes, 1, SIGNEDNESS_BINARY, alphas)


def binarize_ste_grad(x, upstream) -> np.ndarray:
    """Straight-through gradient of the binarizer: pass where |x| < 1.

    The inequality is strict, so |x| = 1 blocks the gradient; the scale
    factor is treated as a detached constant.
    """
    x = _as_real(x, "x")
    upstream = _as_real(upstream, "upstream")
    _check_shapes(x, upstream)
    return upstream * (np.abs(x) < 1.0)


def quantize_unit(x, k: int) -> QuantizedTensor:
    """Linear quantizer on [0, 1]: codes = round((2^k - 1) * x).

    Values outside [0, 1] are a contract violation; callers clamp first.
    """
    _check_bits(k)
    x = _as_real(x, "x", allow_empty=True)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("quantize_unit input outside [0, 1]; clamp before quantizing")
    levels = (1 << k) - 1
    codes = round_half_away(levels * x).astype(np.int32)
    return QuantizedTensor(codes, k, SIGNEDNESS_UNIT, 1.0)


def quantize_unit_ste_grad(upstream) -> np.ndarray:
    """Unity straight-through gradient of the linear quantizer."""
    return upstream


def quantize_weights(w, k: int) -> QuantizedTensor:
    """Quantize a weight tensor channel-wise (output channels on axis 0).

    Pipeline: wh = tanh(w); M_i = max_j |wh_ij|; each channel is mapped
    affinely onto [0, 1], quantized with the linear k-bit quantizer, and
    stored as symmetric odd codes s = 2c - (2^k - 1) with per-channel
    scale M_i, so the reconstruction M_i * s / (2^k - 1) lies in
    [-M_i, M_i] and approximates tanh(w).

    Channels with M_i below DEGENERATE_CHANNEL_EPS get scale 0 (their
    reconstruction is exactly zero); a warning is emitted since this only
    occurs transiently during training.
    """
    _check_bits(k)
    w = _as_real(w, "w")
    if w.ndim < 1 or w.shape[0] < 1:
        raise ValueError("w must have at least one channel along axis 0")
    wh = np.tanh(w)
    flat = wh.reshape(w.shape[0], -1)
    M = np.max(np.abs(flat), axis=1)
    degenerate = M < DEGENERATE_CHANNEL_EPS
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} weight channel(s) are numerically zero; "
            "mapping them to zero reconstruction",
            stacklevel=2,
        )
    safe = np.where(degenerate, 1.0, M)
    bshape = (w.shape[0],) + (1,) * (w.ndim - 1)
    normalized = wh / (2.0 * safe.reshape(bshape)) + 0.5
    levels = (1 << k) - 1
    c = round_half_away(levels * normalized)
    codes = (2 * c - levels).astype(np.int32)
    scales = np.where(degenerate, 0.0, M)
    return QuantizedTensor(codes, k, SIGNEDNESS_SYMMETRIC, scales)


def quantize_weights_ste_grad(w, upstream) -> np.ndarray:
    """Straight-through gradient of the weight pipeline.

    With the channel max and the rounding treated as detached, the pipeline
    reduces to tanh, so the surrogate derivative is 1 - tanh(w)^2.
    """
    w = _as_real(w, "w")
    upstream = _as_real(upstream, "upstream")
    _check_shapes(w, upstream)
    t = np.tanh(w)
    return upstream * (1.0 - t * t)


def quantize_activations(s, k: int) -> QuantizedTensor:
    """Clamp to [0, 1] then apply the linear k-bit quantizer."""
    _check_bits(k)
    s = _as_real(s, "s", allow_empty=True)
    return quantize_unit(np.clip(s, 0.0, 1.0), k)


def clamp_ste_grad(s, upstream) -> np.ndarray:
    """Gradient of the clamp-then-quantize activation path.

    The quantizer contributes a unity STE factor, leaving the clamp
    derivative on the closed interval [0, 1] (endpoints pass gradient
    so boundary activations stay trainable).
    """
    s = _as_real(s, "s")
    upstream = _as_real(upstream, "upstream")
    _check_shapes(s, upstream)
    return upstream * ((s >= 0.0) & (s <= 1.0))
