"""Deployment path: fold quantizer scales into batch-norm affine
parameters, re-quantize the masters once, and run inference on packed
integer codes through the kernels module only.

The model file format (magic "QBM1") stores the topology followed by
per-layer records {k_w, k_a, scale array, packed payload}; all integers
little-endian with explicit sizes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bitpack, kernels
from .layers import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    MaxPool2D,
    QuantAct,
    ResidualBlock,
)
from .network import Network
from .quantize import (
    SIGNEDNESS_BINARY,
    SIGNEDNESS_SYMMETRIC,
    QuantizedTensor,
    quantize_activations,
)

MAGIC = b"QBM1"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Model file violates the QBM1 format."""


# A value flowing through the deployed graph is either real (k = None)
# or an integer code tensor quantized to k bits.
@dataclass
class Flow:
    value: np.ndarray
    k: int | None = None

    def as_real(self) -> np.ndarray:
        if self.k is None:
            return self.value
        return self.value.astype(np.float64) / ((1 << self.k) - 1)


class DeployOp:
    """Base for deployed graph ops; subclasses define opcode and name."""

    def forward(self, flow: Flow) -> Flow:
        raise NotImplementedError


@dataclass
class QuantLinear(DeployOp):
    """Conv or dense layer on integer weight codes with the quantizer and
    batch-norm scales folded into one affine transform per channel.

    in_ka > 0 means the input arrives as in_ka-bit codes and the integer
    kernels run; in_ka == 0 means a real-valued input (first layer) and
    the codes participate in a real GEMM instead."""

    name: str
    kind: str  # "conv" | "fc"
    weights: QuantizedTensor
    in_ka: int
    affine_a: np.ndarray
    affine_b: np.ndarray
    stride: int = 1
    pad: int = 0

    @property
    def opcode(self):
        return 1 if self.kind == "conv" else 2

    def forward(self, flow: Flow) -> Flow:
        if self.in_ka:
            if flow.k != self.in_ka:
                raise ValueError(
                    f"{self.name}: expected {self.in_ka}-bit codes, got "
                    f"{'real input' if flow.k is None else f'{flow.k}-bit codes'}")
            if self.kind == "conv":
                acc = kernels.conv2d_codes_acc(flow.value, self.weights.codes,
                                               self.weights.k, self.in_ka,
                                               self.stride, self.pad)
                y = acc * self.affine_a.reshape(1, -1, 1, 1) + \
                    self.affine_b.reshape(1, -1, 1, 1)
            else:
                x = flow.value.reshape(flow.value.shape[0], -1)
                acc = kernels.codes_gemm_acc(self.weights.codes, x.T.copy(),
                                             self.weights.k, self.in_ka)
                y = acc.T * self.affine_a + self.affine_b
            return Flow(y)
        x = flow.as_real()
        wf = self.weights.codes.astype(np.float64)
        if self.kind == "conv":
            o, _, kh, kw = self.weights.codes.shape
            cols = kernels.im2col(x, kh, kw, self.stride, self.pad)
            acc = kernels.gemm_reference(wf.reshape(o, -1), cols)
            n = x.shape[0]
            ho = kernels.conv_out_size(x.shape[2], kh, self.stride, self.pad)
            wo = kernels.conv_out_size(x.shape[3], kw, self.stride, self.pad)
            acc = acc.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
            y = acc * self.affine_a.reshape(1, -1, 1, 1) + \
                self.affine_b.reshape(1, -1, 1, 1)
        else:
            acc = kernels.gemm_reference(x.reshape(x.shape[0], -1), wf.T)
            y = acc * self.affine_a + self.affine_b
        return Flow(y)


@dataclass
class RealLinear(DeployOp):
    """Full-precision layer: real weights stored unchanged."""

    name: str
    kind: str
    w: np.ndarray
    b: np.ndarray | None = None
    stride: int = 1
    pad: int = 0

    @property
    def opcode(self):
        return 3 if self.kind == "conv" else 4

    def forward(self, flow: Flow) -> Flow:
        x = flow.as_real()
        if self.kind == "conv":
            o, _, kh, kw = self.w.shape
            cols = kernels.im2col(x, kh, kw, self.stride, self.pad)
            y = kernels.gemm_reference(self.w.reshape(o, -1), cols)
            n = x.shape[0]
            ho = kernels.conv_out_size(x.shape[2], kh, self.stride, self.pad)
            wo = kernels.conv_out_size(x.shape[3], kw, self.stride, self.pad)
            y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
            if self.b is not None:
                y = y + self.b.reshape(1, -1, 1, 1)
        else:
            y = kernels.gemm_reference(x.reshape(x.shape[0], -1), self.w.T)
            if self.b is not None:
                y = y + self.b
        return Flow(y)


@dataclass
class ActQuant(DeployOp):
    """Clamp and, when k > 0, emit k-bit activation codes."""

    name: str
    k: int  # 0 = clamp only

    opcode = 5

    def forward(self, flow: Flow) -> Flow:
        x = flow.as_real()
        if not self.k:
            return Flow(np.clip(x, 0.0, 1.0))
        return Flow(quantize_activations(x, self.k).codes, self.k)


@dataclass
class Pool(DeployOp):
    name: str
    kind: str  # "max" | "avg"
    size: int

    @property
    def opcode(self):
        return 6 if self.kind == "max" else 7

    def forward(self, flow: Flow) -> Flow:
        if self.kind == "avg":
            x = flow.as_real()
            k = None
        else:
            x, k = flow.value, flow.k  # max pooling commutes with the code map
        n, c, h, w = x.shape
        s = self.size
        win = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5) \
               .reshape(n, c, h // s, w // s, s * s)
        y = win.max(axis=-1) if self.kind == "max" else win.mean(axis=-1)
        return Flow(y, k)


@dataclass
class Affine(DeployOp):
    """Standalone per-channel affine (a batch norm that was not folded)."""

    name: str
    a: np.ndarray
    b: np.ndarray

    opcode = 8

    def forward(self, flow: Flow) -> Flow:
        x = flow.as_real()
        if x.ndim == 4:
            return Flow(x * self.a.reshape(1, -1, 1, 1) + self.b.reshape(1, -1, 1, 1))
        return Flow(x * self.a + self.b)


@dataclass
class Residual(DeployOp):
    name: str
    body: list[DeployOp]
    projection: list[DeployOp] = field(default_factory=list)

    opcode = 9

    def forward(self, flow: Flow) -> Flow:
        y = flow
        for op in self.body:
            y = op.forward(y)
        shortcut = flow
        for op in self.projection:
            shortcut = op.forward(shortcut)
        return Flow(y.as_real() + shortcut.as_real())


@dataclass
class PackedModel:
    """Deployed network: ops over packed codes, plus the input contract
    (shape and normalization constants) needed to evaluate it."""

    input_shape: tuple
    mean: tuple
    std: tuple
    ops: list[DeployOp]

    def forward(self, x) -> np.ndarray:
        flow = Flow(np.asarray(x, dtype=np.float64))
        for op in self.ops:
            flow = op.forward(flow)
        return flow.as_real()

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def accuracy(self, dataset, batch_size=256) -> float:
        if len(dataset) == 0:
            raise ValueError("cannot evaluate on an empty dataset")
        if tuple(dataset.sample_shape) != tuple(self.input_shape):
            raise ModelFormatError(
                f"dataset samples have shape {tuple(dataset.sample_shape)} but "
                f"the model expects {tuple(self.input_shape)}")
        correct = 0
        for x, y in dataset.batches(batch_size):
            correct += int((self.predict(x) == y).sum())
        return correct / len(dataset)

    def quantized_payload_bytes(self) -> int:
        """Total packed weight bytes (matches the size-report formula)."""
        def walk(ops):
            total = 0
            for op in ops:
                if isinstance(op, QuantLinear):
                    total += bitpack.payload_bytes(op.weights.size, op.weights.k)
                elif isinstance(op, Residual):
                    total += walk(op.body) + walk(op.projection)
            return total
        return walk(self.ops)

    def save(self, path):
        Path(path).write_bytes(serialize_model(self))


# -- folding ------------------------------------------------------------------

def _bn_affine(bn: BatchNorm):
    invstd = 1.0 / np.sqrt(bn.running_var + bn.eps)
    return bn.gamma.value * invstd, bn.beta.value, bn.running_mean, invstd


def _fold_layers(layers, in_ka: int):
    """Translate trained layers into deploy ops, consuming each BatchNorm
    that directly follows a quantized conv/dense layer.  in_ka tracks the
    representation flowing in (0 = real)."""
    ops = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv2D, Dense)):
            kind = "conv" if isinstance(layer, Conv2D) else "fc"
            bias = layer.b.value if layer.b is not None else None
            if layer.wspec.full_precision:
                ops.append(RealLinear(layer.name, kind, layer.w.value.copy(),
                                      None if bias is None else bias.copy(),
                                      getattr(layer, "stride", 1),
                                      getattr(layer, "pad", 0)))
                in_ka = 0
                i += 1
                continue
            q = layer.quantized_weights()
            out_ch = q.shape[0]
            f = np.asarray(q.scales, dtype=np.float64) / ((1 << q.k) - 1)
            if in_ka:
                f = f / ((1 << in_ka) - 1)
            bias_vec = np.zeros(out_ch) if bias is None else bias
            if i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm):
                g_invstd, beta, mu, _ = _bn_affine(layers[i + 1])
                a = g_invstd * f
                b = beta + g_invstd * (bias_vec - mu)
                i += 1  # batch norm consumed
            else:
                a = f
                b = bias_vec.astype(np.float64).copy()
            stride = getattr(layer, "stride", 1)
            pad = getattr(layer, "pad", 0)
            ops.append(QuantLinear(layer.name, kind, q, in_ka, a, b, stride, pad))
            in_ka = 0
        elif isinstance(layer, BatchNorm):
            g_invstd, beta, mu, _ = _bn_affine(layer)
            ops.append(Affine(layer.name, g_invstd, beta - g_invstd * mu))
            in_ka = 0
        elif isinstance(layer, QuantAct):
            k = 0 if layer.aspec.full_precision else layer.aspec.k
            ops.append(ActQuant(layer.name, k))
            in_ka = k
        elif isinstance(layer, MaxPool2D):
            ops.append(Pool(layer.name, "max", layer.size))
        elif isinstance(layer, AvgPool2D):
            ops.append(Pool(layer.name, "avg", layer.size))
            in_ka = 0
        elif isinstance(layer, ResidualBlock):
            body, _ = _fold_layers(layer.body, in_ka)
            proj, _ = _fold_layers(layer.projection, in_ka)
            ops.append(Residual(layer.name, body, proj))
            in_ka = 0
        else:
            raise ValueError(f"cannot deploy layer kind {type(layer).__name__}")
        i += 1
    return ops, in_ka


def fold_scales(net: Network, mean=None, std=None) -> PackedModel:
    """Freeze the network (batch-norm running statistics, one final weight
    re-quantization from the masters) and fold all per-channel quantizer
    scales into the succeeding batch-norm affine parameters; layers with
    no batch-norm successor keep an explicit per-channel multiplier."""
    c = net.input_shape[0] if len(net.input_shape) == 3 else 1
    ops, _ = _fold_layers(net.layers, 0)
    return PackedModel(net.input_shape,
                       tuple(mean) if mean is not None else (0.0,) * c,
                       tuple(std) if std is not None else (1.0,) * c,
                       ops)


def deploy(net: Network, mean=None, std=None) -> PackedModel:
    """Discard the full-precision masters: quantized layers keep only
    codes, scales and folded affines."""
    return fold_scales(net, mean, std)


# -- serialization ------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64_array(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u32(arr.size)
        self.parts.append(arr.tobytes())

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u16(len(raw))
        self.parts.append(raw)

    def blob(self, raw: bytes):
        self.u64(len(raw))
        self.parts.append(raw)

    def bytes_out(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise ModelFormatError(
                f"truncated model file at byte offset {self.pos} "
                f"(wanted {n} more bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64_array(self, expect=None):
        n = self.u32()
        if expect is not None and n != expect:
            raise ModelFormatError(f"array length {n}, expected {expect}")
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def text(self):
        return self.take(self.u16()).decode("utf-8")

    def blob(self):
        return self.take(self.u64())


_SIGN_CODES = {SIGNEDNESS_SYMMETRIC: 1, SIGNEDNESS_BINARY: 2}
_SIGN_NAMES = {v: k for k, v in _SIGN_CODES.items()}


def _write_quant_weights(w: _Writer, q: QuantizedTensor):
    w.u8(q.k)
    w.u8(_SIGN_CODES[q.signedness])
    w.u8(len(q.shape))
    for d in q.shape:
        w.u32(d)
    w.f64_array(np.atleast_1d(np.asarray(q.scales, dtype=np.float64)))
    w.blob(bitpack.pack(q).payload.tobytes())


def _read_quant_weights(r: _Reader) -> QuantizedTensor:
    k = r.u8()
    sign_code = r.u8()
    if sign_code not in _SIGN_NAMES:
        raise ModelFormatError(f"unknown weight signedness code {sign_code}")
    ndim = r.u8()
    shape = tuple(r.u32() for _ in range(ndim))
    scales = r.f64_array()
    payload = np.frombuffer(r.blob(), dtype=np.uint8)
    n = int(np.prod(shape)) if shape else 0
    need = bitpack.payload_bytes(n, k)
    if payload.size != need:
        raise ModelFormatError(
            f"weight payload is {payload.size} bytes, expected {need}")
    packed = bitpack.PackedTensor(shape, k, _SIGN_NAMES[sign_code],
                                  scales if scales.size > 1 else float(scales[0]),
                                  payload)
    try:
        return bitpack.unpack(packed)
    except ValueError as err:
        raise ModelFormatError(str(err))


def _write_op(w: _Writer, op: DeployOp):
    w.u8(op.opcode)
    w.text(op.name)
    if isinstance(op, QuantLinear):
        w.u8(op.in_ka)
        if op.kind == "conv":
            w.u32(op.stride)
            w.u32(op.pad)
        _write_quant_weights(w, op.weights)
        w.f64_array(op.affine_a)
        w.f64_array(op.affine_b)
    elif isinstance(op, RealLinear):
        if op.kind == "conv":
            w.u32(op.stride)
            w.u32(op.pad)
        w.u8(len(op.w.shape))
        for d in op.w.shape:
            w.u32(d)
        w.f64_array(op.w.reshape(-1))
        w.u8(1 if op.b is not None else 0)
        if op.b is not None:
            w.f64_array(op.b)
    elif isinstance(op, ActQuant):
        w.u8(op.k)
    elif isinstance(op, Pool):
        w.u32(op.size)
    elif isinstance(op, Affine):
        w.f64_array(op.a)
        w.f64_array(op.b)
    elif isinstance(op, Residual):
        w.u32(len(op.body))
        for sub in op.body:
            _write_op(w, sub)
        w.u32(len(op.projection))
        for sub in op.projection:
            _write_op(w, sub)
    else:
        raise ValueError(f"cannot serialize op {type(op).__name__}")


def _read_op(r: _Reader) -> DeployOp:
    opcode = r.u8()
    name = r.text()
    if opcode in (1, 2):
        kind = "conv" if opcode == 1 else "fc"
        in_ka = r.u8()
        stride = pad = 0
        if kind == "conv":
            stride = r.u32()
            pad = r.u32()
        weights = _read_quant_weights(r)
        a = r.f64_array()
        b = r.f64_array()
        return QuantLinear(name, kind, weights, in_ka, a, b, stride or 1, pad)
    if opcode in (3, 4):
        kind = "conv" if opcode == 3 else "fc"
        stride, pad = 1, 0
        if kind == "conv":
            stride = r.u32()
            pad = r.u32()
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        wflat = r.f64_array(expect=int(np.prod(shape)))
        has_bias = r.u8()
        b = r.f64_array() if has_bias else None
        return RealLinear(name, kind, wflat.reshape(shape), b, stride, pad)
    if opcode == 5:
        return ActQuant(name, r.u8())
    if opcode in (6, 7):
        return Pool(name, "max" if opcode == 6 else "avg", r.u32())
    if opcode == 8:
        return Affine(name, r.f64_array(), r.f64_array())
    if opcode == 9:
        body = [_read_op(r) for _ in range(r.u32())]
        proj = [_read_op(r) for _ in range(r.u32())]
        return Residual(name, body, proj)
    raise ModelFormatError(f"unknown opcode {opcode}")


def serialize_model(model: PackedModel) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u16(FORMAT_VERSION)
    w.u8(len(model.input_shape))
    for d in model.input_shape:
        w.u32(d)
    w.f64_array(np.asarray(model.mean, dtype=np.float64))
    w.f64_array(np.asarray(model.std, dtype=np.float64))
    w.u32(len(model.ops))
    for op in model.ops:
        _write_op(w, op)
    return w.bytes_out()


def deserialize_model(raw: bytes) -> PackedModel:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise ModelFormatError(
            f"bad magic {raw[:4]!r}; not a {MAGIC.decode()} model file")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    ndim = r.u8()
    input_shape = tuple(r.u32() for _ in range(ndim))
    mean = tuple(r.f64_array())
    std = tuple(r.f64_array())
    n_ops = r.u32()
    ops = [_read_op(r) for _ in range(n_ops)]
    if r.pos != len(raw):
        raise ModelFormatError(
            f"{len(raw) - r.pos} trailing bytes after the last record")
    return PackedModel(input_shape, mean, std, ops)


def load_model(path) -> PackedModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise ModelFormatError(f"cannot read model {path}: {err}")
    return deserialize_model(raw)
