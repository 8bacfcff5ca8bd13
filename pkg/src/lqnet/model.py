"""Network description, bit-packed parameter storage and model containers.

A model is a linear chain of Conv2D / FullyConnected / MaxPool2D layers.
Quantized weights are stored two 4-bit codes per byte (low nibble first;
within a nibble bit 3 is the sign, 1 meaning negative, bits 2..0 the
exponent magnitude).  Biases are 16-bit fixed codes.  Each parameterized
layer carries one or two signed shift exponents that realize its
power-of-two output scaling.

On-disk containers (all little-endian):

* LQM ("LQM1"): u32 version, u32 layer count, u32 x3 input shape; then per
  layer u8 kind, u8 activation, u8 scale_mode, i8 shift1, i8 shift2,
  u32 dim count + u32 dims, u32 stride, u32 padding, u64 packed-weight
  byte length + bytes, u64 bias count + i16 bias codes.
* FPM ("FPM1"): identical layout with f32 weight and bias value arrays
  (u64 count + f32 values) in place of the packed codes.

Models are immutable after construction and validated for inter-layer
shape consistency up front.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import (
    BadMagicError,
    ContractError,
    FormatError,
    TruncatedError,
    VersionError,
)

LQM_MAGIC = b"LQM1"
FPM_MAGIC = b"FPM1"
FORMAT_VERSION = 1
MAX_SHIFT = 31


class LayerKind(IntEnum):
    CONV2D = 0
    FULLY_CONNECTED = 1
    MAXPOOL2D = 2


class Activation(IntEnum):
    IDENTITY = 0
    RELU = 1


class ScaleMode(IntEnum):
    SINGLE_STEP = 0
    TWO_STEP = 1


def check_shape(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise ContractError(f"shape dims must all be >= 1, got {dims}")
    return dims


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``shape`` holds the parameter/window shape per kind: Conv2D
    (out_c, in_c, kh, kw), FullyConnected (out, in), MaxPool2D (kh, kw).
    """

    kind: LayerKind
    shape: tuple
    stride: int = 1
    padding: int = 0
    activation: Activation = Activation.RELU
    scale_mode: ScaleMode = ScaleMode.SINGLE_STEP

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", check_shape(self.shape))
        expected = {LayerKind.CONV2D: 4, LayerKind.FULLY_CONNECTED: 2,
                    LayerKind.MAXPOOL2D: 2}[self.kind]
        if len(self.shape) != expected:
            raise ContractError(
                f"{self.kind.name} expects {expected} shape dims, "
                f"got {self.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be >= 1 and padding >= 0")

    @property
    def weight_count(self) -> int:
        if self.kind == LayerKind.MAXPOOL2D:
            return 0
        return int(np.prod(self.shape))

    @property
    def bias_count(self) -> int:
        if self.kind == LayerKind.MAXPOOL2D:
            return 0
        return self.shape[0]

    def output_shape(self, in_shape: tuple) -> tuple:
        """Output tensor shape (c, h, w) or (n,) for a given input shape."""
        if self.kind == LayerKind.FULLY_CONNECTED:
            if int(np.prod(in_shape)) != self.shape[1]:
                raise ContractError(
                    f"FC expects {self.shape[1]} inputs, got shape {in_shape}"
                )
            return (self.shape[0],)
        if len(in_shape) != 3:
            raise ContractError(
                f"{self.kind.name} needs a (c, h, w) input, got {in_shape}"
            )
        c, h, w = in_shape
        if self.kind == LayerKind.CONV2D:
            out_c, in_c, kh, kw = self.shape
            if in_c != c:
                raise ContractError(
                    f"conv expects {in_c} input channels, got {c}"
                )
        else:
            out_c = c
            kh, kw = self.shape
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ContractError(
                f"window {kh}x{kw} stride {self.stride} pad {self.padding} "
                f"does not fit input {in_shape}"
            )
        return (out_c, oh, ow)


def pack_weights(signs: np.ndarray, expmags: np.ndarray) -> bytes:
    """Pack sign/exponent code arrays two to a byte, low nibble first.

    An odd trailing code leaves the final high nibble zero.
    """
    signs = np.asarray(signs)
    expmags = np.asarray(expmags)
    if signs.shape != expmags.shape:
        raise FormatError("sign and exponent arrays must have equal length")
    nibbles = np.where(signs < 0, 8, 0).astype(np.uint8) | expmags.astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    pairs = nibbles.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()


def unpack_weights(data: bytes, count: int):
    """Inverse of pack_weights: returns (signs, expmags) int8 arrays."""
    if len(data) != (count + 1) // 2:
        raise FormatError(
            f"packed length {len(data)} does not match {count} codes"
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(raw.size * 2, dtype=np.uint8)
    nibbles[0::2] = raw & 0x0F
    nibbles[1::2] = raw >> 4
    nibbles = nibbles[:count]
    signs = np.where(nibbles & 8, -1, 1).astype(np.int8)
    expmags = (nibbles & 7).astype(np.int8)
    return signs, expmags


@dataclass(frozen=True)
class QuantizedLayer:
    spec: LayerSpec
    packed_weights: bytes = b""
    biases: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int16))
    shift1: int = 0
    shift2: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "biases", np.asarray(self.biases, dtype=np.int16)
        )
        n = self.spec.weight_count
        if len(self.packed_weights) != (n + 1) // 2:
            raise ContractError(
                f"{self.spec.kind.name} expects {(n + 1) // 2} packed bytes, "
                f"got {len(self.packed_weights)}"
            )
        if self.biases.size != self.spec.bias_count:
            raise ContractError(
                f"{self.spec.kind.name} expects {self.spec.bias_count} "
                f"biases, got {self.biases.size}"
            )
        for s in (self.shift1, self.shift2):
            if abs(s) > MAX_SHIFT:
                raise ContractError(f"shift exponent {s} out of range")

    def weight_codes(self):
        return unpack_weights(self.packed_weights, self.spec.weight_count)


@dataclass(frozen=True)
class FloatLayer:
    spec: LayerSpec
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    biases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "weights", np.asarray(self.weights, dtype=np.float64)
        )
        object.__setattr__(
            self, "biases", np.asarray(self.biases, dtype=np.float64)
        )
        if self.weights.size != self.spec.weight_count:
            raise ContractError(
                f"{self.spec.kind.name} expects {self.spec.weight_count} "
                f"weights, got {self.weights.size}"
            )
        if self.biases.size != self.spec.bias_count:
            raise ContractError(
                f"{self.spec.kind.name} expects {self.spec.bias_count} "
                f"biases, got {self.biases.size}"
            )


def _chain_shapes(input_shape: tuple, layers) -> tuple:
    shape = check_shape(input_shape)
    if len(shape) != 3:
        raise ContractError(f"model input shape must be (c, h, w), got {shape}")
    cur = shape
    for i, layer in enumerate(layers):
        try:
            cur = layer.spec.output_shape(cur)
        except ContractError as exc:
            raise ContractError(f"layer {i}: {exc}") from exc
    return shape


@dataclass(frozen=True)
class QuantizedModel:
    input_shape: tuple
    layers: tuple
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "input_shape", _chain_shapes(self.input_shape, self.layers)
        )

    def output_shape(self) -> tuple:
        cur = self.input_shape
        for layer in self.layers:
            cur = layer.spec.output_shape(cur)
        return cur


@dataclass(frozen=True)
class FloatModel:
    input_shape: tuple
    layers: tuple
    norm_factors: object = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "input_shape", _chain_shapes(self.input_shape, self.layers)
        )

    def output_shape(self) -> tuple:
        cur = self.input_shape
        for layer in self.layers:
            cur = layer.spec.output_shape(cur)
        return cur


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"need {n} bytes at offset {self.pos}, have "
                f"{len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _pack_spec_header(spec: LayerSpec, shift1: int, shift2: int) -> bytes:
    parts = [struct.pack(
        "<BBBbb", spec.kind, spec.activation, spec.scale_mode, shift1, shift2
    )]
    parts.append(struct.pack("<I", len(spec.shape)))
    parts.append(struct.pack(f"<{len(spec.shape)}I", *spec.shape))
    parts.append(struct.pack("<II", spec.stride, spec.padding))
    return b"".join(parts)


def _read_spec_header(r: _Reader):
    kind, act, mode, shift1, shift2 = r.unpack("BBBbb")
    try:
        kind = LayerKind(kind)
        act = Activation(act)
        mode = ScaleMode(mode)
    except ValueError as exc:
        raise FormatError(f"unknown layer field: {exc}") from exc
    (ndim,) = r.unpack("I")
    if ndim > 8:
        raise FormatError(f"implausible dim count {ndim}")
    dims = r.unpack(f"{ndim}I")
    stride, padding = r.unpack("II")
    try:
        spec = LayerSpec(kind, dims, stride, padding, act, mode)
    except ContractError as exc:
        raise FormatError(str(exc)) from exc
    return spec, shift1, shift2


def serialize(m: QuantizedModel) -> bytes:
    parts = [LQM_MAGIC, struct.pack("<II", FORMAT_VERSION, len(m.layers))]
    parts.append(struct.pack("<3I", *m.input_shape))
    for layer in m.layers:
        parts.append(_pack_spec_header(layer.spec, layer.shift1, layer.shift2))
        parts.append(struct.pack("<Q", len(layer.packed_weights)))
        parts.append(layer.packed_weights)
        parts.append(struct.pack("<Q", layer.biases.size))
        parts.append(layer.biases.astype("<i2").tobytes())
    return b"".join(parts)


def deserialize(data: bytes) -> QuantizedModel:
    r = _Reader(data)
    if r.take(4) != LQM_MAGIC:
        raise BadMagicError("not an LQM stream")
    version, nlayers = r.unpack("II")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported LQM version {version}")
    input_shape = r.unpack("3I")
    layers = []
    for _ in range(nlayers):
        spec, shift1, shift2 = _read_spec_header(r)
        (wlen,) = r.unpack("Q")
        packed = r.take(wlen)
        (nbias,) = r.unpack("Q")
        biases = np.frombuffer(r.take(2 * nbias), dtype="<i2").astype(np.int16)
        try:
            layers.append(QuantizedLayer(spec, packed, biases, shift1, shift2))
        except ContractError as exc:
            raise FormatError(str(exc)) from exc
    try:
        return QuantizedModel(input_shape, layers)
    except ContractError as exc:
        raise FormatError(f"inconsistent layer chain: {exc}") from exc


def serialize_float(m: FloatModel) -> bytes:
    parts = [FPM_MAGIC, struct.pack("<II", FORMAT_VERSION, len(m.layers))]
    parts.append(struct.pack("<3I", *m.input_shape))
    for layer in m.layers:
        parts.append(_pack_spec_header(layer.spec, 0, 0))
        parts.append(struct.pack("<Q", layer.weights.size))
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(struct.pack("<Q", layer.biases.size))
        parts.append(layer.biases.astype("<f4").tobytes())
    return b"".join(parts)


def deserialize_float(data: bytes) -> FloatModel:
    r = _Reader(data)
    if r.take(4) != FPM_MAGIC:
        raise BadMagicError("not an FPM stream")
    version, nlayers = r.unpack("II")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported FPM version {version}")
    input_shape = r.unpack("3I")
    layers = []
    for _ in range(nlayers):
        spec, _, _ = _read_spec_header(r)
        (nw,) = r.unpack("Q")
        weights = np.frombuffer(r.take(4 * nw), dtype="<f4").astype(np.float64)
        (nb,) = r.unpack("Q")
        biases = np.frombuffer(r.take(4 * nb), dtype="<f4").astype(np.float64)
        try:
            layers.append(FloatLayer(spec, weights, biases))
        except ContractError as exc:
            raise FormatError(str(exc)) from exc
    try:
        return FloatModel(input_shape, layers)
    except ContractError as exc:
        raise FormatError(f"inconsistent layer chain: {exc}") from exc


def save_lqm(path, m: QuantizedModel) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(m))


def load_lqm(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def save_fpm(path, m: FloatModel) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_float(m))


def load_fpm(path) -> FloatModel:
    with open(path, "rb") as fh:
        return deserialize_float(fh.read())


# ---------------------------------------------------------------------------
# Size and operation statistics
# ---------------------------------------------------------------------------

def layer_stats(spec: LayerSpec, in_shape: tuple) -> dict:
    """Per-layer storage and shift-add operation counts."""
    out_shape = spec.output_shape(in_shape)
    if spec.kind == LayerKind.CONV2D:
        window = spec.shape[1] * spec.shape[2] * spec.shape[3]
        madds = int(np.prod(out_shape)) * window
    elif spec.kind == LayerKind.FULLY_CONNECTED:
        madds = spec.shape[0] * spec.shape[1]
    else:
        madds = 0
    return {
        "weight_count": spec.weight_count,
        "packed_weight_bytes": (spec.weight_count + 1) // 2,
        "bias_bytes": 2 * spec.bias_count,
        "madds": madds,
        "output_shape": out_shape,
    }


def model_stats(m: QuantizedModel) -> dict:
    """Whole-model storage footprint and shift-add work for one pass."""
    totals = {"weight_count": 0, "packed_weight_bytes": 0,
              "bias_bytes": 0, "total_madds": 0}
    cur = m.input_shape
    for layer in m.layers:
        st = layer_stats(layer.spec, cur)
        totals["weight_count"] += st["weight_count"]
        totals["packed_weight_bytes"] += st["packed_weight_bytes"]
        totals["bias_bytes"] += st["bias_bytes"]
        totals["total_madds"] += st["madds"]
        cur = st["output_shape"]
    return totals
