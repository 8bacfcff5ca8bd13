"""End-to-end execution of quantized models.

Tensors are channel-major int8 code arrays.  Convolution is realized by
direct window traversal (sliding-window gather) over the same arithmetic
as kernel.run_unit, vectorized across output positions: per weight the
activation column is left-shifted by ``8 - expmag``, negated for negative
signs, and summed.  The integer datapath stays multiplication-free; index
arithmetic does not touch data values.

Because the accumulation is exact integer addition, any partition of the
work gives bit-identical results; ``threads`` only splits output channels
across a thread pool.

Tensor files: "QT1\\x00" holds int8 codes (u32 dim count, u32 dims, then
one byte per code), "FT1\\x00" holds little-endian f32 values with the
same header.  Both are little-endian.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, ContractError, TruncatedError
from .model import Activation, LayerKind, QuantizedLayer, QuantizedModel, ScaleMode
from .qnum import ACT_BITS

QT_MAGIC = b"QT1\x00"
FT_MAGIC = b"FT1\x00"

_ACC_MAX = 2**31 - 1
_ACC_MIN = -(2**31)


@dataclass(frozen=True)
class QTensor:
    """Channel-major tensor of 8-bit activation codes."""

    shape: tuple
    data: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        data = np.ascontiguousarray(self.data, dtype=np.int8)
        if data.shape != shape:
            if data.size != int(np.prod(shape)):
                raise ContractError(
                    f"data size {data.size} does not match shape {shape}"
                )
            data = data.reshape(shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)


@dataclass
class RunTrace:
    """Per-layer outputs and raw accumulator extrema, when tracing."""

    layer_outputs: list = field(default_factory=list)
    acc_extrema: list = field(default_factory=list)


def _net_shift(layer: QuantizedLayer) -> int:
    if layer.spec.scale_mode == ScaleMode.SINGLE_STEP:
        return layer.shift1
    return layer.shift1 - layer.shift2


def _accumulate(cols: np.ndarray, signs: np.ndarray, exps: np.ndarray,
                bias_raw: int) -> np.ndarray:
    """Shift-and-add dot products for one output channel.

    cols is (window, positions) int64; result is int64 accumulator raws.
    """
    shifted = np.left_shift(cols, (8 - exps.astype(np.int64))[:, None])
    signed = np.where(signs[:, None] < 0, -shifted, shifted)
    return signed.sum(axis=0) + bias_raw


def _scale_requant(acc: np.ndarray, shift: int, activation: Activation):
    """Activation, power-of-two scaling and 8-bit requantization.

    Mirrors kernel.apply_activation / scale_shift / requantize exactly.
    """
    if activation == Activation.RELU:
        acc = np.maximum(acc, 0)
    if shift >= 0:
        acc = np.clip(np.left_shift(acc, shift), _ACC_MIN, _ACC_MAX)
    else:
        m = -shift
        mag = (np.abs(acc) + (1 << (m - 1))) >> m
        acc = np.where(acc < 0, -mag, mag)
    mag = np.abs(acc)
    q = np.minimum((mag + 128) >> 8, 127)
    q = np.where(acc < 0, -q, q)
    q[mag <= 128] = 0
    return q.astype(np.int8), acc


def _windows(data: np.ndarray, kh: int, kw: int, stride: int,
             padding: int) -> np.ndarray:
    """Gather receptive fields: returns (c*kh*kw, oh*ow) int64 columns.

    Channel-major flattening of each window matches the packed weight
    order (in-channel, kh, kw).
    """
    c, h, w = data.shape
    if padding:
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding), np.int8)
        padded[:, padding:padding + h, padding:padding + w] = data
        data = padded
    view = np.lib.stride_tricks.sliding_window_view(data, (kh, kw), (1, 2))
    view = view[:, ::stride, ::stride, :, :]
    oh, ow = view.shape[1], view.shape[2]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return cols.astype(np.int64)


class _LayerRun:
    """Work shared by every output channel of one conv/fc layer."""

    def __init__(self, layer: QuantizedLayer, cols: np.ndarray):
        self.layer = layer
        self.cols = cols
        signs, exps = layer.weight_codes()
        out_c = layer.spec.shape[0]
        self.signs = signs.reshape(out_c, -1)
        self.exps = exps.reshape(out_c, -1)
        self.shift = _net_shift(layer)
        self.out = np.empty((out_c, cols.shape[1]), dtype=np.int8)
        self.acc_min = np.empty(out_c, dtype=np.int64)
        self.acc_max = np.empty(out_c, dtype=np.int64)

    def run_channels(self, chans) -> None:
        biases = self.layer.biases
        act = self.layer.spec.activation
        for oc in chans:
            acc = _accumulate(self.cols, self.signs[oc], self.exps[oc],
                              int(biases[oc]))
            self.acc_min[oc] = acc.min()
            self.acc_max[oc] = acc.max()
            self.out[oc], _ = _scale_requant(acc, self.shift, act)


def _run_parameterized(inp: QTensor, layer: QuantizedLayer, threads: int):
    spec = layer.spec
    out_shape = spec.output_shape(inp.shape)
    if spec.kind == LayerKind.CONV2D:
        kh, kw = spec.shape[2], spec.shape[3]
        cols = _windows(inp.data, kh, kw, spec.stride, spec.padding)
    else:
        cols = inp.data.reshape(-1, 1).astype(np.int64)
    if cols.shape[0] > 2**15:
        raise ContractError(
            f"window of {cols.shape[0]} terms risks accumulator overflow"
        )
    run = _LayerRun(layer, cols)
    out_c = spec.shape[0]
    if threads > 1 and out_c > 1:
        chunks = np.array_split(np.arange(out_c), min(threads, out_c))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(run.run_channels, chunks))
    else:
        run.run_channels(range(out_c))
    out = QTensor(out_shape, run.out.reshape(out_shape))
    return out, (int(run.acc_min.min()), int(run.acc_max.max()))


def run_conv(inp: QTensor, layer: QuantizedLayer, threads: int = 1) -> QTensor:
    if layer.spec.kind != LayerKind.CONV2D:
        raise ContractError("run_conv needs a Conv2D layer")
    return _run_parameterized(inp, layer, threads)[0]


def run_fc(inp: QTensor, layer: QuantizedLayer, threads: int = 1) -> QTensor:
    if layer.spec.kind != LayerKind.FULLY_CONNECTED:
        raise ContractError("run_fc needs a FullyConnected layer")
    return _run_parameterized(inp, layer, threads)[0]


def run_maxpool(inp: QTensor, layer: QuantizedLayer) -> QTensor:
    spec = layer.spec
    if spec.kind != LayerKind.MAXPOOL2D:
        raise ContractError("run_maxpool needs a MaxPool2D layer")
    out_shape = spec.output_shape(inp.shape)
    kh, kw = spec.shape
    cols = _windows(inp.data, kh, kw, spec.stride, spec.padding)
    c = inp.shape[0]
    per_chan = cols.reshape(c, kh * kw, -1)
    pooled = per_chan.max(axis=1).astype(np.int8)
    return QTensor(out_shape, pooled.reshape(out_shape))


def run_model(m: QuantizedModel, inp: QTensor, trace: bool = False,
              threads: int = 1):
    """Run the full layer chain; returns (output, RunTrace or None)."""
    if inp.shape != m.input_shape and (
        int(np.prod(inp.shape)) != int(np.prod(m.input_shape))
    ):
        raise ContractError(
            f"input shape {inp.shape} does not match model "
            f"input {m.input_shape}"
        )
    cur = QTensor(m.input_shape, inp.data.reshape(m.input_shape))
    rec = RunTrace() if trace else None
    for layer in m.layers:
        if layer.spec.kind == LayerKind.MAXPOOL2D:
            cur = run_maxpool(cur, layer)
            extrema = (0, 0)
        else:
            cur, extrema = _run_parameterized(cur, layer, threads)
        if rec is not None:
            rec.layer_outputs.append(cur)
            rec.acc_extrema.append(extrema)
    return cur, rec


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------

def _write_header(magic: bytes, shape: tuple) -> bytes:
    return magic + struct.pack("<I", len(shape)) + struct.pack(
        f"<{len(shape)}I", *shape
    )


def _read_header(data: bytes, magic: bytes):
    if data[:4] != magic:
        raise BadMagicError(f"expected {magic!r} tensor file")
    if len(data) < 8:
        raise TruncatedError("tensor header incomplete")
    (ndim,) = struct.unpack_from("<I", data, 4)
    if ndim > 8:
        raise TruncatedError(f"implausible dim count {ndim}")
    end = 8 + 4 * ndim
    if len(data) < end:
        raise TruncatedError("tensor dims incomplete")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    return shape, end


def save_qt(path, t: QTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(_write_header(QT_MAGIC, t.shape))
        fh.write(t.data.tobytes())


def load_qt(path) -> QTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    shape, off = _read_header(data, QT_MAGIC)
    n = int(np.prod(shape))
    if len(data) - off != n:
        raise TruncatedError(f"expected {n} codes, found {len(data) - off}")
    return QTensor(shape, np.frombuffer(data, dtype=np.int8, offset=off))


def save_ft(path, shape: tuple, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4").reshape(shape)
    with open(path, "wb") as fh:
        fh.write(_write_header(FT_MAGIC, tuple(shape)))
        fh.write(values.tobytes())


def load_ft(path):
    with open(path, "rb") as fh:
        data = fh.read()
    shape, off = _read_header(data, FT_MAGIC)
    n = int(np.prod(shape))
    if len(data) - off != 4 * n:
        raise TruncatedError(
            f"expected {n} float values, found {(len(data) - off) // 4}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64)
    return tuple(shape), values.reshape(shape)
