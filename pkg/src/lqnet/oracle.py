"""Reference implementations used to check the fast paths.

``float_forward`` is the plain full-precision layer chain, used for
accuracy baselines and activation calibration.

``rational_quantized_forward`` re-derives the quantized pipeline over
exact rational arithmetic (stdlib Fractions whose denominators stay
powers of two throughout).  It deliberately shares no code with kernel or
engine: plain nested loops, decoded values, and explicit application of
the quantization rules at each rounding point.  Agreement with the engine
is therefore evidence, not tautology.

Argmax ties break toward the lowest index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .model import (
    Activation,
    FloatModel,
    LayerKind,
    QuantizedModel,
    ScaleMode,
    unpack_weights,
)
from .engine import QTensor

_HALF = Fraction(1, 2)
_ACC_LO = Fraction(-(2**31), 2**15)
_ACC_HI = Fraction(2**31 - 1, 2**15)
_GRID = Fraction(1, 2**15)
_EIGHT_BIT_EPS = Fraction(1, 2**8)
_EIGHT_BIT_MAX = 127


# ---------------------------------------------------------------------------
# Full-precision forward pass
# ---------------------------------------------------------------------------

def _float_conv(x: np.ndarray, weights: np.ndarray, biases: np.ndarray,
                spec) -> np.ndarray:
    out_c, in_c, kh, kw = spec.shape
    c, h, w = x.shape
    if padding := spec.padding:
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding))
        padded[:, padding:padding + h, padding:padding + w] = x
        x = padded
    oh = (x.shape[1] - kh) // spec.stride + 1
    ow = (x.shape[2] - kw) // spec.stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), (1, 2))
    view = view[:, ::spec.stride, ::spec.stride]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(in_c * kh * kw, oh * ow)
    w2 = weights.reshape(out_c, -1)
    return (w2 @ cols + biases[:, None]).reshape(out_c, oh, ow)


def _float_pool(x: np.ndarray, spec) -> np.ndarray:
    kh, kw = spec.shape
    c, h, w = x.shape
    if padding := spec.padding:
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding))
        padded[:, padding:padding + h, padding:padding + w] = x
        x = padded
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), (1, 2))
    view = view[:, ::spec.stride, ::spec.stride]
    return view.max(axis=(3, 4))


def float_forward(fm: FloatModel, x: np.ndarray, collect: bool = False):
    """Full-precision forward pass; optionally returns per-layer outputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != int(np.prod(fm.input_shape)):
        raise ContractError(
            f"input size {x.size} does not match model input "
            f"{fm.input_shape}"
        )
    cur = x.reshape(fm.input_shape)
    acts = []
    for layer in fm.layers:
        spec = layer.spec
        if spec.kind == LayerKind.CONV2D:
            z = _float_conv(cur, layer.weights, layer.biases, spec)
        elif spec.kind == LayerKind.FULLY_CONNECTED:
            w2 = layer.weights.reshape(spec.shape)
            z = w2 @ cur.reshape(-1) + layer.biases
        else:
            z = _float_pool(cur, spec)
        if spec.activation == Activation.RELU:
            z = np.maximum(z, 0.0)
        cur = z
        if collect:
            acts.append(cur)
    return (cur, acts) if collect else cur


# ---------------------------------------------------------------------------
# Exact rational re-derivation of the quantized pipeline
# ---------------------------------------------------------------------------

def _round_half_away(x: Fraction) -> int:
    if x >= 0:
        return int((x + _HALF).__floor__())
    return -int((-x + _HALF).__floor__())


def _to_grid(x: Fraction) -> Fraction:
    """Round to the accumulator grid (15 fraction bits), ties away."""
    return Fraction(_round_half_away(x / _GRID)) * _GRID


def _saturate(x: Fraction) -> Fraction:
    if x > _ACC_HI:
        return _ACC_HI
    if x < _ACC_LO:
        return _ACC_LO
    return x


def _fixed8(x: Fraction) -> int:
    """Eight-bit requantization on exact values."""
    if abs(x) <= _EIGHT_BIT_EPS:
        return 0
    q = _round_half_away(x * 2**7)
    return max(-_EIGHT_BIT_MAX, min(_EIGHT_BIT_MAX, q))


def _decode_weights(layer):
    signs, exps = unpack_weights(
        layer.packed_weights, layer.spec.weight_count
    )
    return [
        Fraction(int(s), 2 ** int(e)) for s, e in zip(signs, exps)
    ]


def _unit(window, weights, bias: Fraction, activation, shift: int) -> int:
    acc = bias
    for a, w in zip(window, weights):
        acc += a * w
    if activation == Activation.RELU and acc < 0:
        acc = Fraction(0)
    if shift >= 0:
        acc = _saturate(acc * 2**shift)
    else:
        acc = _to_grid(acc / 2**-shift)
    return _fixed8(acc)


def rational_quantized_forward(m: QuantizedModel, inp: QTensor) -> QTensor:
    """Bit-exact reference for engine.run_model, in exact arithmetic."""
    if int(np.prod(inp.shape)) != int(np.prod(m.input_shape)):
        raise ContractError(
            f"input shape {inp.shape} does not match model "
            f"input {m.input_shape}"
        )
    shape = m.input_shape
    values = [
        Fraction(int(v), 2**7) for v in inp.data.reshape(-1)
    ]
    for layer in m.layers:
        spec = layer.spec
        if spec.kind == LayerKind.MAXPOOL2D:
            shape, values = _pool_rational(values, shape, spec)
            continue
        if spec.scale_mode == ScaleMode.SINGLE_STEP:
            shift = layer.shift1
        else:
            shift = layer.shift1 - layer.shift2
        weights = _decode_weights(layer)
        biases = [Fraction(int(b), 2**15) for b in layer.biases]
        if spec.kind == LayerKind.FULLY_CONNECTED:
            out_n, in_n = spec.shape
            codes = []
            for o in range(out_n):
                row = weights[o * in_n:(o + 1) * in_n]
                codes.append(
                    _unit(values, row, biases[o], spec.activation, shift)
                )
            shape, values = (out_n,), [Fraction(q, 2**7) for q in codes]
        else:
            shape, values = _conv_rational(
                values, shape, spec, weights, biases, shift
            )
    out = np.array([int(v * 2**7) for v in values], dtype=np.int8)
    return QTensor(shape, out)


def _padded_grid(values, shape, padding):
    c, h, w = shape
    ph, pw = h + 2 * padding, w + 2 * padding
    grid = [[[Fraction(0)] * pw for _ in range(ph)] for _ in range(c)]
    idx = 0
    for ci in range(c):
        for y in range(h):
            for x in range(w):
                grid[ci][y + padding][x + padding] = values[idx]
                idx += 1
    return grid, ph, pw


def _conv_rational(values, shape, spec, weights, biases, shift):
    out_c, in_c, kh, kw = spec.shape
    grid, ph, pw = _padded_grid(values, shape, spec.padding)
    oh = (ph - kh) // spec.stride + 1
    ow = (pw - kw) // spec.stride + 1
    out = []
    for oc in range(out_c):
        wrow = weights[oc * in_c * kh * kw:(oc + 1) * in_c * kh * kw]
        for oy in range(oh):
            for ox in range(ow):
                window = []
                for ci in range(in_c):
                    for dy in range(kh):
                        for dx in range(kw):
                            window.append(
                                grid[ci][oy * spec.stride + dy]
                                    [ox * spec.stride + dx]
                            )
                q = _unit(window, wrow, biases[oc], spec.activation, shift)
                out.append(Fraction(q, 2**7))
    return (out_c, oh, ow), out


def _pool_rational(values, shape, spec):
    kh, kw = spec.shape
    grid, ph, pw = _padded_grid(values, shape, spec.padding)
    c = shape[0]
    oh = (ph - kh) // spec.stride + 1
    ow = (pw - kw) // spec.stride + 1
    out = []
    for ci in range(c):
        for oy in range(oh):
            for ox in range(ow):
                best = None
                for dy in range(kh):
                    for dx in range(kw):
                        v = grid[ci][oy * spec.stride + dy][ox * spec.stride + dx]
                        if best is None or v > best:
                            best = v
                out.append(best)
    return (c, oh, ow), out


# ---------------------------------------------------------------------------
# Tensor comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompareResult:
    max_abs_err: float
    mismatch_count: int
    top1_agreement: bool


def compare(a, b) -> CompareResult:
    """Elementwise metrics plus argmax agreement (lowest-index ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    return CompareResult(
        max_abs_err=float(diff.max()) if diff.size else 0.0,
        mismatch_count=int(np.count_nonzero(diff)),
        top1_agreement=bool(
            a.size == 0 or int(np.argmax(a)) == int(np.argmax(b))
        ),
    )
