"""The shift-and-add compute unit.

One output element of any Conv2D or FullyConnected layer is produced by
the same four-stage unit: exact dot product into a 32-bit accumulator
with 15 fraction bits, activation, power-of-two scaling, requantization
to an 8-bit code.

Integer datapath checklist (keep this reviewable): shift_add_dot,
scale_shift and requantize use only integer add, negate, compare and
shift.  No multiplication appears anywhere between input codes and the
output code; an 8-bit activation times a power-of-two weight is one left
shift plus an optional negation.

Why the dot product is exact: a term pairs act raw ``a`` (7 fraction
bits) with weight ``sign * 2**-e`` (e <= 7), so its value on the 15
fraction-bit grid is ``sign * (a << (8 - e))``, an integer.  Biases carry
15 fraction bits already and add without alignment.  With at most 2**15
terms the magnitude stays below 2**31, so no overflow and no rounding
occur inside the accumulation; term order cannot change the result.

Two-step scaling folds its pre- and post-shifts into the single net
shift ``shift1 - shift2``.  Both supported activations (ReLU, Identity)
are positive homogeneous of degree one, so the fold is exact on real
values, and performing one shift instead of two avoids a second rounding
that would otherwise make the two scaling modes disagree on rare inputs.

All functions are pure; any number of units may run concurrently and
must produce results bit-identical to serial evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError
from .model import Activation, ScaleMode
from .qnum import ACT_BITS, BIAS_BITS, FixedCode, LogCode

ACC_FRACTION_BITS = 15
ACC_MAX = 2**31 - 1
ACC_MIN = -(2**31)
MAX_DOT_LENGTH = 2**15


@dataclass(frozen=True)
class Accumulator:
    """32-bit signed partial sum with 15 fraction bits."""

    raw: int

    @property
    def value(self) -> float:
        return self.raw / 2.0**ACC_FRACTION_BITS


@dataclass(frozen=True)
class KernelConfig:
    activation: Activation = Activation.RELU
    scale_mode: ScaleMode = ScaleMode.SINGLE_STEP
    shift1: int = 0
    shift2: int = 0

    @property
    def net_shift(self) -> int:
        if self.scale_mode == ScaleMode.SINGLE_STEP:
            return self.shift1
        return self.shift1 - self.shift2


def shift_add_dot(
    acts: Sequence[FixedCode],
    weights: Sequence[LogCode],
    bias: FixedCode,
) -> Accumulator:
    """Exact dot product of 8-bit activations with power-of-two weights."""
    if len(acts) != len(weights):
        raise ContractError(
            f"{len(acts)} activations vs {len(weights)} weights"
        )
    if len(acts) > MAX_DOT_LENGTH:
        raise ContractError(
            f"dot length {len(acts)} risks accumulator overflow"
        )
    if bias.bits != BIAS_BITS:
        raise ContractError(f"bias must be {BIAS_BITS}-bit, got {bias.bits}")
    acc = bias.raw
    for a, w in zip(acts, weights):
        if a.bits != ACT_BITS:
            raise ContractError(f"activations must be {ACT_BITS}-bit")
        term = a.raw << (8 - w.expmag)
        acc += -term if w.sign < 0 else term
    return Accumulator(acc)


def apply_activation(acc: Accumulator, activation: Activation) -> Accumulator:
    if activation == Activation.RELU and acc.raw < 0:
        return Accumulator(0)
    return acc


def scale_shift(acc: Accumulator, i: int) -> Accumulator:
    """Multiply by 2**i: saturating left shift, or rounding right shift."""
    if abs(i) > 31:
        raise ContractError(f"shift exponent {i} out of range")
    if i >= 0:
        raw = acc.raw << i
        if raw > ACC_MAX:
            raw = ACC_MAX
        elif raw < ACC_MIN:
            raw = ACC_MIN
        return Accumulator(raw)
    m = -i
    if acc.raw >= 0:
        return Accumulator((acc.raw + (1 << (m - 1))) >> m)
    return Accumulator(-((-acc.raw + (1 << (m - 1))) >> m))


def requantize(acc: Accumulator) -> FixedCode:
    """Reduce the accumulator to an 8-bit code, on the integer grid.

    Equivalent to fixed_quantize(acc.value, 8): magnitudes at or below
    one raw step of the 8-bit grid (128 accumulator units) become zero,
    the rest round half away from zero and saturate at +/-127.
    """
    raw = acc.raw
    neg = raw < 0
    mag = -raw if neg else raw
    if mag <= 1 << (ACC_FRACTION_BITS - ACT_BITS):
        return FixedCode(0, ACT_BITS)
    q = (mag + (1 << 7)) >> 8
    if q > 127:
        q = 127
    return FixedCode(-q if neg else q, ACT_BITS)


def run_unit(
    acts: Sequence[FixedCode],
    weights: Sequence[LogCode],
    bias: FixedCode,
    cfg: KernelConfig,
) -> FixedCode:
    """Full unit: dot, activation, scaling, requantization."""
    acc = shift_add_dot(acts, weights, bias)
    acc = apply_activation(acc, cfg.activation)
    acc = scale_shift(acc, cfg.net_shift)
    return requantize(acc)


def maxpool_unit(window: Sequence[FixedCode]) -> FixedCode:
    """Code with the maximum decoded value; integer max on raw codes."""
    if not window:
        raise ContractError("maxpool window must be non-empty")
    best = window[0]
    for code in window[1:]:
        if code.raw > best.raw:
            best = code
    return best
