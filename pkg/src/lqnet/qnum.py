"""Scalar quantization primitives.

Two number formats drive the whole pipeline:

* ``LogCode`` stores a weight as a sign plus a small exponent magnitude
  ``e``; the decoded value is ``sign * 2**-e``.  With ``b`` total bits one
  bit is the sign and ``b - 1`` bits hold ``e``, so representable
  magnitudes are ``2**0 .. 2**-B`` with ``B = 2**(b-1) - 1``.  There is no
  zero code; an exact zero input maps to the smallest magnitude ``(+, B)``.

* ``FixedCode`` stores an activation or bias as a ``k``-bit two's
  complement integer with ``k - 1`` fraction bits; the decoded value is
  ``raw / 2**(k-1)``.  The most negative pattern ``-2**(k-1)`` is never
  produced so negation is always representable.

All rounding is round-half-away-from-zero.  Every function here is exact:
results are determined by integer comparisons, never by floating-point
log/exp approximations, so independent extended-precision evaluations
agree bit for bit.  Pure functions throughout; safe under any concurrency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InputDomainError

WEIGHT_BITS = 4
ACT_BITS = 8
BIAS_BITS = 16

# Mantissas from frexp lie in [0.5, 1); the nearest power of two flips at
# mantissa 2**-0.5, which is irrational, so ties cannot occur.  _MANT_GE
# records on which side the closest double sits so the vectorized
# comparison below is exact for every representable input.
_MANT_CUT = math.sqrt(0.5)
_MANT_GE = Fraction(_MANT_CUT) ** 2 > Fraction(1, 2)


def max_exponent(bits: int) -> int:
    """Largest exponent magnitude representable with the given code width."""
    return 2 ** (bits - 1) - 1


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class LogCode:
    """Signed power-of-two weight code: value is ``sign * 2**-expmag``."""

    sign: int
    expmag: int

    def __post_init__(self) -> None:
        if self.sign not in (1, -1):
            raise InputDomainError(f"sign must be +1 or -1, got {self.sign}")
        if self.expmag < 0:
            raise InputDomainError(f"expmag must be >= 0, got {self.expmag}")

    def __neg__(self) -> "LogCode":
        return LogCode(-self.sign, self.expmag)


@dataclass(frozen=True)
class FixedCode:
    """Two's-complement fixed-point code with ``bits - 1`` fraction bits."""

    raw: int
    bits: int = ACT_BITS

    def __post_init__(self) -> None:
        lim = 2 ** (self.bits - 1) - 1
        if not -lim <= self.raw <= lim:
            raise InputDomainError(
                f"raw {self.raw} outside symmetric {self.bits}-bit range"
            )

    def __neg__(self) -> "FixedCode":
        return FixedCode(-self.raw, self.bits)


def _nearest_log2_exponent(ax: float) -> int:
    """Nearest integer to log2 of a positive finite float, exactly.

    frexp gives ax = m * 2**E with m in [0.5, 1), so log2(ax) lies in
    (E-1, E].  It rounds to E iff ax > 2**(E-0.5), i.e. iff
    (m * 2**53)**2 > 2**105, an exact integer comparison.
    """
    m, e2 = math.frexp(ax)
    mant = int(m * 9007199254740992.0)  # m * 2**53, exact
    return e2 if mant * mant > (1 << 105) else e2 - 1


def log_quantize(w: float, bits: int = WEIGHT_BITS) -> LogCode:
    """Quantize a weight in [-1, 1] to the nearest signed power of two.

    The exponent magnitude ``-Round(log2 |w|)`` is clamped into [0, B].
    ``w = 0`` has no code of its own and maps to ``(+1, B)``.
    """
    if bits < 2:
        raise InputDomainError(f"bits must be >= 2, got {bits}")
    if not math.isfinite(w):
        raise InputDomainError(f"weight must be finite, got {w}")
    big = max_exponent(bits)
    if w == 0.0:
        return LogCode(1, big)
    sign = 1 if w > 0 else -1
    e = -_nearest_log2_exponent(abs(w))
    if e > big:
        e = big
    elif e < 0:
        e = 0
    return LogCode(sign, e)


def fixed_quantize(a: float, bits: int = ACT_BITS) -> FixedCode:
    """Quantize a real value to the symmetric ``bits``-wide fixed grid.

    Magnitudes at or below ``2**-bits`` collapse to exact zero; magnitudes
    past the largest code saturate at ``+/-(2**(bits-1) - 1)``.
    """
    if bits < 2:
        raise InputDomainError(f"bits must be >= 2, got {bits}")
    if not math.isfinite(a):
        raise InputDomainError(f"value must be finite, got {a}")
    lim = 2 ** (bits - 1) - 1
    if abs(a) <= 2.0 ** -bits:
        return FixedCode(0, bits)
    if abs(a) >= 1.0:
        return FixedCode(lim if a > 0 else -lim, bits)
    raw = round_half_away(a * 2.0 ** (bits - 1))
    raw = min(max(raw, -lim), lim)
    return FixedCode(raw, bits)


def bias_quantize(v: float) -> FixedCode:
    """Quantize a bias on the double-width 16-bit fixed grid."""
    return fixed_quantize(v, BIAS_BITS)


def decode_log(code: LogCode) -> float:
    return code.sign * 2.0 ** -code.expmag


def decode_fixed(code: FixedCode) -> float:
    return code.raw / 2.0 ** (code.bits - 1)


def ceil_pow2_exponent(x: float) -> int:
    """Smallest integer p with 2**p >= x, for finite x > 0."""
    if not (math.isfinite(x) and x > 0):
        raise InputDomainError(f"need a positive finite value, got {x}")
    m, e2 = math.frexp(x)
    return e2 - 1 if m == 0.5 else e2


def nearest_pow2_exponent(x: float) -> int:
    """Integer p minimizing |log2 x - p|, for finite x > 0."""
    if not (math.isfinite(x) and x > 0):
        raise InputDomainError(f"need a positive finite value, got {x}")
    return _nearest_log2_exponent(x)


# ---------------------------------------------------------------------------
# Array forms.  Same semantics as the scalar functions, element by element;
# used by the converter, the engine and the trainer on whole tensors.
# ---------------------------------------------------------------------------

def log_quantize_array(w: np.ndarray, bits: int = WEIGHT_BITS):
    """Vectorized log_quantize: returns (signs, expmags) int8 arrays."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InputDomainError("weights must be finite")
    big = max_exponent(bits)
    signs = np.where(w < 0, -1, 1).astype(np.int8)
    mant, exp2 = np.frexp(np.abs(w))
    up = mant >= _MANT_CUT if _MANT_GE else mant > _MANT_CUT
    e = -np.where(up, exp2, exp2 - 1)
    e = np.clip(e, 0, big)
    e = np.where(w == 0, big, e)
    return signs, e.astype(np.int8)


def decode_log_array(signs: np.ndarray, expmags: np.ndarray) -> np.ndarray:
    return signs.astype(np.float64) * np.ldexp(1.0, -expmags.astype(np.int64))


def fixed_quantize_array(a: np.ndarray, bits: int = ACT_BITS) -> np.ndarray:
    """Vectorized fixed_quantize: returns raw codes as int64."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InputDomainError("values must be finite")
    lim = 2 ** (bits - 1) - 1
    mag = np.abs(a)
    # |a| < 1 keeps |a * 2**(bits-1) + 0.5| well under 2**52: exact floor.
    scaled = np.floor(np.minimum(mag, 1.0) * 2.0 ** (bits - 1) + 0.5)
    raw = np.where(a < 0, -scaled, scaled)
    raw = np.clip(raw, -lim, lim)
    raw = np.where(mag <= 2.0 ** -bits, 0.0, raw)
    return raw.astype(np.int64)


def decode_fixed_array(raw: np.ndarray, bits: int = ACT_BITS) -> np.ndarray:
    return raw.astype(np.float64) / 2.0 ** (bits - 1)
