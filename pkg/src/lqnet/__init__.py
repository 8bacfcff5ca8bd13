"""Multiplier-free CNN computing with logarithmic weights.

Weights are 4-bit signed powers of two, activations 8-bit fixed point,
and every layer's output scaling is an exact power-of-two bit shift, so
inference needs only integer shifts and adds.  The package covers the
whole pipeline: scalar quantizers, bit-packed model containers, an
integer inference engine, a float-to-quantized converter, exact oracles,
and desk-scale quantization-aware training.
"""

from .errors import (
    BadMagicError,
    ContractError,
    DataMismatchError,
    FormatError,
    InputDomainError,
    LqnetError,
    TruncatedError,
    VersionError,
)
from .model import (
    Activation,
    FloatLayer,
    FloatModel,
    LayerKind,
    LayerSpec,
    QuantizedLayer,
    QuantizedModel,
    ScaleMode,
    model_stats,
    pack_weights,
    unpack_weights,
)
from .qnum import (
    FixedCode,
    LogCode,
    bias_quantize,
    decode_fixed,
    decode_log,
    fixed_quantize,
    log_quantize,
)
from .engine import QTensor, RunTrace, run_model
from .kernel import Accumulator, KernelConfig, run_unit

__all__ = [
    "Accumulator", "Activation", "BadMagicError", "ContractError",
    "DataMismatchError", "FixedCode", "FloatLayer", "FloatModel",
    "FormatError", "InputDomainError", "KernelConfig", "LayerKind",
    "LayerSpec", "LogCode", "LqnetError", "QTensor", "QuantizedLayer",
    "QuantizedModel", "RunTrace", "ScaleMode", "TruncatedError",
    "VersionError", "bias_quantize", "decode_fixed", "decode_log",
    "fixed_quantize", "log_quantize", "model_stats", "pack_weights",
    "run_model", "run_unit", "unpack_weights",
]

__version__ = "0.1.0"
