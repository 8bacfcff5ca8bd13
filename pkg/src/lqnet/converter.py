"""Float-to-quantized model conversion.

Per layer the converter picks a weight normalization factor (the
power-of-two ceiling of the largest absolute weight), measures activation
ranges on a calibration set to pick the activation factors, divides
weights and biases by their factors, quantizes them, and composes the
factors into the layer's output shift.

Every factor is forced to an exact power of two by rounding its raw
value up, so each layer's composed scale is exactly one bit shift and the
quantized model cannot carry any residual multiplicative factor.

Parameterless layers (max pooling) pass their input's normalization
through unchanged, so their activation factor is inherited from the
previous layer rather than measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle
from .errors import ContractError, InputDomainError
from .model import (
    FloatModel,
    LayerKind,
    QuantizedLayer,
    QuantizedModel,
    ScaleMode,
)
from .qnum import (
    BIAS_BITS,
    ceil_pow2_exponent,
    fixed_quantize_array,
    log_quantize_array,
)
from .model import pack_weights


@dataclass
class NormFactors:
    """Power-of-two normalization exponents chosen for one model.

    ``act_exp[0]`` belongs to the network input and is always 0 (the
    input is normalized during preprocessing); ``act_exp[l]`` belongs to
    layer l's output.  ``weight_exp`` has one entry per layer, None for
    parameterless layers.
    """

    weight_exp: list
    act_exp: list
    weight_raw: list = field(default_factory=list)
    act_raw: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def compute_weight_norm(weights: np.ndarray):
    """Max-abs weight range and its power-of-two ceiling exponent."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ContractError("cannot normalize an empty weight array")
    raw = float(np.max(np.abs(weights)))
    if raw == 0.0:
        raise InputDomainError(
            "all-zero layer cannot be represented; no zero weight code exists"
        )
    return raw, ceil_pow2_exponent(raw)


def load_calibration(tensors) -> list:
    """Validate a calibration set: non-empty, every value in [-1, 1]."""
    cal = [np.asarray(t, dtype=np.float64) for t in tensors]
    if not cal:
        raise ContractError("calibration set must be non-empty")
    for t in cal:
        if not np.all(np.isfinite(t)) or float(np.max(np.abs(t))) > 1.0:
            raise InputDomainError(
                "calibration inputs must be finite and within [-1, 1]"
            )
    return cal


def calibrate_activations(fm: FloatModel, cal) -> NormFactors:
    """Observe per-layer activation maxima over the calibration set."""
    cal = load_calibration(cal)
    maxima = np.zeros(len(fm.layers))
    for sample in cal:
        _, acts = oracle.float_forward(fm, sample, collect=True)
        for i, a in enumerate(acts):
            maxima[i] = max(maxima[i], float(np.max(np.abs(a))))

    factors = NormFactors(weight_exp=[], act_exp=[0], act_raw=[1.0])
    for i, layer in enumerate(fm.layers):
        if layer.spec.kind == LayerKind.MAXPOOL2D:
            factors.weight_exp.append(None)
            factors.weight_raw.append(None)
            # Pooling rescales nothing; its output keeps the input factor.
            factors.act_exp.append(factors.act_exp[i])
            factors.act_raw.append(factors.act_raw[i])
            continue
        raw_w, exp_w = compute_weight_norm(layer.weights)
        factors.weight_exp.append(exp_w)
        factors.weight_raw.append(raw_w)
        if maxima[i] == 0.0:
            factors.warnings.append(
                f"layer {i}: activations all zero over calibration; "
                f"using factor 1"
            )
            factors.act_exp.append(0)
            factors.act_raw.append(0.0)
        else:
            factors.act_exp.append(ceil_pow2_exponent(maxima[i]))
            factors.act_raw.append(maxima[i])
    return factors


def compose_scale(w_exp: int, act_prev_exp: int, act_exp: int) -> int:
    """Single-step output shift: exponent of f_W * f_A_prev / f_A."""
    return w_exp + act_prev_exp - act_exp


def compose_two_step(w_exp: int, act_prev_exp: int, act_exp: int):
    """Two-step shifts: pre-activation f_W * f_A_prev, post-activation f_A."""
    return w_exp + act_prev_exp, act_exp


def quantize_model(
    fm: FloatModel,
    cal,
    mode: ScaleMode = ScaleMode.SINGLE_STEP,
    factors: NormFactors | None = None,
) -> QuantizedModel:
    """Convert a float model to packed codes plus per-layer shifts."""
    if factors is None:
        factors = calibrate_activations(fm, cal)
    qlayers = []
    for i, layer in enumerate(fm.layers):
        spec = layer.spec
        if spec.kind == LayerKind.MAXPOOL2D:
            qlayers.append(QuantizedLayer(spec))
            continue
        spec = replace(spec, scale_mode=mode)
        exp_w = factors.weight_exp[i]
        exp_prev = factors.act_exp[i]
        exp_out = factors.act_exp[i + 1]
        norm_w = layer.weights * 2.0 ** -exp_w
        signs, exps = log_quantize_array(norm_w)
        norm_b = layer.biases * 2.0 ** -(exp_w + exp_prev)
        bias_codes = fixed_quantize_array(norm_b, BIAS_BITS).astype(np.int16)
        if mode == ScaleMode.SINGLE_STEP:
            s1, s2 = compose_scale(exp_w, exp_prev, exp_out), 0
        else:
            s1, s2 = compose_two_step(exp_w, exp_prev, exp_out)
        qlayers.append(
            QuantizedLayer(spec, pack_weights(signs, exps), bias_codes, s1, s2)
        )
    return QuantizedModel(fm.input_shape, qlayers)
