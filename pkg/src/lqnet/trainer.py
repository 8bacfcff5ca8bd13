"""Quantization-aware training at desk scale.

Full-precision shadow parameters (normalized weights, biases and one
positive scale per layer) are updated by momentum SGD while the forward
pass sees their quantized images: weights snapped to signed powers of
two, biases to the 16-bit fixed grid, scales to a power of two.  Each
quantizer backpropagates as a clipped straight-through estimator:
identity where the input sits inside the representable range, zero where
the quantizer clamped.

The quantized forward pass reproduces the integer engine's arithmetic
exactly (all intermediate values are dyadic rationals held in float64,
including the accumulator-grid rounding after scaling), so a model
exported after training behaves identically under engine inference.

With ``quantized=False`` the same code paths run as a plain float
network; this serves both as the float baseline trainer and as the
bypassed mode for finite-difference gradient checks.

Training is deterministic for a fixed seed and thread count; minibatch
reduction order is fixed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from . import converter, engine
from .errors import ContractError, DataMismatchError, FormatError, InputDomainError
from .model import (
    Activation,
    FloatModel,
    LayerKind,
    LayerSpec,
    QuantizedLayer,
    QuantizedModel,
    ScaleMode,
    pack_weights,
)
from .qnum import (
    ACT_BITS,
    BIAS_BITS,
    decode_fixed_array,
    decode_log_array,
    fixed_quantize_array,
    log_quantize_array,
    max_exponent,
    nearest_pow2_exponent,
)

_GRID = 32768.0  # accumulator grid, 15 fraction bits
_ACC_LO = -(2.0**31) / _GRID
_ACC_HI = (2.0**31 - 1) / _GRID
_SCALE_EXP_LIMIT = 31

# Clipped-STE pass bands.  Log weights: gradients flow while the weight
# still rounds onto the representable magnitudes [2**-B, 1]; below
# 2**(-B-0.5) the bottom clamp engaged, above 1 the top clamp region
# begins.  Fixed codes: gradients flow until the saturation branch.
_W_LO = 2.0 ** -(max_exponent(4) + 0.5)
_W_HI = 1.0


@dataclass
class TrainConfig:
    lr: float = 0.0002
    lr_decay: float = 0.1
    lr_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.lr, self.lr_decay, self.batch_size) <= 0 or self.epochs < 0:
            raise InputDomainError("training hyperparameters must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_epochs)


@dataclass
class Minibatch:
    """Quantized input activations and integer class targets."""

    inputs: np.ndarray  # float64, already on the 8-bit grid, in [-1, 1]
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if len(self.inputs) != len(self.targets):
            raise DataMismatchError(
                f"{len(self.inputs)} inputs vs {len(self.targets)} targets"
            )


class ShadowParams:
    """Full-precision master copies of all trainable quantities."""

    def __init__(self, input_shape, specs, weights, biases, scales):
        self.input_shape = tuple(input_shape)
        self.specs = tuple(specs)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.scales = [float(f) for f in scales]
        if any(f <= 0 for f in self.scales):
            raise InputDomainError("scale shadows must stay positive")
        self.vel_w = [np.zeros_like(w) for w in self.weights]
        self.vel_b = [np.zeros_like(b) for b in self.biases]
        self.vel_f = [0.0] * len(self.scales)

    @classmethod
    def from_float(cls, fm: FloatModel, cal) -> "ShadowParams":
        """Initialize from a converted float model (calibrated factors)."""
        factors = converter.calibrate_activations(fm, cal)
        weights, biases, scales = [], [], []
        for i, layer in enumerate(fm.layers):
            if layer.spec.kind == LayerKind.MAXPOOL2D:
                weights.append(np.zeros(0))
                biases.append(np.zeros(0))
                scales.append(1.0)
                continue
            exp_w = factors.weight_exp[i]
            exp_prev = factors.act_exp[i]
            exp_out = factors.act_exp[i + 1]
            weights.append(layer.weights * 2.0 ** -exp_w)
            biases.append(layer.biases * 2.0 ** -(exp_w + exp_prev))
            scales.append(2.0 ** (exp_w + exp_prev - exp_out))
        specs = [layer.spec for layer in fm.layers]
        return cls(fm.input_shape, specs, weights, biases, scales)

    @classmethod
    def cold_start(cls, input_shape, specs, rng) -> "ShadowParams":
        """Random initialization for small from-scratch experiments."""
        weights, biases, scales = [], [], []
        for spec in specs:
            if spec.kind == LayerKind.MAXPOOL2D:
                weights.append(np.zeros(0))
                biases.append(np.zeros(0))
            else:
                fan_in = int(np.prod(spec.shape[1:]))
                bound = min(1.0, np.sqrt(3.0 / fan_in))
                weights.append(
                    rng.uniform(-bound, bound, size=spec.weight_count)
                    .reshape(spec.shape)
                )
                biases.append(np.zeros(spec.bias_count))
            scales.append(1.0)
        return cls(input_shape, specs, weights, biases, scales)

    def export(self, mode: ScaleMode = ScaleMode.SINGLE_STEP) -> QuantizedModel:
        """Quantize the shadows into an engine-ready model."""
        layers = []
        for spec, w, b, f in zip(self.specs, self.weights, self.biases,
                                 self.scales):
            if spec.kind == LayerKind.MAXPOOL2D:
                layers.append(QuantizedLayer(spec))
                continue
            spec = _respec(spec, mode)
            signs, exps = log_quantize_array(w.reshape(-1))
            bias_codes = fixed_quantize_array(b, BIAS_BITS).astype(np.int16)
            # The learned scale is a single net factor, so either mode
            # exports it as shift1 with shift2 = 0.
            shift = _scale_exponent(f)
            layers.append(
                QuantizedLayer(spec, pack_weights(signs, exps), bias_codes,
                               shift, 0)
            )
        return QuantizedModel(self.input_shape, layers)


def _respec(spec: LayerSpec, mode: ScaleMode) -> LayerSpec:
    from dataclasses import replace

    return replace(spec, scale_mode=mode)


def _scale_exponent(f: float) -> int:
    return int(np.clip(nearest_pow2_exponent(f),
                       -_SCALE_EXP_LIMIT, _SCALE_EXP_LIMIT))


# ---------------------------------------------------------------------------
# Batched layer arithmetic
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        padded = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
        padded[:, :, padding:padding + h, padding:padding + w] = x
        x = padded
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), (2, 3))
    view = view[:, :, ::stride, ::stride]
    oh, ow = view.shape[2], view.shape[3]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols, in_shape, kh, kw, stride, padding):
    b, c, h, w = in_shape
    ph, pw = h + 2 * padding, w + 2 * padding
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1
    d6 = dcols.reshape(b, c, kh, kw, oh, ow)
    dx = np.zeros((b, c, ph, pw))
    for dy in range(kh):
        for dx_ in range(kw):
            dx[:, :, dy:dy + stride * oh:stride,
               dx_:dx_ + stride * ow:stride] += d6[:, :, dy, dx_]
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def _grid_round(y: np.ndarray) -> np.ndarray:
    """Snap to the 15-fraction-bit grid with the engine's rounding."""
    r = np.floor(np.abs(y) * _GRID + 0.5)
    r = np.where(y < 0, -r, r) / _GRID
    return np.clip(r, _ACC_LO, _ACC_HI)


def _quantize_params(shadows: ShadowParams, idx: int, quantized: bool):
    w = shadows.weights[idx]
    b = shadows.biases[idx]
    f = shadows.scales[idx]
    if not quantized:
        ones_w = np.ones_like(w, dtype=bool)
        ones_b = np.ones_like(b, dtype=bool)
        return w, b, f, ones_w, ones_b
    signs, exps = log_quantize_array(w.reshape(-1))
    w_hat = decode_log_array(signs, exps).reshape(w.shape)
    mask_w = (np.abs(w) >= _W_LO) & (np.abs(w) <= _W_HI)
    b_hat = decode_fixed_array(fixed_quantize_array(b, BIAS_BITS), BIAS_BITS)
    mask_b = np.abs(b) < 1.0 - 2.0 ** -BIAS_BITS
    f_hat = 2.0 ** _scale_exponent(f)
    return w_hat, b_hat, f_hat, mask_w, mask_b


def qat_forward(shadows: ShadowParams, batch: Minibatch,
                quantized: bool = True):
    """Forward pass with quantized parameter images; returns (logits, cache).

    The cache retains the tensors the backward pass needs.  The final
    layer's output is left unquantized for the softmax loss.
    """
    x = batch.inputs.reshape((len(batch.inputs),) + shadows.input_shape)
    cache = {"layers": [], "quantized": quantized, "batch": len(x)}
    last = _last_param_index(shadows.specs)
    for i, spec in enumerate(shadows.specs):
        entry = {"spec": spec}
        if spec.kind == LayerKind.MAXPOOL2D:
            x, pool_ctx = _pool_forward(x, spec)
            entry["pool"] = pool_ctx
            cache["layers"].append(entry)
            continue
        w_hat, b_hat, f_hat, mask_w, mask_b = _quantize_params(
            shadows, i, quantized
        )
        if spec.kind == LayerKind.CONV2D:
            out_c, in_c, kh, kw = spec.shape
            cols, oh, ow = _im2col(x, kh, kw, spec.stride, spec.padding)
            z = np.matmul(w_hat.reshape(out_c, -1), cols)
            z += b_hat[:, None]
            entry["cols"] = cols
            entry["in_shape"] = x.shape
            z = z.reshape(len(x), out_c, oh, ow)
        else:
            flat = x.reshape(len(x), -1)
            z = flat @ w_hat.reshape(spec.shape).T + b_hat
            entry["cols"] = flat
            entry["in_shape"] = x.shape
        a = np.maximum(z, 0.0) if spec.activation == Activation.RELU else z
        y = a * f_hat
        if quantized:
            y = _grid_round(y)
        entry.update(w_hat=w_hat, f_hat=f_hat, z=z, a=a,
                     mask_w=mask_w, mask_b=mask_b)
        if i == last:
            x = y
        elif quantized:
            codes = fixed_quantize_array(y, ACT_BITS)
            entry["mask_a"] = np.abs(y) < 1.0 - 2.0 ** -ACT_BITS
            x = decode_fixed_array(codes, ACT_BITS)
        else:
            entry["mask_a"] = np.ones_like(y, dtype=bool)
            x = y
        cache["layers"].append(entry)
    logits = x.reshape(cache["batch"], -1)
    cache["logits_shape"] = x.shape
    return logits, cache


def _last_param_index(specs) -> int:
    for i in range(len(specs) - 1, -1, -1):
        if specs[i].kind != LayerKind.MAXPOOL2D:
            return i
    raise ContractError("model has no parameterized layers")


def _pool_forward(x: np.ndarray, spec: LayerSpec):
    kh, kw = spec.shape
    cols, oh, ow = _im2col(x, kh, kw, spec.stride, spec.padding)
    b, _, n = cols.shape
    c = x.shape[1]
    grouped = cols.reshape(b, c, kh * kw, n)
    arg = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, arg[:, :, None, :], axis=2)[:, :, 0, :]
    ctx = {"arg": arg, "in_shape": x.shape, "oh": oh, "ow": ow}
    return out.reshape(b, c, oh, ow), ctx


def _pool_backward(dy: np.ndarray, spec: LayerSpec, ctx) -> np.ndarray:
    kh, kw = spec.shape
    b, c = ctx["in_shape"][0], ctx["in_shape"][1]
    n = ctx["oh"] * ctx["ow"]
    dcols = np.zeros((b, c, kh * kw, n))
    np.put_along_axis(
        dcols, ctx["arg"][:, :, None, :],
        dy.reshape(b, c, 1, n), axis=2
    )
    return _col2im(dcols.reshape(b, c * kh * kw, n), ctx["in_shape"],
                   kh, kw, spec.stride, spec.padding)


def softmax_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient, with stable log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    batch, classes = logits.shape
    if classes < 2:
        raise ContractError("softmax needs at least 2 classes")
    if np.any(targets < 0) or np.any(targets >= classes):
        raise InputDomainError("target class index out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(batch), targets]))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(batch), targets] -= 1.0
    return loss, probs / batch


@dataclass
class GradientSet:
    weights: list
    biases: list
    scales: list


def qat_backward(cache, grad_logits: np.ndarray) -> GradientSet:
    """Backpropagate through the cached forward, straight-through quantizers."""
    layers = cache["layers"]
    if not layers:
        raise ContractError("backward called with an empty cache")
    gw = [None] * len(layers)
    gb = [None] * len(layers)
    gf = [0.0] * len(layers)
    last = max(
        i for i, e in enumerate(layers)
        if e["spec"].kind != LayerKind.MAXPOOL2D
    )
    carry = np.asarray(grad_logits, dtype=np.float64).reshape(
        cache["logits_shape"]
    )
    for i in range(len(layers) - 1, -1, -1):
        entry = layers[i]
        spec = entry["spec"]
        if spec.kind == LayerKind.MAXPOOL2D:
            carry = _pool_backward(carry, spec, entry["pool"])
            continue
        dy = carry if i == last else carry * entry["mask_a"]
        a, z, f_hat = entry["a"], entry["z"], entry["f_hat"]
        gf[i] = float(np.sum(dy * a))
        da = dy * f_hat
        if spec.activation == Activation.RELU:
            dz = da * (z > 0)
        else:
            dz = da
        if spec.kind == LayerKind.CONV2D:
            out_c = spec.shape[0]
            dz2 = dz.reshape(len(dz), out_c, -1)
            gw[i] = np.einsum("bon,bkn->ok", dz2, entry["cols"]).reshape(
                spec.shape
            ) * entry["mask_w"]
            gb[i] = dz2.sum(axis=(0, 2)) * entry["mask_b"]
            dcols = np.matmul(entry["w_hat"].reshape(out_c, -1).T, dz2)
            carry = _col2im(
                dcols, entry["in_shape"], spec.shape[2], spec.shape[3],
                spec.stride, spec.padding
            )
        else:
            gw[i] = (dz.T @ entry["cols"]).reshape(spec.shape) * entry["mask_w"]
            gb[i] = dz.sum(axis=0) * entry["mask_b"]
            carry = (dz @ entry["w_hat"].reshape(spec.shape)).reshape(
                entry["in_shape"]
            )
    for i, entry in enumerate(layers):
        if entry["spec"].kind == LayerKind.MAXPOOL2D:
            gw[i] = np.zeros(0)
            gb[i] = np.zeros(0)
    return GradientSet(gw, gb, gf)


def sgd_update(shadows: ShadowParams, grads: GradientSet, cfg: TrainConfig,
               epoch: int) -> ShadowParams:
    """Momentum SGD with weight decay; scales stay clamped positive."""
    lr = cfg.lr_at(epoch)
    for i, spec in enumerate(shadows.specs):
        if spec.kind == LayerKind.MAXPOOL2D:
            continue
        gw = grads.weights[i] + cfg.weight_decay * shadows.weights[i]
        shadows.vel_w[i] = cfg.momentum * shadows.vel_w[i] + gw
        shadows.weights[i] -= lr * shadows.vel_w[i]
        gb = grads.biases[i] + cfg.weight_decay * shadows.biases[i]
        shadows.vel_b[i] = cfg.momentum * shadows.vel_b[i] + gb
        shadows.biases[i] -= lr * shadows.vel_b[i]
        shadows.vel_f[i] = cfg.momentum * shadows.vel_f[i] + grads.scales[i]
        shadows.scales[i] = float(np.clip(
            shadows.scales[i] - lr * shadows.vel_f[i], 2.0**-31, 2.0**31
        ))
    return shadows


def train(shadows: ShadowParams, inputs: np.ndarray, targets: np.ndarray,
          cfg: TrainConfig, quantized: bool = True, eval_set=None,
          on_epoch=None):
    """Minibatch training loop; returns (shadows, model, history).

    ``inputs`` are already-quantized activations in [-1, 1]; ``eval_set``
    is an optional (inputs, targets) pair scored each epoch with the same
    forward mode.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(inputs) != len(targets):
        raise DataMismatchError(
            f"{len(inputs)} inputs vs {len(targets)} targets"
        )
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Minibatch(inputs[idx], targets[idx])
            logits, cache = qat_forward(shadows, batch, quantized)
            loss, grad = softmax_loss(logits, batch.targets)
            grads = qat_backward(cache, grad)
            sgd_update(shadows, grads, cfg, epoch)
            total += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "loss": total / seen}
        if eval_set is not None:
            row["top1"] = predict_top1(shadows, eval_set[0], eval_set[1],
                                       quantized)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return shadows, shadows.export(), history


def predict_top1(shadows: ShadowParams, inputs, targets,
                 quantized: bool = True, batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions under qat_forward."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    hits = 0
    for start in range(0, len(inputs), batch_size):
        batch = Minibatch(inputs[start:start + batch_size],
                          targets[start:start + batch_size])
        logits, _ = qat_forward(shadows, batch, quantized)
        hits += int(np.sum(np.argmax(logits, axis=1) == batch.targets))
    return hits / len(inputs)


def evaluate(m: QuantizedModel, inputs: np.ndarray, labels: np.ndarray,
             threads: int = 1) -> dict:
    """Engine-based top-1 and per-class accuracy over int8 code inputs."""
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise DataMismatchError("cannot evaluate on an empty dataset")
    if len(inputs) != len(labels):
        raise DataMismatchError(
            f"{len(inputs)} samples vs {len(labels)} labels"
        )
    classes = int(np.prod(m.output_shape()))
    per_class_hits = np.zeros(classes, dtype=np.int64)
    per_class_seen = np.zeros(classes, dtype=np.int64)
    hits = 0
    for sample, label in zip(inputs, labels):
        qt = engine.QTensor(m.input_shape, sample.reshape(m.input_shape))
        out, _ = engine.run_model(m, qt, threads=threads)
        pred = int(np.argmax(out.data.reshape(-1)))
        per_class_seen[label] += 1
        if pred == label:
            hits += 1
            per_class_hits[label] += 1
    per_class = np.divide(
        per_class_hits, per_class_seen,
        out=np.zeros(classes), where=per_class_seen > 0
    )
    return {"top1": hits / len(inputs), "per_class": per_class}


# ---------------------------------------------------------------------------
# IDX dataset files (MNIST convention, big-endian; .gz transparently)
# ---------------------------------------------------------------------------

def _read_idx(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx_images(path) -> np.ndarray:
    data = _read_idx(path)
    if len(data) < 16:
        raise FormatError("IDX image file too short")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != 0x00000803:
        raise FormatError(f"bad IDX image magic {magic:#010x}")
    if len(data) != 16 + n * rows * cols:
        raise FormatError("IDX image payload truncated")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(
        n, rows, cols
    )


def load_idx_labels(path) -> np.ndarray:
    data = _read_idx(path)
    if len(data) < 8:
        raise FormatError("IDX label file too short")
    magic, n = struct.unpack(">II", data[:8])
    if magic != 0x00000801:
        raise FormatError(f"bad IDX label magic {magic:#010x}")
    if len(data) != 8 + n:
        raise FormatError("IDX label payload truncated")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def images_to_codes(images: np.ndarray) -> np.ndarray:
    """Scale raw pixels to [0, 1] and quantize to 8-bit input codes."""
    return fixed_quantize_array(
        images.astype(np.float64) / 255.0, ACT_BITS
    ).astype(np.int8)
