"""Bundled network configurations.

Two reference topologies ship with the package: a LeNet-5 style digit
classifier (28x28 single-channel input) and a Tiny-Yolov2 style detector
backbone used for storage arithmetic.  The detector is a reconstruction:
nine 3x3/1x1 conv stages with five stride-2 max pools on a 3x416x416
input, with the second 1024-wide stage narrowed to 512 channels and an
80-class, 5-anchor head (425 filters).
"""

from __future__ import annotations

import numpy as np

from .model import (
    Activation,
    FloatLayer,
    FloatModel,
    LayerKind,
    LayerSpec,
    QuantizedLayer,
    QuantizedModel,
    pack_weights,
)

LENET_INPUT_SHAPE = (1, 28, 28)


def lenet5_specs() -> list:
    """Conv-pool-conv-pool-FC x3 layer chain for 28x28 digits."""
    return [
        LayerSpec(LayerKind.CONV2D, (6, 1, 5, 5), padding=2),
        LayerSpec(LayerKind.MAXPOOL2D, (2, 2), stride=2),
        LayerSpec(LayerKind.CONV2D, (16, 6, 5, 5)),
        LayerSpec(LayerKind.MAXPOOL2D, (2, 2), stride=2),
        LayerSpec(LayerKind.FULLY_CONNECTED, (120, 400)),
        LayerSpec(LayerKind.FULLY_CONNECTED, (84, 120)),
        LayerSpec(LayerKind.FULLY_CONNECTED, (10, 84),
                  activation=Activation.IDENTITY),
    ]


def lenet5_float(seed: int = 7) -> FloatModel:
    """Randomly initialized float LeNet, deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in lenet5_specs():
        if spec.kind == LayerKind.MAXPOOL2D:
            layers.append(FloatLayer(spec))
            continue
        fan_in = int(np.prod(spec.shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        weights = rng.normal(0.0, std, size=spec.weight_count)
        biases = rng.normal(0.0, 0.01, size=spec.bias_count)
        layers.append(FloatLayer(spec, weights, biases))
    return FloatModel(LENET_INPUT_SHAPE, layers)


TINY_YOLOV2_INPUT_SHAPE = (3, 416, 416)

_TINY_YOLO_CONVS = [
    (16, 3, 3), (32, 16, 3), (64, 32, 3), (128, 64, 3), (256, 128, 3),
    (512, 256, 3), (1024, 512, 3), (512, 1024, 3), (425, 512, 1),
]
_TINY_YOLO_POOL_AFTER = {0, 1, 2, 3, 4}


def tiny_yolov2_like_specs() -> list:
    specs = []
    for i, (out_c, in_c, k) in enumerate(_TINY_YOLO_CONVS):
        act = Activation.RELU if i < len(_TINY_YOLO_CONVS) - 1 \
            else Activation.IDENTITY
        specs.append(
            LayerSpec(LayerKind.CONV2D, (out_c, in_c, k, k),
                      padding=k // 2, activation=act)
        )
        if i in _TINY_YOLO_POOL_AFTER:
            specs.append(LayerSpec(LayerKind.MAXPOOL2D, (2, 2), stride=2))
    return specs


def tiny_yolov2_like() -> QuantizedModel:
    """Placeholder-weight detector model for size/op accounting."""
    layers = []
    for spec in tiny_yolov2_like_specs():
        if spec.kind == LayerKind.MAXPOOL2D:
            layers.append(QuantizedLayer(spec))
            continue
        n = spec.weight_count
        packed = pack_weights(
            np.ones(n, dtype=np.int8), np.full(n, 7, dtype=np.int8)
        )
        biases = np.zeros(spec.bias_count, dtype=np.int16)
        layers.append(QuantizedLayer(spec, packed, biases))
    return QuantizedModel(TINY_YOLOV2_INPUT_SHAPE, layers)
