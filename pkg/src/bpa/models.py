"""Desk-scale CIFAR-10 architectures.

``resnet-small`` and ``vgg-small`` are the surrogates; the rest are victims
chosen to differ from them in depth, width, block type or pooling layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (
    AvgPool,
    BatchNorm,
    ConcatBegin,
    ConcatEnd,
    Conv,
    Flatten,
    Layer,
    Linear,
    MaxPool,
    ReLU,
    ResidualBegin,
    ResidualEnd,
    block_pairs,
)
from .tensor import DTYPE, WindowSpec

SURROGATES = ("resnet-small", "vgg-small")
VICTIMS = ("wrn-tiny", "densenet-tiny", "plaincnn", "resnext-tiny", "mobilenet-tiny")


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class ModelDef:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    num_classes: int
    param_shapes: dict = field(hash=False, compare=False)
    # first layer index of every stage, in forward order
    stage_boundaries: tuple[int, ...] = ()
    # ReLU ordinal of the first ReLU inside every residual block
    block_relu_starts: tuple[int, ...] = ()

    def __post_init__(self):
        block_pairs(self.layers)
        relus = [l.index for l in self.layers if isinstance(l, ReLU)]
        pools = [l.index for l in self.layers if isinstance(l, MaxPool)]
        if relus != list(range(len(relus))) or pools != list(range(len(pools))):
            raise ValueError(f"{self.name}: ReLU/MaxPool ordinals must be 0..k-1 in forward order")

    @property
    def relu_count(self) -> int:
        return sum(isinstance(l, ReLU) for l in self.layers)

    @property
    def pool_count(self) -> int:
        return sum(isinstance(l, MaxPool) for l in self.layers)

    @property
    def residual_block_count(self) -> int:
        return sum(isinstance(l, ResidualBegin) for l in self.layers)


class _Builder:
    def __init__(self, channels: int, hw: int):
        self.input_shape = (channels, hw, hw)
        self.layers: list[Layer] = []
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.c = channels
        self.hw = hw
        self.relus = 0
        self.pools = 0
        self.blocks = 0
        self.stages: list[int] = []
        self.block_relu_starts: list[int] = []
        self._n = 0

    def _name(self, kind: str) -> str:
        self._n += 1
        return f"{kind}{self._n}"

    def conv_layer(self, cout: int, k: int, stride: int = 1, groups: int = 1, bias: bool = False) -> Conv:
        name = self._name("conv")
        self.shapes[f"{name}.w"] = (cout, self.c // groups, k, k)
        if bias:
            self.shapes[f"{name}.b"] = (cout,)
        spec = WindowSpec.square(k, stride, k // 2)
        self.c = cout
        self.hw = (self.hw + 2 * (k // 2) - k) // stride + 1
        return Conv(f"{name}.w", f"{name}.b" if bias else None, spec, groups)

    def bn_layer(self) -> BatchNorm:
        name = self._name("bn")
        for part in ("scale", "shift", "mean", "var"):
            self.shapes[f"{name}.{part}"] = (self.c,)
        return BatchNorm(f"{name}.scale", f"{name}.shift", f"{name}.mean", f"{name}.var")

    def conv(self, cout, k, stride=1, groups=1, bn=True, relu=True, bias=False):
        self.layers.append(self.conv_layer(cout, k, stride, groups, bias=bias or not bn))
        if bn:
            self.layers.append(self.bn_layer())
        if relu:
            self.relu()

    def relu(self):
        self.layers.append(ReLU(self.relus))
        self.relus += 1

    def bn(self):
        self.layers.append(self.bn_layer())

    def maxpool(self, k, s, p=0):
        self.layers.append(MaxPool(WindowSpec.square(k, s, p), self.pools))
        self.pools += 1
        self.hw = (self.hw + 2 * p - k) // s + 1

    def avgpool(self, k, s=None):
        s = s or k
        self.layers.append(AvgPool(WindowSpec.square(k, s)))
        self.hw = (self.hw - k) // s + 1

    def global_pool(self):
        self.avgpool(self.hw)

    def stage(self):
        self.stages.append(len(self.layers))

    def residual(self, body, cout: int, stride: int = 1, post_relu: bool = True):
        """Append a residual block; ``body(builder)`` emits the branch layers."""
        cin, hw_in = self.c, self.hw
        b = self.blocks
        self.blocks += 1
        self.block_relu_starts.append(self.relus)
        self.layers.append(ResidualBegin(b))
        body(self)
        shortcut: tuple = ()
        if stride != 1 or cin != cout:
            c_branch, hw_branch = self.c, self.hw
            self.c, self.hw = cin, hw_in
            proj = self.conv_layer(cout, 1, stride)
            shortcut = (proj, self.bn_layer())
            self.c, self.hw = c_branch, hw_branch
        self.layers.append(ResidualEnd(b, shortcut))
        if post_relu:
            self.relu()

    def dense(self, body):
        cin = self.c
        b = self.blocks
        self.blocks += 1
        self.layers.append(ConcatBegin(b))
        body(self)
        self.layers.append(ConcatEnd(b))
        self.c += cin

    def head(self, num_classes: int, hidden: int | None = None):
        self.layers.append(Flatten())
        features = self.c * self.hw * self.hw
        if hidden:
            name = self._name("fc")
            self.shapes[f"{name}.w"] = (hidden, features)
            self.shapes[f"{name}.b"] = (hidden,)
            self.layers.append(Linear(f"{name}.w", f"{name}.b"))
            self.relu()
            features = hidden
        name = self._name("fc")
        self.shapes[f"{name}.w"] = (num_classes, features)
        self.shapes[f"{name}.b"] = (num_classes,)
        self.layers.append(Linear(f"{name}.w", f"{name}.b"))

    def finish(self, name: str, num_classes: int) -> ModelDef:
        return ModelDef(
            name,
            self.input_shape,
            tuple(self.layers),
            num_classes,
            dict(self.shapes),
            tuple(self.stages),
            tuple(self.block_relu_starts),
        )


def _basic_block(cout, stride):
    def body(b: _Builder):
        b.conv(cout, 3, stride)
        b.conv(cout, 3, relu=False)

    return body


def resnet_small(num_classes=10) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(16, 3)
    b.maxpool(3, 2, 1)  # overlapping windows, 32 -> 16
    for width, blocks, stride in ((16, 3, 1), (32, 3, 2), (64, 3, 2), (128, 2, 2)):
        b.stage()
        for k in range(blocks):
            s = stride if k == 0 else 1
            b.residual(_basic_block(width, s), width, s)
    b.global_pool()
    b.head(num_classes)
    return b.finish("resnet-small", num_classes)


def vgg_small(num_classes=10) -> ModelDef:
    b = _Builder(3, 32)
    for widths in ((16, 16), (32, 32), (64, 64), (128,)):
        b.stage()
        for w in widths:
            b.conv(w, 3)
        b.maxpool(2, 2)  # non-overlapping
    b.head(num_classes, hidden=128)
    return b.finish("vgg-small", num_classes)


def wrn_tiny(num_classes=10) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(32, 3, stride=2)
    for width, stride in ((48, 1), (96, 2), (160, 2)):
        b.stage()
        b.residual(_basic_block(width, stride), width, stride)
    b.global_pool()
    b.head(num_classes)
    return b.finish("wrn-tiny", num_classes)


def densenet_tiny(num_classes=10, growth=12, layers_per_block=4) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(24, 3, bn=False, relu=False)
    b.avgpool(2)  # 32 -> 16

    def unit(x: _Builder):
        x.bn()
        x.relu()
        x.conv(growth, 3, bn=False, relu=False)

    for k in range(3):
        b.stage()
        for _ in range(layers_per_block):
            b.dense(unit)
        if k < 2:
            b.bn()
            b.relu()
            b.conv(b.c // 2, 1, bn=False, relu=False)
            b.avgpool(2)
    b.bn()
    b.relu()
    b.global_pool()
    b.head(num_classes)
    return b.finish("densenet-tiny", num_classes)


def plaincnn(num_classes=10) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(32, 5, bn=False, bias=True)
    b.avgpool(2)
    b.stage()
    b.conv(64, 3, bn=False, bias=True)
    b.avgpool(2)
    b.conv(64, 3, bn=False, bias=True)
    b.avgpool(2)
    b.head(num_classes, hidden=192)
    return b.finish("plaincnn", num_classes)


def resnext_tiny(num_classes=10, cardinality=8) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(32, 3, stride=2)

    def bottleneck(mid, cout, stride):
        def body(x: _Builder):
            x.conv(mid, 1)
            x.conv(mid, 3, stride, groups=cardinality)
            x.conv(cout, 1, relu=False)

        return body

    for mid, cout, stride in ((64, 64, 1), (64, 64, 1), (128, 128, 2), (128, 128, 2)):
        if stride == 2:
            b.stage()
        b.residual(bottleneck(mid, cout, stride), cout, stride)
    b.global_pool()
    b.head(num_classes)
    return b.finish("resnext-tiny", num_classes)


def mobilenet_tiny(num_classes=10) -> ModelDef:
    b = _Builder(3, 32)
    b.stage()
    b.conv(24, 3, stride=2)

    def inverted(expand, cout, stride):
        def body(x: _Builder):
            mid = x.c * expand
            x.conv(mid, 1)
            x.conv(mid, 3, stride, groups=mid)  # depthwise
            x.conv(cout, 1, relu=False)  # linear bottleneck

        return body

    for cout, stride in ((24, 1), (40, 2), (40, 1), (80, 2), (80, 1)):
        if stride == 2:
            b.stage()
        if stride == 1 and b.c == cout:
            b.residual(inverted(3, cout, stride), cout, stride, post_relu=False)
        else:
            inverted(3, cout, stride)(b)
    b.conv(160, 1)
    b.global_pool()
    b.head(num_classes)
    return b.finish("mobilenet-tiny", num_classes)


REGISTRY = {
    "resnet-small": resnet_small,
    "vgg-small": vgg_small,
    "wrn-tiny": wrn_tiny,
    "densenet-tiny": densenet_tiny,
    "plaincnn": plaincnn,
    "resnext-tiny": resnext_tiny,
    "mobilenet-tiny": mobilenet_tiny,
}


def build(arch_name: str) -> ModelDef:
    try:
        return REGISTRY[arch_name]()
    except KeyError:
        raise RegistryError(f"unknown architecture {arch_name!r}; known: {sorted(REGISTRY)}") from None


def init_weights(model: ModelDef, seed: int) -> dict[str, np.ndarray]:
    """He-normal convolution/linear weights, identity batch norm, zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in sorted(model.param_shapes.items()):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith((".scale", ".var")):
            w = np.ones(shape)
        else:
            w = np.zeros(shape)
        out[name] = w.astype(DTYPE)
    return out


def default_relu_start(model: ModelDef, blocks: int = 8, plain_relus: int = 3) -> int:
    """First ReLU ordinal to modify: the last ``blocks`` residual blocks, or the
    last ``plain_relus`` ReLUs of a network without residual blocks."""
    if model.block_relu_starts:
        k = max(len(model.block_relu_starts) - blocks, 0)
        return model.block_relu_starts[k]
    return max(model.relu_count - plain_relus, 0)


def default_temperature(model: ModelDef) -> float:
    """t = 10 when the network pools with overlapping windows, t = 1 otherwise."""
    for layer in model.layers:
        if isinstance(layer, MaxPool) and (
            layer.spec.stride_h < layer.spec.kernel_h or layer.spec.stride_w < layer.spec.kernel_w
        ):
            return 10.0
    return 1.0
